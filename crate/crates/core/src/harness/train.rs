//! Epoch loop: rollout, advantage targets, update, evaluation.

use super::{Algo, HarnessError, RolloutMode, RunConfig};
use crate::envsim::{AnyEnv, EnvModel, ResetMode, ResetStateId};
use crate::optim::{
    build_grpo_batch, build_ppo_batch, update, write_metric, Adam, MetricRecord, Objective,
    OptimError,
};
use crate::placement::{run_rollout_epoch, run_training_phase, EpochTrace};
use crate::policy::{PolicyNet, SampleMode};
use crate::rollout::{collect, success_once_rate, RolloutSpec};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<MetricRecord>,
    /// First epoch (1-based count) whose evaluation reached the threshold.
    pub solved_at: Option<usize>,
    pub policy: PolicyNet,
}

/// Success-once rate of fresh first episodes without resets.
pub fn evaluate(
    cfg: &RunConfig,
    policy: &PolicyNet,
    env_seed: u64,
    sample_seed: u64,
    mode: SampleMode,
) -> Result<f64, HarnessError> {
    let mut env_cfg = cfg.env_config(env_seed);
    env_cfg.num_envs = cfg.eval.num_envs;
    env_cfg.auto_reset = false;
    env_cfg.ignore_terminations = false;
    env_cfg.use_fixed_reset_state_ids = false;
    let c = cfg.actor.chunk_len;
    let spec = RolloutSpec {
        env: cfg.env.task.clone(),
        env_cfg,
        reset_ids: None,
        steps: (cfg.env.max_episode_steps as usize).div_ceil(c),
        reset_mode: ResetMode::Deferred,
        sample_seed,
        sample_mode: mode,
    };
    Ok(success_once_rate(&collect(policy, &spec)?))
}

fn reset_ids(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Option<Vec<ResetStateId>> {
    if !cfg.env.use_fixed_reset_state_ids {
        return None;
    }
    let table = AnyEnv::from(&cfg.env.task).num_reset_states();
    let g = match cfg.algorithm.name {
        Algo::Grpo => cfg.algorithm.group_size,
        Algo::Ppo => 1,
    };
    let groups = cfg.env.num_envs.div_ceil(g);
    let picks = if groups <= table {
        sample(rng, table, groups).into_vec()
    } else {
        (0..groups).map(|_| rng.gen_range(0..table)).collect()
    };
    Some(
        (0..cfg.env.num_envs)
            .map(|i| ResetStateId(picks[i / g] as u32))
            .collect(),
    )
}

/// Runs `cfg.epochs` epochs and streams one metric line per epoch to `sink`.
///
/// Every epoch draws fresh environment and sampling seeds from one master
/// stream seeded by `cfg.seed`, so a run is reproducible end to end.
pub fn train(cfg: &RunConfig, sink: &mut dyn Write) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let plan = cfg.plan()?;
    let cost = cfg.cost()?;
    let spec_g = cfg.granularity();
    let params = &cfg.algorithm.ppo;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = PolicyNet::new(cfg.architecture(), master.gen())?;
    let mut opt = Adam::new(net.num_params(), params.learning_rate, params.max_grad_norm);
    let objective = match cfg.algorithm.name {
        Algo::Ppo => Objective::Ppo,
        Algo::Grpo => Objective::Grpo(cfg.algorithm.length_norm),
    };
    let use_mask = cfg.rollout_mode() == RolloutMode::ValidMask && cfg.algorithm.valid_mask;
    let algo = match cfg.algorithm.name {
        Algo::Ppo => "ppo",
        Algo::Grpo => "grpo",
    };
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut solved_at = None;
    for epoch in 0..cfg.epochs {
        let env_seed: u64 = master.gen();
        let sample_seed: u64 = master.gen();
        let update_seed: u64 = master.gen();
        let eval_env: u64 = master.gen();
        let eval_sample: u64 = master.gen();
        let spec = RolloutSpec {
            env: cfg.env.task.clone(),
            env_cfg: cfg.env_config(env_seed),
            reset_ids: reset_ids(cfg, &mut master),
            steps: cfg.rollout.steps,
            reset_mode: cfg.env.reset_mode,
            sample_seed,
            sample_mode: cfg.rollout.sample_mode,
        };
        let (slab, mut trace) = run_rollout_epoch(
            &plan,
            cfg.rollout.backend,
            &cost,
            &net,
            &spec,
            EpochTrace::steady_state(&plan),
        )?;
        run_training_phase(&plan, &cost, cfg.env.num_envs, &mut trace)?;
        let batch = match cfg.algorithm.name {
            Algo::Ppo => build_ppo_batch(&slab, spec_g, cfg.gae()),
            Algo::Grpo => build_grpo_batch(
                &slab,
                spec_g,
                cfg.algorithm.eps_std,
                cfg.filter_bounds(),
                use_mask,
            ),
        };
        let mut rec = MetricRecord {
            epoch,
            algo: algo.into(),
            rollout_success_rate: success_once_rate(&slab),
            frames: slab.frames(),
            ..Default::default()
        };
        match batch.and_then(|b| update(&mut net, &mut opt, &b, objective, params, update_seed)) {
            Ok(m) => {
                rec.loss = m.last.loss;
                rec.policy_loss = m.last.policy_loss;
                rec.value_loss = m.last.value_loss;
                rec.entropy = m.last.entropy;
                rec.clip_frac = m.last.clip_frac;
                rec.approx_kl = m.last.approx_kl;
                rec.grad_norm = m.grad_norm;
            }
            Err(OptimError::SkipUpdate) => rec.skipped = true,
            Err(e) => return Err(e.into()),
        }
        rec.success_rate = evaluate(cfg, &net, eval_env, eval_sample, cfg.eval.sample_mode)?;
        write_metric(&mut *sink, &rec)?;
        if solved_at.is_none() && rec.success_rate >= cfg.algorithm.success_threshold {
            solved_at = Some(epoch + 1);
        }
        records.push(rec);
        if solved_at.is_some() && cfg.eval.stop_at_threshold {
            break;
        }
    }
    Ok(TrainOutcome {
        records,
        solved_at,
        policy: net,
    })
}
