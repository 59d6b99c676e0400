//! Rollout, targets and updates wired together through the public API.

use chunkrl::advantage::{valid_action_mask, GaeParams, LengthNorm};
use chunkrl::envsim::{EnvKind, ResetMode, ResetStateId, VecEnvConfig};
use chunkrl::granularity::{GranularitySpec, Level};
use chunkrl::optim::{
    build_grpo_batch, build_ppo_batch, update, Adam, Objective, OptimError, PpoParams,
};
use chunkrl::placement::{run_rollout_epoch, Backend, CostModel, EpochTrace, PlacementPlan};
use chunkrl::policy::{Architecture, PolicyNet, SampleMode};
use chunkrl::rollout::{collect, RolloutSpec};

fn arch() -> Architecture {
    Architecture {
        obs_dim: 4,
        trunk_widths: vec![16],
        vocab_size: 3,
        chunk_len: 4,
        tokens_per_action: 2,
        value_hidden: 8,
    }
}

fn spec(grouped: bool) -> RolloutSpec {
    RolloutSpec {
        env: EnvKind::ToyReach {
            grid_size: 4,
            num_reset_states: 8,
            dense_reward: false,
        },
        env_cfg: VecEnvConfig {
            num_envs: 8,
            max_episode_steps: 16,
            auto_reset: !grouped,
            ignore_terminations: false,
            use_fixed_reset_state_ids: grouped,
            seed: 4,
        },
        reset_ids: grouped.then(|| (0..8).map(|i| ResetStateId(i / 4)).collect()),
        steps: 4,
        reset_mode: ResetMode::Immediate,
        sample_seed: 8,
        sample_mode: SampleMode::Stochastic,
    }
}

#[test]
fn every_supported_cell_trains_a_step() {
    let net = PolicyNet::new(arch(), 1).unwrap();
    let slab = collect(&net, &spec(false)).unwrap();
    for (adv, lp) in [
        (Level::Chunk, Level::Chunk),
        (Level::Chunk, Level::Action),
        (Level::Chunk, Level::Token),
        (Level::Action, Level::Action),
        (Level::Action, Level::Token),
    ] {
        let batch =
            build_ppo_batch(&slab, GranularitySpec::new(adv, lp), GaeParams::default()).unwrap();
        let mut n = net.clone();
        let mut opt = Adam::new(n.num_params(), 1e-3, 1.0);
        let m = update(
            &mut n,
            &mut opt,
            &batch,
            Objective::Ppo,
            &PpoParams::default(),
            0,
        )
        .unwrap();
        assert_eq!(m.steps, 4);
        assert_ne!(n.theta(), net.theta(), "{adv} / {lp}");
    }
}

#[test]
fn grpo_batch_respects_the_mask() {
    let net = PolicyNet::new(arch(), 2).unwrap();
    let slab = collect(&net, &spec(true)).unwrap();
    let mask = valid_action_mask(&slab);
    let valid: usize = mask.iter().map(|m| m.iter().filter(|&&v| v).count()).sum();
    let spec_g = GranularitySpec::new(Level::Action, Level::Action);
    let open = chunkrl::advantage::FilterBounds::new(-1.0, 2.0).unwrap();
    match build_grpo_batch(&slab, spec_g, 1e-6, open, true) {
        Ok(batch) => {
            let units: usize = batch
                .records
                .iter()
                .map(|r| r.valid.iter().filter(|&&v| v).count())
                .sum();
            assert_eq!(units, valid);
            let mut n = net.clone();
            let mut opt = Adam::new(n.num_params(), 1e-3, 1.0);
            update(
                &mut n,
                &mut opt,
                &batch,
                Objective::Grpo(LengthNorm::LengthNormalized),
                &PpoParams::default(),
                0,
            )
            .unwrap();
        }
        Err(e) => panic!("{e}"),
    }
    let strict = chunkrl::advantage::FilterBounds::new(5.0, 6.0).unwrap();
    assert!(matches!(
        build_grpo_batch(&slab, spec_g, 1e-6, strict, true),
        Err(OptimError::SkipUpdate)
    ));
}

#[test]
fn placed_rollout_feeds_the_same_update() {
    let net = PolicyNet::new(arch(), 3).unwrap();
    let s = spec(false);
    let plan = PlacementPlan::new(4, "0-1", "2", "3")
        .unwrap()
        .with_stages(2);
    let (placed, trace) = run_rollout_epoch(
        &plan,
        Backend::Real,
        &CostModel::one_to_one(),
        &net,
        &s,
        EpochTrace::default(),
    )
    .unwrap();
    assert!(trace.find_overlap().is_none());
    let reference = collect(&net, &s).unwrap();
    let spec_g = GranularitySpec::new(Level::Action, Level::Token);
    let run = |slab| {
        let batch = build_ppo_batch(slab, spec_g, GaeParams::default()).unwrap();
        let mut n = net.clone();
        let mut opt = Adam::new(n.num_params(), 1e-3, 1.0);
        update(
            &mut n,
            &mut opt,
            &batch,
            Objective::Ppo,
            &PpoParams::default(),
            5,
        )
        .unwrap();
        n
    };
    assert_eq!(run(&placed).theta(), run(&reference).theta());
}
