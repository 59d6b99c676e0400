//! Independent checks of computed values against brute-force references.

use crate::advantage::{compute_gae, FilterBounds, GaeParams, LengthNorm, UnitEnd};
use crate::envsim::{EnvKind, ResetMode, ResetStateId, VecEnvConfig};
use crate::granularity::{aggregate_logprob, GranularitySpec, Level};
use crate::optim::{
    build_grpo_batch, build_ppo_batch, grpo_loss, ppo_loss, ratio, PpoParams, RolloutBatch,
};
use crate::oracle::{
    self, binomial_halfwidth, central_difference, pipeline_makespan, relative_error,
};
use crate::placement::{schedule_rollout, CostModel, PlacementPlan};
use crate::policy::{Architecture, PolicyNet, SampleMode};
use crate::rollout::{collect, RolloutSpec};
use crate::types::{Observation, TrajectorySlab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Gae,
    Grad,
    Makespan,
    Sampling,
    All,
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "gae" => Suite::Gae,
            "grad" => Suite::Grad,
            "makespan" => Suite::Makespan,
            "sampling" => Suite::Sampling,
            "all" => Suite::All,
            _ => return Err(format!("unknown suite {s:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Absolute error of recursive GAE against the double sum.
    pub gae: f64,
    /// Relative error of analytic gradients against central differences.
    pub grad: f64,
    /// Relative error of scheduled makespan against the closed form.
    pub makespan: f64,
    /// Sigma multiple for empirical token frequencies.
    pub sampling_z: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            gae: 1e-10,
            grad: 1e-4,
            makespan: 1e-9,
            sampling_z: 4.0,
        }
    }
}

/// One certified quantity: the worst error seen and the bound it was held to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub suite: Suite,
    pub name: String,
    pub instances: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl OracleCheck {
    fn new(suite: Suite, name: &str, instances: usize, worst: f64, tolerance: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            instances,
            worst,
            tolerance,
            passed: worst <= tolerance,
        }
    }
}

pub fn run_suite(suite: Suite, tol: &Tolerances, seed: u64) -> Vec<OracleCheck> {
    match suite {
        Suite::Gae => vec![gae_suite(tol.gae, seed, 500)],
        Suite::Grad => grad_suite(tol.grad, seed, 60),
        Suite::Makespan => vec![makespan_suite(tol.makespan)],
        Suite::Sampling => vec![sampling_suite(tol.sampling_z, seed, 100_000)],
        Suite::All => [Suite::Gae, Suite::Grad, Suite::Makespan, Suite::Sampling]
            .into_iter()
            .flat_map(|s| run_suite(s, tol, seed))
            .collect(),
    }
}

fn gae_suite(tol: f64, seed: u64, n: usize) -> OracleCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let len = rng.gen_range(1..=12);
        let gamma = rng.gen_range(0.0..1.0);
        let lambda = rng.gen_range(0.0..1.0);
        let rewards: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut ends = Vec::with_capacity(len);
        let mut oends = Vec::with_capacity(len);
        for _ in 0..len {
            let u: f64 = rng.gen();
            if u < 0.15 {
                ends.push(UnitEnd::Terminated);
                oends.push(oracle::UnitEnd::Terminated);
            } else if u < 0.25 {
                let v = rng.gen_range(-1.0..1.0);
                ends.push(UnitEnd::Truncated(v));
                oends.push(oracle::UnitEnd::Truncated(v));
            } else {
                ends.push(UnitEnd::Continue);
                oends.push(oracle::UnitEnd::Continue);
            }
        }
        let boot = rng.gen_range(-1.0..1.0);
        let (adv, _) = compute_gae(&rewards, &values, &ends, boot, GaeParams { gamma, lambda })
            .expect("lengths match");
        let want = oracle::gae_double_sum(&rewards, &values, &oends, boot, gamma, lambda);
        for (a, b) in adv.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    OracleCheck::new(Suite::Gae, "gae_recursion_vs_double_sum", n, worst, tol)
}

fn small_arch() -> Architecture {
    Architecture {
        obs_dim: 4,
        trunk_widths: vec![6],
        vocab_size: 3,
        chunk_len: 2,
        tokens_per_action: 2,
        value_hidden: 4,
    }
}

fn reach_slab(policy: &PolicyNet, grouped: bool, seed: u64) -> TrajectorySlab {
    let spec = RolloutSpec {
        env: EnvKind::ToyReach {
            grid_size: 3,
            num_reset_states: 8,
            dense_reward: true,
        },
        env_cfg: VecEnvConfig {
            num_envs: 4,
            max_episode_steps: 5,
            auto_reset: !grouped,
            ignore_terminations: false,
            use_fixed_reset_state_ids: grouped,
            seed,
        },
        reset_ids: grouped.then(|| [1, 1, 2, 2].map(ResetStateId).to_vec()),
        steps: 4,
        reset_mode: ResetMode::Deferred,
        sample_seed: seed ^ 0x5eed,
        sample_mode: SampleMode::Stochastic,
    };
    collect(policy, &spec).expect("valid rollout spec")
}

fn near_kink(net: &PolicyNet, batch: &RolloutBatch, eps: f64) -> bool {
    let m = batch.tokens_per_action;
    batch.records.iter().any(|r| {
        let new =
            &net.evaluate_logprobs(std::slice::from_ref(&r.obs), std::slice::from_ref(&r.chunk))[0];
        let a = aggregate_logprob(new, m, batch.spec.logprob_level);
        let b = aggregate_logprob(&r.old_token_logprobs, m, batch.spec.logprob_level);
        a.iter().zip(&b).any(|(x, y)| {
            let rho = ratio(*x, *y);
            (rho - 1.0 - eps).abs() < 1e-3 || (rho - 1.0 + eps).abs() < 1e-3
        })
    })
}

fn perturbed(net: &PolicyNet, seed: u64) -> PolicyNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = net.clone();
    for t in out.theta_mut() {
        *t += 0.05 * rng.gen_range(-1.0..1.0);
    }
    out
}

fn grad_suite(tol: f64, seed: u64, per_objective: usize) -> Vec<OracleCheck> {
    let params = PpoParams {
        entropy_coef: 0.01,
        ..PpoParams::default()
    };
    let cells = [
        (Level::Chunk, Level::Chunk),
        (Level::Chunk, Level::Action),
        (Level::Chunk, Level::Token),
        (Level::Action, Level::Action),
        (Level::Action, Level::Token),
    ];
    let fd_error = |net: &PolicyNet, analytic: &[f64], f: &dyn Fn(&PolicyNet) -> f64| {
        let fd = central_difference(net.theta(), 1e-5, |th| {
            f(&PolicyNet::from_parts(net.arch().clone(), th.to_vec()).expect("same shape"))
        });
        relative_error(analytic, &fd)
    };
    let mut out = Vec::new();
    let (mut worst, mut n, mut s) = (0.0f64, 0, seed);
    while n < per_objective {
        s += 1;
        let old = PolicyNet::randomized(small_arch(), s, 0.5).expect("valid arch");
        let (adv, lp) = cells[n % cells.len()];
        let Ok(batch) = build_ppo_batch(
            &reach_slab(&old, false, s),
            GranularitySpec::new(adv, lp),
            GaeParams::default(),
        ) else {
            continue;
        };
        let net = perturbed(&old, s ^ 0xabc);
        if batch.records.is_empty() || near_kink(&net, &batch, params.clip_eps) {
            continue;
        }
        let (_, g) = ppo_loss(&net, &batch, &params).expect("finite loss");
        worst = worst.max(fd_error(&net, &g, &|m| {
            ppo_loss(m, &batch, &params).expect("finite loss").0.loss
        }));
        n += 1;
    }
    out.push(OracleCheck::new(
        Suite::Grad,
        "ppo_loss_gradient",
        n,
        worst,
        tol,
    ));
    let (mut worst, mut n, mut s) = (0.0f64, 0, seed + 10_000);
    let open = FilterBounds {
        lower: -1e9,
        upper: 1e9,
    };
    while n < per_objective {
        s += 1;
        let old = PolicyNet::randomized(small_arch(), s, 0.5).expect("valid arch");
        let (adv, lp) = cells[n % cells.len()];
        let Ok(batch) = build_grpo_batch(
            &reach_slab(&old, true, s),
            GranularitySpec::new(adv, lp),
            1e-8,
            open,
            true,
        ) else {
            continue;
        };
        let net = perturbed(&old, s ^ 0xdef);
        if batch.records.is_empty() || near_kink(&net, &batch, params.clip_eps) {
            continue;
        }
        let mode = if n % 2 == 0 {
            LengthNorm::Base
        } else {
            LengthNorm::LengthNormalized
        };
        let (_, g) = grpo_loss(&net, &batch, mode, &params).expect("finite loss");
        worst = worst.max(fd_error(&net, &g, &|m| {
            grpo_loss(m, &batch, mode, &params)
                .expect("finite loss")
                .0
                .loss
        }));
        n += 1;
    }
    out.push(OracleCheck::new(
        Suite::Grad,
        "grpo_loss_gradient",
        n,
        worst,
        tol,
    ));
    out
}

fn makespan_suite(tol: f64) -> OracleCheck {
    let plan = |k| {
        PlacementPlan::new(2, "0", "1", "0-1")
            .expect("static plan")
            .with_stages(k)
    };
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for steps in [1usize, 2, 5, 13] {
        for k in 1..=4usize {
            for (g, s) in [(1.0, 1.0), (1.0, 15.0), (3.0, 2.0), (0.5, 0.25)] {
                let cost = CostModel {
                    t_gen: g,
                    t_sim_step: s,
                    t_gen_call: 0.0,
                    t_sim_call: 0.0,
                    t_comm: 0.0,
                    t_comm_colocated_per_slot: 0.0,
                    ..CostModel::one_to_one()
                };
                let acts = schedule_rollout(&plan(k), &cost, &vec![1; k], steps, 0.0);
                let got = acts.iter().map(|a| a.end).fold(0.0, f64::max);
                let want = pipeline_makespan(steps, k, g, s);
                worst = worst.max((got - want).abs() / want);
                n += 1;
            }
        }
    }
    OracleCheck::new(
        Suite::Makespan,
        "pipeline_makespan_closed_form",
        n,
        worst,
        tol,
    )
}

/// Worst deviation of first-token frequencies from their probabilities, in
/// units of the binomial half-width.
fn sampling_suite(z: f64, seed: u64, draws: usize) -> OracleCheck {
    let net = PolicyNet::randomized(small_arch(), seed, 1.0).expect("valid arch");
    let obs = Observation::new(vec![0.3, -0.2, 0.5, 0.1]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a);
    let v = net.arch().vocab_size;
    let mut counts = vec![0usize; v];
    let mut probs = vec![f64::NAN; v];
    for _ in 0..draws {
        let (chunk, lps) = net.sample_chunk(&obs, &mut rng, SampleMode::Stochastic);
        let t = chunk.0[0].0[0] as usize;
        counts[t] += 1;
        probs[t] = lps[0].exp();
    }
    let mut worst: f64 = 0.0;
    for (c, p) in counts.iter().zip(&probs) {
        if p.is_nan() {
            continue;
        }
        let freq = *c as f64 / draws as f64;
        worst = worst.max((freq - p).abs() / binomial_halfwidth(*p, draws, 1.0));
    }
    OracleCheck::new(
        Suite::Sampling,
        "first_token_frequencies_sigma",
        draws,
        worst,
        z,
    )
}
