//! Greedy list scheduling of the rollout pipeline on the virtual clock.

use super::{Activity, CostModel, PlacementError, PlacementPlan};
use crate::policy::PolicyNet;
use crate::rollout::{assemble, Generated, RolloutSpec, Sampler, Stage};
use crate::types::TrajectorySlab;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduledActivity {
    pub stage: usize,
    pub step: usize,
    pub activity: Activity,
    pub start: f64,
    pub end: f64,
}

/// Schedules `steps` generate/simulate rounds for stages of the given sizes.
///
/// Each stage is a chain `gen(0), sim(0), gen(1), ...`. At every decision the
/// pending activity with the earliest feasible start runs next; ties go to
/// the stage that has waited longest, then to the lower stage. An activity holds every slot of its component; when the
/// env and rollout slot sets overlap, the two components exclude each other.
pub fn schedule_rollout(
    plan: &PlacementPlan,
    cost: &CostModel,
    stage_sizes: &[usize],
    steps: usize,
    start: f64,
) -> Vec<ScheduledActivity> {
    let shared = plan.env.intersects(&plan.rollout);
    let latency = cost.exchange_latency(plan);
    let k = stage_sizes.len();
    let mut ready = vec![start; k];
    // Next activity per stage: 2 * step + (0 for generate, 1 for simulate).
    let mut next = vec![0usize; k];
    let (mut gen_free, mut sim_free) = (start, start);
    let mut out = Vec::with_capacity(2 * k * steps);
    loop {
        let mut best: Option<(f64, f64, usize)> = None;
        for s in 0..k {
            if next[s] >= 2 * steps {
                continue;
            }
            let is_gen = next[s].is_multiple_of(2);
            let free = match (is_gen, shared) {
                (_, true) => gen_free.max(sim_free),
                (true, false) => gen_free,
                (false, false) => sim_free,
            };
            let est = ready[s].max(free);
            if best.is_none_or(|(b, r, _)| est < b || (est == b && ready[s] < r)) {
                best = Some((est, ready[s], s));
            }
        }
        let Some((t0, _, s)) = best else { break };
        let is_gen = next[s].is_multiple_of(2);
        let (activity, d) = if is_gen {
            (
                Activity::Generate,
                cost.gen_time(stage_sizes[s], plan.rollout.len()),
            )
        } else {
            (
                Activity::Simulate,
                cost.sim_time(stage_sizes[s], plan.env.len()),
            )
        };
        let t1 = t0 + d;
        if is_gen {
            gen_free = t1;
        } else {
            sim_free = t1;
        }
        ready[s] = t1 + latency;
        out.push(ScheduledActivity {
            stage: s,
            step: next[s] / 2,
            activity,
            start: t0,
            end: t1,
        });
        next[s] += 1;
    }
    out
}

/// Runs generation and simulation in schedule order.
pub(super) fn execute(
    policy: &PolicyNet,
    spec: &RolloutSpec,
    stages: &[Vec<usize>],
    acts: &[ScheduledActivity],
) -> Result<TrajectorySlab, PlacementError> {
    let mut workers = stages
        .iter()
        .map(|ids| Stage::new(spec, ids))
        .collect::<Result<Vec<_>, _>>()?;
    let mut sampler = Sampler::new(
        spec.sample_seed,
        stages.iter().flatten().copied(),
        spec.sample_mode,
    );
    let mut pending: Vec<Option<Vec<Generated>>> = vec![None; stages.len()];
    for a in acts {
        let st = &mut workers[a.stage];
        match a.activity {
            Activity::Generate => {
                pending[a.stage] =
                    Some(sampler.generate(policy, &stages[a.stage], st.observations()));
            }
            _ => {
                let gen = pending[a.stage].take().expect("simulate before generate");
                st.apply(policy, gen)?;
            }
        }
    }
    let arch = policy.arch();
    Ok(assemble(
        workers.into_iter().map(|w| w.finish(policy)).collect(),
        arch.chunk_len,
        arch.tokens_per_action,
    ))
}
