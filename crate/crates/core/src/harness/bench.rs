//! Throughput sweeps over placement plans and cost presets.

use super::{HarnessError, RunConfig};
use crate::envsim::VecEnvConfig;
use crate::placement::{
    derive_mode, run_rollout_epoch, run_training_phase, throughput, Backend, CostModel, EpochTrace,
    Mode, OffloadFlags, PlacementPlan,
};
use crate::policy::PolicyNet;
use crate::rollout::RolloutSpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub plan: String,
    pub mode: Mode,
    pub preset: String,
    pub stages: usize,
    pub frames: usize,
    pub rollout_time: f64,
    pub training_time: f64,
    pub epoch_time: f64,
    pub throughput: f64,
    /// Throughput relative to the first row of the same preset.
    pub relative: f64,
}

/// Disaggregated, colocated and hybrid plans on eight slots, the hybrid one
/// with one and two pipeline stages.
pub fn standard_plans() -> Vec<(String, PlacementPlan)> {
    let p = |e: &str, r: &str, a: &str| PlacementPlan::new(8, e, r, a).expect("static plan");
    vec![
        ("disaggregated".into(), p("0-1", "2-3", "4-7")),
        (
            "colocated".into(),
            p("0-7", "0-7", "0-7").with_offload(OffloadFlags::all(true)),
        ),
        (
            "hybrid_k1".into(),
            p("0-3", "4-7", "0-7").with_offload(OffloadFlags::all(true)),
        ),
        (
            "hybrid_k2".into(),
            p("0-3", "4-7", "0-7")
                .with_offload(OffloadFlags::all(true))
                .with_stages(2),
        ),
    ]
}

/// One epoch for `plan` starting from steady-state residency.
pub fn simulate_placement(
    plan: &PlacementPlan,
    backend: Backend,
    cost: &CostModel,
    policy: &PolicyNet,
    spec: &RolloutSpec,
) -> Result<EpochTrace, HarnessError> {
    let (_, mut trace) = run_rollout_epoch(
        plan,
        backend,
        cost,
        policy,
        spec,
        EpochTrace::steady_state(plan),
    )?;
    run_training_phase(plan, cost, spec.env_cfg.num_envs, &mut trace)?;
    Ok(trace)
}

/// Every plan under every preset on the virtual clock.
pub fn bench(
    plans: &[(String, PlacementPlan)],
    presets: &[(String, CostModel)],
    policy: &PolicyNet,
    spec: &RolloutSpec,
) -> Result<Vec<BenchRow>, HarnessError> {
    let mut rows = Vec::new();
    for (preset, cost) in presets {
        let mut base = None;
        for (name, plan) in plans {
            let trace = simulate_placement(plan, Backend::Virtual, cost, policy, spec)?;
            let thr = throughput(&trace)?;
            let base = *base.get_or_insert(thr);
            rows.push(BenchRow {
                plan: name.clone(),
                mode: derive_mode(plan)?,
                preset: preset.clone(),
                stages: plan.pipeline_stage_num,
                frames: trace.frames,
                rollout_time: trace.rollout_end,
                training_time: trace.makespan() - trace.rollout_end,
                epoch_time: trace.makespan(),
                throughput: thr,
                relative: thr / base,
            });
        }
    }
    Ok(rows)
}

pub fn bench_table_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("plan,mode,preset,stages,frames,rollout_time,training_time,epoch_time,throughput,relative\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.plan,
            r.mode,
            r.preset,
            r.stages,
            r.frames,
            r.rollout_time,
            r.training_time,
            r.epoch_time,
            r.throughput,
            r.relative
        ));
    }
    s
}

impl RunConfig {
    /// Rollout spec of the first epoch, used by the placement commands.
    pub fn bench_spec(&self) -> RolloutSpec {
        RolloutSpec {
            env: self.env.task.clone(),
            env_cfg: VecEnvConfig {
                use_fixed_reset_state_ids: false,
                ..self.env_config(self.seed)
            },
            reset_ids: None,
            steps: self.rollout.steps,
            reset_mode: self.env.reset_mode,
            sample_seed: self.seed,
            sample_mode: self.rollout.sample_mode,
        }
    }
}
