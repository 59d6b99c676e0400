//! The same rollout on worker threads and on the virtual clock.
//!
//! Trajectories match bit for bit; only the timeline differs. The trace of
//! the threaded run is written as JSON lines to stdout.

use chunkrl::envsim::{EnvKind, ResetMode, VecEnvConfig};
use chunkrl::placement::{
    run_rollout_epoch, Backend, CostModel, EpochTrace, OffloadFlags, PlacementPlan,
};
use chunkrl::policy::{Architecture, PolicyNet, SampleMode};
use chunkrl::rollout::RolloutSpec;

fn main() {
    let policy = PolicyNet::new(
        Architecture {
            obs_dim: 4,
            trunk_widths: vec![32],
            vocab_size: 3,
            chunk_len: 4,
            tokens_per_action: 2,
            value_hidden: 8,
        },
        1,
    )
    .unwrap();
    let spec = RolloutSpec {
        env: EnvKind::default(),
        env_cfg: VecEnvConfig {
            num_envs: 16,
            max_episode_steps: 24,
            auto_reset: true,
            ignore_terminations: false,
            use_fixed_reset_state_ids: false,
            seed: 3,
        },
        reset_ids: None,
        steps: 6,
        reset_mode: ResetMode::Immediate,
        sample_seed: 4,
        sample_mode: SampleMode::Stochastic,
    };
    let plan = PlacementPlan::new(8, "0-3", "4-7", "0-7")
        .unwrap()
        .with_offload(OffloadFlags::all(true))
        .with_stages(2);
    let cost = CostModel::one_to_one();
    let (a, _) = run_rollout_epoch(
        &plan,
        Backend::Virtual,
        &cost,
        &policy,
        &spec,
        EpochTrace::default(),
    )
    .unwrap();
    let (b, trace) = run_rollout_epoch(
        &plan,
        Backend::Real,
        &cost,
        &policy,
        &spec,
        EpochTrace::default(),
    )
    .unwrap();
    eprintln!("identical trajectories: {}", a == b);
    trace.export(std::io::stdout().lock()).unwrap();
}
