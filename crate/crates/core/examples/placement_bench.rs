//! Throughput of disaggregated, colocated and hybrid placements under both
//! cost presets, on the virtual clock.

use chunkrl::envsim::{EnvKind, ResetMode, VecEnvConfig};
use chunkrl::harness::{bench, bench_table_csv, standard_plans};
use chunkrl::placement::CostModel;
use chunkrl::policy::{Architecture, PolicyNet, SampleMode};
use chunkrl::rollout::RolloutSpec;

fn main() {
    let policy = PolicyNet::new(
        Architecture {
            obs_dim: 4,
            trunk_widths: vec![16],
            vocab_size: 3,
            chunk_len: 4,
            tokens_per_action: 2,
            value_hidden: 8,
        },
        0,
    )
    .unwrap();
    let spec = RolloutSpec {
        env: EnvKind::default(),
        env_cfg: VecEnvConfig {
            num_envs: 64,
            max_episode_steps: 80,
            auto_reset: true,
            ignore_terminations: true,
            use_fixed_reset_state_ids: false,
            seed: 0,
        },
        reset_ids: None,
        steps: 20,
        reset_mode: ResetMode::Deferred,
        sample_seed: 0,
        sample_mode: SampleMode::Stochastic,
    };
    let presets = vec![
        ("1to1".to_string(), CostModel::one_to_one()),
        ("15to1".to_string(), CostModel::fifteen_to_one()),
    ];
    let rows = bench(&standard_plans(), &presets, &policy, &spec).unwrap();
    print!("{}", bench_table_csv(&rows));
}
