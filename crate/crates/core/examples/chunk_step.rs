//! Chunked stepping with and without partial resets.
//!
//! A scripted environment succeeds at step 5 of every episode. Over 40
//! atomic steps a fixed-length rollout sees one episode per environment,
//! while immediate partial resets fit eight.

use chunkrl::envsim::{EnvKind, ResetMode, VecEnvConfig};
use chunkrl::policy::{Architecture, PolicyNet, SampleMode};
use chunkrl::rollout::{collect, RolloutSpec};

fn main() {
    let policy = PolicyNet::new(
        Architecture {
            obs_dim: 2,
            trunk_widths: vec![8],
            vocab_size: 3,
            chunk_len: 4,
            tokens_per_action: 2,
            value_hidden: 8,
        },
        0,
    )
    .unwrap();
    for (label, auto_reset, ignore) in [
        ("fixed-length", false, true),
        ("partial reset", true, false),
    ] {
        let spec = RolloutSpec {
            env: EnvKind::Scripted {
                success_step: 5,
                num_reset_states: 4,
            },
            env_cfg: VecEnvConfig {
                num_envs: 4,
                max_episode_steps: 40,
                auto_reset,
                ignore_terminations: ignore,
                use_fixed_reset_state_ids: false,
                seed: 1,
            },
            reset_ids: None,
            steps: 10,
            reset_mode: ResetMode::Immediate,
            sample_seed: 2,
            sample_mode: SampleMode::Stochastic,
        };
        let slab = collect(&policy, &spec).unwrap();
        let per_env: Vec<usize> = (0..4)
            .map(|e| slab.episodes_of(e).filter(|ep| ep.finished).count())
            .collect();
        println!(
            "{label:<14} frames {:>4}  finished episodes per env {per_env:?}",
            slab.frames()
        );
    }
}
