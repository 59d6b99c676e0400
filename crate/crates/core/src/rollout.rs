//! Rollout collection split into a generation side and a simulation side.
//!
//! [`Stage`] owns a partition of the environments and turns generated
//! chunks into [`StepRecord`]s; [`Sampler`] owns one RNG per environment and
//! produces chunks. Because every random stream is keyed by the global
//! environment id, any partitioning or interleaving of stages yields the same
//! trajectories as [`collect`] over the whole batch.

use crate::envsim::{
    mix, AnyEnv, EnvError, EnvKind, ResetMode, ResetStateId, VecEnv, VecEnvConfig,
};
use crate::policy::{PolicyNet, SampleMode};
use crate::types::{ActionChunk, Bootstrap, GroupKey, Observation, StepRecord, TrajectorySlab};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Everything needed to reproduce one rollout batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSpec {
    pub env: EnvKind,
    pub env_cfg: VecEnvConfig,
    /// One reset state per environment when fixed reset states are used.
    pub reset_ids: Option<Vec<ResetStateId>>,
    /// Chunk steps per environment.
    pub steps: usize,
    pub reset_mode: ResetMode,
    pub sample_seed: u64,
    pub sample_mode: SampleMode,
}

/// Output of one policy inference for one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub chunk: ActionChunk,
    pub token_logprobs: Vec<f64>,
    pub value_scalar: f64,
    pub value_vector: Vec<f64>,
}

/// Per-environment sampling streams.
#[derive(Debug, Clone)]
pub struct Sampler {
    rngs: BTreeMap<usize, ChaCha8Rng>,
    mode: SampleMode,
}

impl Sampler {
    pub fn new(seed: u64, global_ids: impl IntoIterator<Item = usize>, mode: SampleMode) -> Self {
        let rngs = global_ids
            .into_iter()
            .map(|g| (g, ChaCha8Rng::seed_from_u64(mix(seed, g as u64))))
            .collect();
        Self { rngs, mode }
    }

    pub fn generate(
        &mut self,
        policy: &PolicyNet,
        global_ids: &[usize],
        obs: &[Observation],
    ) -> Vec<Generated> {
        global_ids
            .iter()
            .zip(obs)
            .map(|(g, o)| {
                let rng = self.rngs.get_mut(g).expect("unknown environment id");
                let (chunk, token_logprobs) = policy.sample_chunk(o, rng, self.mode);
                let (value_scalar, value_vector) = policy.values_both(o);
                Generated {
                    chunk,
                    token_logprobs,
                    value_scalar,
                    value_vector,
                }
            })
            .collect()
    }
}

fn bootstrap_of(policy: &PolicyNet, obs: &Observation) -> Bootstrap {
    let (scalar, vector) = policy.values_both(obs);
    Bootstrap {
        scalar,
        action: vector[0],
    }
}

/// A partition of the environment batch and the records it has produced.
#[derive(Debug, Clone)]
pub struct Stage {
    env: VecEnv<AnyEnv>,
    reset_mode: ResetMode,
    obs: Vec<Observation>,
    records: Vec<Vec<StepRecord>>,
    groups: Vec<Vec<(u64, GroupKey)>>,
}

/// Records of one stage, keyed by global environment id.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub global_ids: Vec<usize>,
    pub records: Vec<Vec<StepRecord>>,
    pub groups: Vec<Vec<(u64, GroupKey)>>,
    pub tail_bootstrap: Vec<Bootstrap>,
}

impl Stage {
    /// Builds and resets the environments with the given global ids.
    pub fn new(spec: &RolloutSpec, global_ids: &[usize]) -> Result<Self, EnvError> {
        let mut env = VecEnv::partition(spec.env_cfg.clone(), AnyEnv::from(&spec.env), global_ids)?;
        let ids: Option<Vec<ResetStateId>> = match &spec.reset_ids {
            Some(all) => {
                if all.len() != spec.env_cfg.num_envs {
                    return Err(EnvError::Config(format!(
                        "{} reset ids for {} environments",
                        all.len(),
                        spec.env_cfg.num_envs
                    )));
                }
                Some(global_ids.iter().map(|&g| all[g]).collect())
            }
            None => None,
        };
        let obs = env.reset(None, ids.as_deref())?;
        let groups = (0..env.len())
            .map(|i| vec![(env.episode_id(i), env.group_key(i))])
            .collect();
        Ok(Self {
            records: vec![Vec::new(); env.len()],
            env,
            reset_mode: spec.reset_mode,
            obs,
            groups,
        })
    }

    pub fn global_ids(&self) -> Vec<usize> {
        self.env.global_ids()
    }

    pub fn len(&self) -> usize {
        self.env.len()
    }

    pub fn is_empty(&self) -> bool {
        self.env.is_empty()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.obs
    }

    /// Executes one generated chunk per environment and records the step.
    pub fn apply(&mut self, policy: &PolicyNet, gen: Vec<Generated>) -> Result<(), EnvError> {
        let chunks: Vec<ActionChunk> = gen.iter().map(|g| g.chunk.clone()).collect();
        let outcomes = self.env.chunk_step(&chunks, self.reset_mode)?;
        for (i, (g, o)) in gen.into_iter().zip(outcomes).enumerate() {
            let bootstrap = (0..o.rewards.len())
                .map(|j| {
                    (o.executed[j] && o.truncated[j] && !o.terminated[j]).then(|| {
                        bootstrap_of(policy, o.terminal_obs[j].as_ref().unwrap_or(&o.next_obs))
                    })
                })
                .collect();
            self.records[i].push(StepRecord {
                obs: std::mem::replace(&mut self.obs[i], o.next_obs.clone()),
                chunk: g.chunk,
                token_logprobs: g.token_logprobs,
                rewards: o.rewards,
                terminated: o.terminated,
                truncated: o.truncated,
                executed: o.executed,
                success: o.success,
                episode_ids: o.episode_ids,
                episode_steps: o.episode_steps,
                bootstrap,
                values_scalar: g.value_scalar,
                values_vector: g.value_vector,
            });
            self.groups[i].extend(o.new_episodes);
        }
        Ok(())
    }

    pub fn finish(self, policy: &PolicyNet) -> StageOutput {
        StageOutput {
            global_ids: self.env.global_ids(),
            tail_bootstrap: self.obs.iter().map(|o| bootstrap_of(policy, o)).collect(),
            records: self.records,
            groups: self.groups,
        }
    }
}

/// Merges stage outputs into a finalized slab ordered by global id.
pub fn assemble(
    outputs: Vec<StageOutput>,
    chunk_len: usize,
    tokens_per_action: usize,
) -> TrajectorySlab {
    let n: usize = outputs.iter().map(|o| o.global_ids.len()).sum();
    let mut slab = TrajectorySlab::new(chunk_len, tokens_per_action, n);
    for out in outputs {
        for (k, g) in out.global_ids.into_iter().enumerate() {
            slab.envs[g] = out.records[k].clone();
            slab.episode_groups[g] = out.groups[k].clone();
            slab.tail_bootstrap[g] = out.tail_bootstrap[k];
        }
    }
    slab.finalize();
    slab
}

/// Reference sequential rollout over the whole batch.
pub fn collect(policy: &PolicyNet, spec: &RolloutSpec) -> Result<TrajectorySlab, EnvError> {
    let ids: Vec<usize> = (0..spec.env_cfg.num_envs).collect();
    let mut stage = Stage::new(spec, &ids)?;
    let mut sampler = Sampler::new(spec.sample_seed, ids.iter().copied(), spec.sample_mode);
    for _ in 0..spec.steps {
        let gen = sampler.generate(policy, &ids, stage.observations());
        stage.apply(policy, gen)?;
    }
    let arch = policy.arch();
    Ok(assemble(
        vec![stage.finish(policy)],
        arch.chunk_len,
        arch.tokens_per_action,
    ))
}

/// Fraction of environments whose first episode reached success at least once.
pub fn success_once_rate(slab: &TrajectorySlab) -> f64 {
    let firsts: Vec<bool> = slab
        .episodes
        .iter()
        .filter(|e| e.start == 0)
        .map(|e| e.success)
        .collect();
    if firsts.is_empty() {
        return 0.0;
    }
    firsts.iter().filter(|&&s| s).count() as f64 / firsts.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Architecture;

    fn spec(auto_reset: bool, ignore: bool) -> RolloutSpec {
        RolloutSpec {
            env: EnvKind::Scripted {
                success_step: 5,
                num_reset_states: 8,
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
            reset_mode: ResetMode::Deferred,
            sample_seed: 2,
            sample_mode: SampleMode::Stochastic,
        }
    }

    fn policy() -> PolicyNet {
        PolicyNet::new(
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
        .unwrap()
    }

    #[test]
    fn partitioned_stages_match_sequential() {
        let p = policy();
        let s = spec(true, false);
        let reference = collect(&p, &s).unwrap();
        let mut stages = vec![
            Stage::new(&s, &[2, 0]).unwrap(),
            Stage::new(&s, &[3, 1]).unwrap(),
        ];
        let mut sampler = Sampler::new(s.sample_seed, 0..4, s.sample_mode);
        for _ in 0..s.steps {
            for st in stages.iter_mut().rev() {
                let ids = st.global_ids();
                let gen = sampler.generate(&p, &ids, st.observations());
                st.apply(&p, gen).unwrap();
            }
        }
        let slab = assemble(stages.into_iter().map(|s| s.finish(&p)).collect(), 4, 2);
        assert_eq!(slab, reference);
    }

    #[test]
    fn partial_reset_counts_episodes() {
        let mut s = spec(true, false);
        s.reset_mode = ResetMode::Immediate;
        let slab = collect(&policy(), &s).unwrap();
        for env in 0..4 {
            assert_eq!(slab.episodes_of(env).filter(|e| e.finished).count(), 8);
        }
        assert_eq!(success_once_rate(&slab), 1.0);
    }

    #[test]
    fn truncation_records_bootstrap() {
        let mut s = spec(false, true);
        s.env_cfg.max_episode_steps = 6;
        let slab = collect(&policy(), &s).unwrap();
        let rec = &slab.envs[0][1];
        assert!(rec.truncated[1] && rec.executed[1]);
        assert!(rec.bootstrap[1].is_some());
        assert!(!rec.executed[2]);
        assert!(rec.bootstrap[2].is_none());
    }
}
