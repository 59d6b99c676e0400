//! Domain types shared by every module: observations, tokenized actions,
//! chunk-level step records and the per-environment trajectory slab.

use serde::{Deserialize, Serialize};

/// Fixed-length real feature vector produced by an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn new(features: Vec<f64>) -> Self {
        debug_assert!(features.iter().all(|x| x.is_finite()));
        Self(features)
    }

    pub fn features(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// One atomic action, encoded as `M` discrete tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenAction(pub Vec<u32>);

impl TokenAction {
    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn is_valid(&self, tokens_per_action: usize, vocab_size: usize) -> bool {
        self.0.len() == tokens_per_action && self.0.iter().all(|&t| (t as usize) < vocab_size)
    }
}

/// `C` atomic actions emitted by a single policy inference.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionChunk(pub Vec<TokenAction>);

impl ActionChunk {
    pub fn actions(&self) -> &[TokenAction] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Tokens in time-major, token-minor order.
    pub fn flat_tokens(&self) -> Vec<u32> {
        self.0.iter().flat_map(|a| a.0.iter().copied()).collect()
    }

    pub fn from_flat(tokens: &[u32], tokens_per_action: usize) -> Self {
        Self(
            tokens
                .chunks(tokens_per_action)
                .map(|t| TokenAction(t.to_vec()))
                .collect(),
        )
    }
}

/// Value estimates of the terminal observation of a truncated episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bootstrap {
    /// Scalar-head value of the terminal observation.
    pub scalar: f64,
    /// First entry of the vector-head output for the terminal observation.
    pub action: f64,
}

/// One policy decision and the `C` atomic environment steps it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub obs: Observation,
    pub chunk: ActionChunk,
    /// `C x M` log-probabilities, action-major.
    pub token_logprobs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub terminated: Vec<bool>,
    pub truncated: Vec<bool>,
    /// `false` for slots where the sub-environment was frozen and the action never executed.
    pub executed: Vec<bool>,
    pub success: Vec<bool>,
    /// Episode the atomic step belongs to (per environment counter).
    pub episode_ids: Vec<u64>,
    /// Zero-based index of the atomic step inside its episode.
    pub episode_steps: Vec<u32>,
    /// Set on the atomic step where an episode was cut by truncation.
    pub bootstrap: Vec<Option<Bootstrap>>,
    pub values_scalar: f64,
    pub values_vector: Vec<f64>,
}

impl StepRecord {
    pub fn chunk_len(&self) -> usize {
        self.rewards.len()
    }
}

/// Identity of a GRPO group: trajectories sharing a task and an initial state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub task_id: u32,
    pub reset_state_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeBoundary {
    pub env_id: usize,
    pub episode_id: u64,
    /// First atomic slot (inclusive) on the environment's time axis.
    pub start: usize,
    /// Last atomic slot (exclusive), frozen slots included.
    pub end: usize,
    /// Number of executed atomic steps.
    pub executed_steps: usize,
    pub success: bool,
    /// One-based step count up to and including the first success.
    pub first_success_step: Option<usize>,
    /// `true` when the episode reached a terminal or truncation signal inside the rollout.
    pub finished: bool,
    pub total_reward: f64,
    pub group_key: Option<GroupKey>,
}

impl EpisodeBoundary {
    pub fn span(&self) -> usize {
        self.end - self.start
    }
}

/// Rollout buffer: per-environment chunk records plus derived episode boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySlab {
    pub chunk_len: usize,
    pub tokens_per_action: usize,
    pub envs: Vec<Vec<StepRecord>>,
    /// Value estimates for the observation following the last record of each env.
    pub tail_bootstrap: Vec<Bootstrap>,
    /// Group key in force at the start of each episode, indexed by `(env, episode_id)`.
    pub episode_groups: Vec<Vec<(u64, GroupKey)>>,
    pub episodes: Vec<EpisodeBoundary>,
}

impl TrajectorySlab {
    pub fn new(chunk_len: usize, tokens_per_action: usize, num_envs: usize) -> Self {
        Self {
            chunk_len,
            tokens_per_action,
            envs: vec![Vec::new(); num_envs],
            tail_bootstrap: vec![
                Bootstrap {
                    scalar: 0.0,
                    action: 0.0
                };
                num_envs
            ],
            episode_groups: vec![Vec::new(); num_envs],
            episodes: Vec::new(),
        }
    }

    pub fn num_envs(&self) -> usize {
        self.envs.len()
    }

    /// Atomic environment frames executed during the rollout.
    pub fn frames(&self) -> usize {
        self.envs
            .iter()
            .flat_map(|e| e.iter())
            .map(|r| r.executed.iter().filter(|&&x| x).count())
            .sum()
    }

    /// Recomputes episode boundaries from per-step episode ids.
    pub fn finalize(&mut self) {
        let mut episodes = Vec::new();
        for (env_id, records) in self.envs.iter().enumerate() {
            let mut current: Option<EpisodeBoundary> = None;
            let mut slot = 0usize;
            for rec in records {
                for j in 0..rec.chunk_len() {
                    let eid = rec.episode_ids[j];
                    if current.as_ref().map(|c| c.episode_id) != Some(eid) {
                        if let Some(done) = current.take() {
                            episodes.push(done);
                        }
                        let group_key = self.episode_groups[env_id]
                            .iter()
                            .find(|(id, _)| *id == eid)
                            .map(|(_, k)| *k);
                        current = Some(EpisodeBoundary {
                            env_id,
                            episode_id: eid,
                            start: slot,
                            end: slot,
                            executed_steps: 0,
                            success: false,
                            first_success_step: None,
                            finished: false,
                            total_reward: 0.0,
                            group_key,
                        });
                    }
                    let ep = current.as_mut().expect("episode open");
                    ep.end = slot + 1;
                    if rec.executed[j] {
                        ep.executed_steps += 1;
                        ep.total_reward += rec.rewards[j];
                        if rec.success[j] && !ep.success {
                            ep.success = true;
                            ep.first_success_step = Some(rec.episode_steps[j] as usize + 1);
                        }
                        if rec.terminated[j] || rec.truncated[j] {
                            ep.finished = true;
                        }
                    }
                    slot += 1;
                }
            }
            if let Some(done) = current.take() {
                episodes.push(done);
            }
        }
        self.episodes = episodes;
    }

    /// Episodes grouped per environment in time order.
    pub fn episodes_of(&self, env_id: usize) -> impl Iterator<Item = &EpisodeBoundary> {
        self.episodes.iter().filter(move |e| e.env_id == env_id)
    }
}
