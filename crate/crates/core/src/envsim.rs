//! Vectorized toy environments with reset, atomic `step`, chunked
//! `chunk_step`, auto-reset, termination-ignoring and fixed reset-state ids.

use crate::types::{ActionChunk, Observation, TokenAction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod dump;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("reset state id {id} out of range (table size {size})")]
    BadResetId { id: u32, size: usize },
    #[error("env index {0} out of range")]
    BadEnvIndex(usize),
    #[error("fixed reset state ids are enabled but none were provided")]
    MissingResetIds,
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("invalid action {0:?}")]
    InvalidAction(TokenAction),
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VecEnvConfig {
    pub num_envs: usize,
    /// Counted in atomic steps, not chunks.
    pub max_episode_steps: u32,
    #[serde(default)]
    pub auto_reset: bool,
    #[serde(default)]
    pub ignore_terminations: bool,
    #[serde(default)]
    pub use_fixed_reset_state_ids: bool,
    #[serde(default)]
    pub seed: u64,
}

impl VecEnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.num_envs == 0 {
            return Err(EnvError::Config("num_envs must be >= 1".into()));
        }
        if self.max_episode_steps == 0 {
            return Err(EnvError::Config("max_episode_steps must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ResetStateId(pub u32);

/// When a sub-environment that finishes inside a chunk gets reset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    /// Reset as soon as the episode ends and run the rest of the chunk in the new episode.
    Immediate,
    /// Freeze the finished sub-environment and reset once the chunk is done.
    #[default]
    Deferred,
}

/// Result of one atomic transition inside a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub reward: f64,
    pub success: bool,
}

/// Single-environment dynamics.
pub trait EnvModel: Clone + Send + Sync + 'static {
    type State: Clone + Send + std::fmt::Debug;

    fn obs_dim(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn tokens_per_action(&self) -> usize;
    fn num_reset_states(&self) -> usize;
    /// Deterministic initial state for a table entry.
    fn initial_state(&self, id: ResetStateId, table_seed: u64) -> Self::State;
    fn random_state(&self, rng: &mut ChaCha8Rng) -> Self::State;
    fn task_id(&self, state: &Self::State) -> u32;
    fn observe(&self, state: &Self::State) -> Observation;
    fn transition(&self, state: &mut Self::State, action: &TokenAction) -> Transition;
}

/// Grid reaching task. Each action carries an axis token (0 = x, 1 = y,
/// 2 = stay) and a move token (0 = -1, 1 = 0, 2 = +1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReach {
    pub grid_size: i32,
    pub num_reset_states: usize,
    /// Adds a distance-shaping term to the sparse success reward.
    pub dense_reward: bool,
}

impl Default for ToyReach {
    fn default() -> Self {
        Self {
            grid_size: 5,
            num_reset_states: 64,
            dense_reward: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReachState {
    pub agent: (i32, i32),
    pub target: (i32, i32),
}

pub const AXIS_X: u32 = 0;
pub const AXIS_Y: u32 = 1;
pub const AXIS_NONE: u32 = 2;
pub const MOVE_NEG: u32 = 0;
pub const MOVE_ZERO: u32 = 1;
pub const MOVE_POS: u32 = 2;

impl ToyReach {
    fn layout(&self, rng: &mut ChaCha8Rng) -> ReachState {
        let g = self.grid_size;
        let agent = (rng.gen_range(0..g), rng.gen_range(0..g));
        loop {
            let target = (rng.gen_range(0..g), rng.gen_range(0..g));
            if target != agent {
                return ReachState { agent, target };
            }
        }
    }

    fn distance(s: &ReachState) -> i32 {
        (s.agent.0 - s.target.0).abs() + (s.agent.1 - s.target.1).abs()
    }

    /// Action that moves one cell toward the target.
    pub fn greedy_action(state: &ReachState) -> TokenAction {
        let dx = state.target.0 - state.agent.0;
        let dy = state.target.1 - state.agent.1;
        let mv = |d: i32| if d > 0 { MOVE_POS } else { MOVE_NEG };
        if dx != 0 {
            TokenAction(vec![AXIS_X, mv(dx)])
        } else if dy != 0 {
            TokenAction(vec![AXIS_Y, mv(dy)])
        } else {
            TokenAction(vec![AXIS_NONE, MOVE_ZERO])
        }
    }
}

impl EnvModel for ToyReach {
    type State = ReachState;

    fn obs_dim(&self) -> usize {
        4
    }
    fn vocab_size(&self) -> usize {
        3
    }
    fn tokens_per_action(&self) -> usize {
        2
    }
    fn num_reset_states(&self) -> usize {
        self.num_reset_states
    }

    fn initial_state(&self, id: ResetStateId, table_seed: u64) -> ReachState {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(table_seed ^ 0x7461_626c_6500, id.0 as u64));
        self.layout(&mut rng)
    }

    fn random_state(&self, rng: &mut ChaCha8Rng) -> ReachState {
        self.layout(rng)
    }

    fn task_id(&self, _state: &ReachState) -> u32 {
        0
    }

    fn observe(&self, s: &ReachState) -> Observation {
        let g = self.grid_size as f64;
        Observation::new(vec![
            (s.target.0 - s.agent.0) as f64 / g,
            (s.target.1 - s.agent.1) as f64 / g,
            s.agent.0 as f64 / g,
            s.agent.1 as f64 / g,
        ])
    }

    fn transition(&self, s: &mut ReachState, action: &TokenAction) -> Transition {
        let before = Self::distance(s);
        let delta = match action.0[1] {
            MOVE_NEG => -1,
            MOVE_POS => 1,
            _ => 0,
        };
        let hi = self.grid_size - 1;
        match action.0[0] {
            AXIS_X => s.agent.0 = (s.agent.0 + delta).clamp(0, hi),
            AXIS_Y => s.agent.1 = (s.agent.1 + delta).clamp(0, hi),
            _ => {}
        }
        let success = s.agent == s.target;
        let mut reward = if success { 1.0 } else { 0.0 };
        if self.dense_reward {
            reward += 0.1 * (before - Self::distance(s)) as f64;
        }
        Transition { reward, success }
    }
}

/// Environment that reports success exactly at atomic step `success_step`
/// of every episode, whatever the actions. Used to pin episode accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedSuccess {
    pub success_step: u32,
    pub num_reset_states: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedState {
    pub counter: u32,
    pub layout: u32,
}

impl EnvModel for ScriptedSuccess {
    type State = ScriptedState;

    fn obs_dim(&self) -> usize {
        2
    }
    fn vocab_size(&self) -> usize {
        3
    }
    fn tokens_per_action(&self) -> usize {
        2
    }
    fn num_reset_states(&self) -> usize {
        self.num_reset_states
    }
    fn initial_state(&self, id: ResetStateId, _table_seed: u64) -> ScriptedState {
        ScriptedState {
            counter: 0,
            layout: id.0,
        }
    }
    fn random_state(&self, rng: &mut ChaCha8Rng) -> ScriptedState {
        ScriptedState {
            counter: 0,
            layout: rng.gen_range(0..self.num_reset_states.max(1) as u32),
        }
    }
    fn task_id(&self, _state: &ScriptedState) -> u32 {
        0
    }
    fn observe(&self, s: &ScriptedState) -> Observation {
        Observation::new(vec![
            s.counter as f64 / self.success_step.max(1) as f64,
            s.layout as f64 / self.num_reset_states.max(1) as f64,
        ])
    }
    fn transition(&self, s: &mut ScriptedState, _action: &TokenAction) -> Transition {
        s.counter += 1;
        let success = s.counter == self.success_step;
        Transition {
            reward: if success { 1.0 } else { 0.0 },
            success,
        }
    }
}

/// Environment selection for configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvKind {
    ToyReach {
        #[serde(default = "default_grid")]
        grid_size: i32,
        #[serde(default = "default_reset_states")]
        num_reset_states: usize,
        #[serde(default)]
        dense_reward: bool,
    },
    Scripted {
        success_step: u32,
        #[serde(default = "default_reset_states")]
        num_reset_states: usize,
    },
}

fn default_grid() -> i32 {
    5
}
fn default_reset_states() -> usize {
    64
}

impl Default for EnvKind {
    fn default() -> Self {
        EnvKind::ToyReach {
            grid_size: 5,
            num_reset_states: 64,
            dense_reward: false,
        }
    }
}

/// Type-erased model built from an [`EnvKind`].
#[derive(Debug, Clone, PartialEq)]
pub enum AnyEnv {
    Reach(ToyReach),
    Scripted(ScriptedSuccess),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnyState {
    Reach(ReachState),
    Scripted(ScriptedState),
}

impl From<&EnvKind> for AnyEnv {
    fn from(kind: &EnvKind) -> Self {
        match *kind {
            EnvKind::ToyReach {
                grid_size,
                num_reset_states,
                dense_reward,
            } => AnyEnv::Reach(ToyReach {
                grid_size,
                num_reset_states,
                dense_reward,
            }),
            EnvKind::Scripted {
                success_step,
                num_reset_states,
            } => AnyEnv::Scripted(ScriptedSuccess {
                success_step,
                num_reset_states,
            }),
        }
    }
}

macro_rules! delegate {
    ($self:ident, $m:ident $(, $arg:expr)*) => {
        match $self {
            AnyEnv::Reach(e) => e.$m($($arg),*),
            AnyEnv::Scripted(e) => e.$m($($arg),*),
        }
    };
}

impl EnvModel for AnyEnv {
    type State = AnyState;

    fn obs_dim(&self) -> usize {
        delegate!(self, obs_dim)
    }
    fn vocab_size(&self) -> usize {
        delegate!(self, vocab_size)
    }
    fn tokens_per_action(&self) -> usize {
        delegate!(self, tokens_per_action)
    }
    fn num_reset_states(&self) -> usize {
        delegate!(self, num_reset_states)
    }
    fn initial_state(&self, id: ResetStateId, table_seed: u64) -> AnyState {
        match self {
            AnyEnv::Reach(e) => AnyState::Reach(e.initial_state(id, table_seed)),
            AnyEnv::Scripted(e) => AnyState::Scripted(e.initial_state(id, table_seed)),
        }
    }
    fn random_state(&self, rng: &mut ChaCha8Rng) -> AnyState {
        match self {
            AnyEnv::Reach(e) => AnyState::Reach(e.random_state(rng)),
            AnyEnv::Scripted(e) => AnyState::Scripted(e.random_state(rng)),
        }
    }
    fn task_id(&self, state: &AnyState) -> u32 {
        match (self, state) {
            (AnyEnv::Reach(e), AnyState::Reach(s)) => e.task_id(s),
            (AnyEnv::Scripted(e), AnyState::Scripted(s)) => e.task_id(s),
            _ => unreachable!("state does not belong to this model"),
        }
    }
    fn observe(&self, state: &AnyState) -> Observation {
        match (self, state) {
            (AnyEnv::Reach(e), AnyState::Reach(s)) => e.observe(s),
            (AnyEnv::Scripted(e), AnyState::Scripted(s)) => e.observe(s),
            _ => unreachable!("state does not belong to this model"),
        }
    }
    fn transition(&self, state: &mut AnyState, action: &TokenAction) -> Transition {
        match (self, state) {
            (AnyEnv::Reach(e), AnyState::Reach(s)) => e.transition(s, action),
            (AnyEnv::Scripted(e), AnyState::Scripted(s)) => e.transition(s, action),
            _ => unreachable!("state does not belong to this model"),
        }
    }
}

/// SplitMix64 finalizer over `(a, b)`.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_add(b.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
struct SubEnv<S> {
    global_id: usize,
    state: Option<S>,
    rng: ChaCha8Rng,
    steps: u32,
    /// Incremented on every reset; `u64::MAX` before the first one.
    episode_id: u64,
    finished: bool,
    last_terminated: bool,
    last_truncated: bool,
    reset_state_id: Option<ResetStateId>,
}

/// Per-environment result of one atomic step.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomicOutcome {
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub executed: bool,
    pub success: bool,
    pub episode_id: u64,
    pub episode_step: u32,
}

impl AtomicOutcome {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepInfo {
    pub success: bool,
    pub executed: bool,
    pub episode_id: u64,
    pub episode_step: u32,
    /// Observation before an automatic reset.
    pub terminal_obs: Option<Observation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Vec<Observation>,
    pub reward: Vec<f64>,
    pub terminated: Vec<bool>,
    pub truncated: Vec<bool>,
    pub info: Vec<StepInfo>,
}

/// `C` atomic outcomes for one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkOutcome {
    pub rewards: Vec<f64>,
    pub terminated: Vec<bool>,
    pub truncated: Vec<bool>,
    pub executed: Vec<bool>,
    pub success: Vec<bool>,
    pub episode_ids: Vec<u64>,
    pub episode_steps: Vec<u32>,
    /// Observation at the end of an episode that was reset, indexed by the atomic slot it ended on.
    pub terminal_obs: Vec<Option<Observation>>,
    pub next_obs: Observation,
    /// Episodes started by resets during this chunk, with their group keys.
    pub new_episodes: Vec<(u64, crate::types::GroupKey)>,
}

/// A batch of independent sub-environments sharing one model and config.
///
/// Each sub-environment owns its RNG, seeded from `(seed, global id)`, so a
/// partition of the batch evolves exactly like the same envs inside the full
/// batch.
#[derive(Debug, Clone)]
pub struct VecEnv<E: EnvModel> {
    cfg: VecEnvConfig,
    model: E,
    subs: Vec<SubEnv<E::State>>,
}

impl<E: EnvModel> VecEnv<E> {
    pub fn new(cfg: VecEnvConfig, model: E) -> Result<Self, EnvError> {
        let ids: Vec<usize> = (0..cfg.num_envs).collect();
        Self::partition(cfg, model, &ids)
    }

    /// Builds a sub-batch holding the listed global environment ids.
    pub fn partition(cfg: VecEnvConfig, model: E, global_ids: &[usize]) -> Result<Self, EnvError> {
        cfg.validate()?;
        let subs = global_ids
            .iter()
            .map(|&gid| SubEnv {
                global_id: gid,
                state: None,
                rng: ChaCha8Rng::seed_from_u64(mix(cfg.seed, gid as u64)),
                steps: 0,
                episode_id: u64::MAX,
                finished: false,
                last_terminated: false,
                last_truncated: false,
                reset_state_id: None,
            })
            .collect();
        Ok(Self { cfg, model, subs })
    }

    pub fn config(&self) -> &VecEnvConfig {
        &self.cfg
    }

    pub fn model(&self) -> &E {
        &self.model
    }

    pub fn len(&self) -> usize {
        self.subs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subs.is_empty()
    }

    pub fn global_ids(&self) -> Vec<usize> {
        self.subs.iter().map(|s| s.global_id).collect()
    }

    pub fn group_key(&self, idx: usize) -> crate::types::GroupKey {
        let sub = &self.subs[idx];
        crate::types::GroupKey {
            task_id: sub
                .state
                .as_ref()
                .map(|s| self.model.task_id(s))
                .unwrap_or(0),
            reset_state_id: sub.reset_state_id.map(|r| r.0).unwrap_or(u32::MAX),
        }
    }

    pub fn episode_id(&self, idx: usize) -> u64 {
        self.subs[idx].episode_id
    }

    pub fn observe(&self, idx: usize) -> Observation {
        let sub = &self.subs[idx];
        self.model
            .observe(sub.state.as_ref().expect("environment was never reset"))
    }

    /// Resets the listed local indices (all when `env_ids` is `None`).
    pub fn reset(
        &mut self,
        env_ids: Option<&[usize]>,
        reset_state_ids: Option<&[ResetStateId]>,
    ) -> Result<Vec<Observation>, EnvError> {
        let all: Vec<usize> = (0..self.subs.len()).collect();
        let ids = env_ids.unwrap_or(&all);
        if let Some(r) = reset_state_ids {
            if r.len() != ids.len() {
                return Err(EnvError::ActionCount {
                    expected: ids.len(),
                    got: r.len(),
                });
            }
            let size = self.model.num_reset_states();
            if let Some(bad) = r.iter().find(|x| x.0 as usize >= size) {
                return Err(EnvError::BadResetId { id: bad.0, size });
            }
        } else if self.cfg.use_fixed_reset_state_ids {
            return Err(EnvError::MissingResetIds);
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.subs.len()) {
            return Err(EnvError::BadEnvIndex(bad));
        }
        let mut out = Vec::with_capacity(ids.len());
        for (k, &i) in ids.iter().enumerate() {
            let rid = reset_state_ids.map(|r| r[k]);
            self.reset_one(i, rid);
            out.push(self.observe(i));
        }
        Ok(out)
    }

    fn reset_one(&mut self, i: usize, rid: Option<ResetStateId>) {
        let seed = self.cfg.seed;
        let model = &self.model;
        let sub = &mut self.subs[i];
        let rid = rid.or(if self.cfg.use_fixed_reset_state_ids {
            sub.reset_state_id
        } else {
            None
        });
        sub.state = Some(match rid {
            Some(r) => model.initial_state(r, seed),
            None => model.random_state(&mut sub.rng),
        });
        sub.reset_state_id = rid;
        sub.steps = 0;
        sub.episode_id = sub.episode_id.wrapping_add(1);
        sub.finished = false;
        sub.last_terminated = false;
        sub.last_truncated = false;
    }

    fn advance(&mut self, i: usize, action: &TokenAction) -> AtomicOutcome {
        let max_steps = self.cfg.max_episode_steps;
        let ignore = self.cfg.ignore_terminations;
        let model = &self.model;
        let sub = &mut self.subs[i];
        if sub.finished {
            return AtomicOutcome {
                reward: 0.0,
                terminated: sub.last_terminated,
                truncated: sub.last_truncated,
                executed: false,
                success: false,
                episode_id: sub.episode_id,
                episode_step: sub.steps.saturating_sub(1),
            };
        }
        let state = sub.state.as_mut().expect("environment was never reset");
        let tr = model.transition(state, action);
        sub.steps += 1;
        let terminated = tr.success && !ignore;
        let truncated = sub.steps >= max_steps;
        if terminated || truncated {
            sub.finished = true;
            sub.last_terminated = terminated;
            sub.last_truncated = truncated;
        }
        AtomicOutcome {
            reward: tr.reward,
            terminated,
            truncated,
            executed: true,
            success: tr.success,
            episode_id: sub.episode_id,
            episode_step: sub.steps - 1,
        }
    }

    fn check_actions(&self, actions: &[TokenAction]) -> Result<(), EnvError> {
        if actions.len() != self.subs.len() {
            return Err(EnvError::ActionCount {
                expected: self.subs.len(),
                got: actions.len(),
            });
        }
        let (m, v) = (self.model.tokens_per_action(), self.model.vocab_size());
        if let Some(bad) = actions.iter().find(|a| !a.is_valid(m, v)) {
            return Err(EnvError::InvalidAction(bad.clone()));
        }
        Ok(())
    }

    /// One atomic step for every sub-environment.
    pub fn step(&mut self, actions: &[TokenAction]) -> Result<StepResult, EnvError> {
        self.check_actions(actions)?;
        let n = self.subs.len();
        let mut res = StepResult {
            obs: Vec::with_capacity(n),
            reward: Vec::with_capacity(n),
            terminated: Vec::with_capacity(n),
            truncated: Vec::with_capacity(n),
            info: Vec::with_capacity(n),
        };
        for (i, action) in actions.iter().enumerate() {
            let out = self.advance(i, action);
            let mut info = StepInfo {
                success: out.success,
                executed: out.executed,
                episode_id: out.episode_id,
                episode_step: out.episode_step,
                terminal_obs: None,
            };
            if self.cfg.auto_reset && out.executed && out.done() {
                info.terminal_obs = Some(self.observe(i));
                self.reset_one(i, None);
            }
            res.obs.push(self.observe(i));
            res.reward.push(out.reward);
            res.terminated.push(out.terminated);
            res.truncated.push(out.truncated);
            res.info.push(info);
        }
        Ok(res)
    }

    /// Executes one action chunk per sub-environment.
    ///
    /// Resets only happen when `auto_reset` is enabled; `mode` picks whether
    /// they happen mid-chunk or after the chunk. A sub-environment that is not
    /// reset stays frozen: later actions are not executed and earn nothing.
    pub fn chunk_step(
        &mut self,
        chunks: &[ActionChunk],
        mode: ResetMode,
    ) -> Result<Vec<ChunkOutcome>, EnvError> {
        if chunks.len() != self.subs.len() {
            return Err(EnvError::ActionCount {
                expected: self.subs.len(),
                got: chunks.len(),
            });
        }
        for c in chunks {
            self.check_actions_len(c)?;
        }
        let mut out = Vec::with_capacity(chunks.len());
        for (i, chunk) in chunks.iter().enumerate() {
            let c = chunk.len();
            let mut o = ChunkOutcome {
                rewards: Vec::with_capacity(c),
                terminated: Vec::with_capacity(c),
                truncated: Vec::with_capacity(c),
                executed: Vec::with_capacity(c),
                success: Vec::with_capacity(c),
                episode_ids: Vec::with_capacity(c),
                episode_steps: Vec::with_capacity(c),
                terminal_obs: vec![None; c],
                next_obs: Observation(Vec::new()),
                new_episodes: Vec::new(),
            };
            let mut pending_reset: Option<usize> = None;
            for (j, action) in chunk.actions().iter().enumerate() {
                let a = self.advance(i, action);
                if self.cfg.auto_reset && a.executed && a.done() {
                    match mode {
                        ResetMode::Immediate => {
                            o.terminal_obs[j] = Some(self.observe(i));
                            self.reset_one(i, None);
                            o.new_episodes
                                .push((self.subs[i].episode_id, self.group_key(i)));
                        }
                        ResetMode::Deferred => pending_reset = Some(j),
                    }
                }
                o.rewards.push(a.reward);
                o.terminated.push(a.terminated);
                o.truncated.push(a.truncated);
                o.executed.push(a.executed);
                o.success.push(a.success);
                o.episode_ids.push(a.episode_id);
                o.episode_steps.push(a.episode_step);
            }
            if let Some(j) = pending_reset {
                o.terminal_obs[j] = Some(self.observe(i));
                self.reset_one(i, None);
                o.new_episodes
                    .push((self.subs[i].episode_id, self.group_key(i)));
            }
            o.next_obs = self.observe(i);
            out.push(o);
        }
        Ok(out)
    }

    fn check_actions_len(&self, chunk: &ActionChunk) -> Result<(), EnvError> {
        let (m, v) = (self.model.tokens_per_action(), self.model.vocab_size());
        match chunk.actions().iter().find(|a| !a.is_valid(m, v)) {
            Some(bad) => Err(EnvError::InvalidAction(bad.clone())),
            None => Ok(()),
        }
    }
}
