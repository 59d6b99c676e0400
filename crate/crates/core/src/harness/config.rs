//! Run configuration: YAML loading, dotted overrides, cross-field checks.

use super::HarnessError;
use crate::advantage::{FilterBounds, GaeParams, LengthNorm};
use crate::envsim::{EnvKind, ResetMode, VecEnvConfig};
use crate::granularity::{GranularitySpec, Level};
use crate::optim::PpoParams;
use crate::placement::{Backend, CostModel, OffloadFlags, PlacementPlan, SlotSet};
use crate::policy::{Architecture, SampleMode};
use serde::{Deserialize, Serialize};
use serde_yaml::Value;
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    pub env: EnvSection,
    #[serde(default)]
    pub rollout: RolloutSection,
    #[serde(default)]
    pub actor: ActorSection,
    pub algorithm: AlgorithmSection,
    #[serde(default)]
    pub cluster: ClusterSection,
    #[serde(default)]
    pub cost: CostSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_epochs() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    #[serde(default)]
    pub task: EnvKind,
    pub num_envs: usize,
    pub max_episode_steps: u32,
    #[serde(default)]
    pub auto_reset: bool,
    #[serde(default)]
    pub ignore_terminations: bool,
    #[serde(default)]
    pub use_fixed_reset_state_ids: bool,
    #[serde(default)]
    pub reset_mode: ResetMode,
    #[serde(default)]
    pub enable_offload: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutSection {
    /// Chunk steps per environment per epoch.
    pub steps: usize,
    pub pipeline_stage_num: usize,
    pub enable_offload: bool,
    pub backend: Backend,
    pub sample_mode: SampleMode,
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self {
            steps: 8,
            pipeline_stage_num: 1,
            enable_offload: false,
            backend: Backend::Virtual,
            sample_mode: SampleMode::Stochastic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActorSection {
    pub enable_offload: bool,
    pub chunk_len: usize,
    pub trunk_widths: Vec<usize>,
    pub value_hidden: usize,
}

impl Default for ActorSection {
    fn default() -> Self {
        Self {
            enable_offload: false,
            chunk_len: 4,
            trunk_widths: vec![64, 64],
            value_hidden: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Ppo,
    Grpo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSection {
    pub name: Algo,
    /// Advantage granularity.
    #[serde(default = "action_level")]
    pub reward_type: Level,
    #[serde(default = "action_level")]
    pub logprob_type: Level,
    /// Defaults to `reward_type`.
    #[serde(default)]
    pub value_type: Option<Level>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_group")]
    pub group_size: usize,
    #[serde(default)]
    pub filter_bounds: Option<[f64; 2]>,
    #[serde(default = "default_eps_std")]
    pub eps_std: f64,
    #[serde(default)]
    pub length_norm: LengthNorm,
    #[serde(default = "yes")]
    pub valid_mask: bool,
    #[serde(default)]
    pub ppo: PpoParams,
    /// Success rate that counts as solved.
    #[serde(default = "default_threshold")]
    pub success_threshold: f64,
}

fn action_level() -> Level {
    Level::Action
}
fn default_gamma() -> f64 {
    0.99
}
fn default_lambda() -> f64 {
    0.95
}
fn default_group() -> usize {
    8
}
fn default_eps_std() -> f64 {
    1e-6
}
fn yes() -> bool {
    true
}
fn default_threshold() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentPlacement {
    pub env: SlotSet,
    pub rollout: SlotSet,
    pub actor: SlotSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSection {
    pub num_slots: usize,
    pub component_placement: ComponentPlacement,
}

impl Default for ClusterSection {
    fn default() -> Self {
        let all = SlotSet::range(0, 7);
        Self {
            num_slots: 8,
            component_placement: ComponentPlacement {
                env: all.clone(),
                rollout: all.clone(),
                actor: all,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSection {
    pub preset: String,
    /// Per-field replacements applied on top of the preset.
    pub overrides: Option<CostModel>,
}

impl Default for CostSection {
    fn default() -> Self {
        Self {
            preset: "1to1".into(),
            overrides: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub num_envs: usize,
    pub sample_mode: SampleMode,
    /// End training at the first epoch that reaches the success threshold.
    pub stop_at_threshold: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            num_envs: 64,
            sample_mode: SampleMode::Stochastic,
            stop_at_threshold: false,
        }
    }
}

/// How finished sub-environments are handled during rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    FixedLength,
    PartialReset,
    ValidMask,
}

impl RunConfig {
    pub fn from_yaml(text: &str) -> Result<Self, HarnessError> {
        let v: Value =
            serde_yaml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        Self::from_value(v)
    }

    /// Reads `path` and applies `key.path=value` overrides in order.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self, HarnessError> {
        let mut v = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?;
                serde_yaml::from_str(&text)
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Mapping(Default::default()),
        };
        for s in sets {
            apply_override(&mut v, s)?;
        }
        Self::from_value(v)
    }

    fn from_value(v: Value) -> Result<Self, HarnessError> {
        let cfg: RunConfig = serde_path_to_error::deserialize(v)
            .map_err(|e| HarnessError::Config(format!("{}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical YAML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_yaml().as_bytes()))
    }

    pub fn rollout_mode(&self) -> RolloutMode {
        match (self.env.auto_reset, self.env.ignore_terminations) {
            (_, true) => RolloutMode::FixedLength,
            (true, false) => RolloutMode::PartialReset,
            (false, false) => RolloutMode::ValidMask,
        }
    }

    pub fn granularity(&self) -> GranularitySpec {
        let a = &self.algorithm;
        GranularitySpec::new(a.reward_type, a.logprob_type)
            .with_value_level(a.value_type.unwrap_or(a.reward_type))
    }

    pub fn gae(&self) -> GaeParams {
        GaeParams {
            gamma: self.algorithm.gamma,
            lambda: self.algorithm.lambda,
        }
    }

    pub fn filter_bounds(&self) -> FilterBounds {
        match self.algorithm.filter_bounds {
            Some([lower, upper]) => FilterBounds { lower, upper },
            None => FilterBounds::default(),
        }
    }

    pub fn env_config(&self, seed: u64) -> VecEnvConfig {
        VecEnvConfig {
            num_envs: self.env.num_envs,
            max_episode_steps: self.env.max_episode_steps,
            auto_reset: self.env.auto_reset,
            ignore_terminations: self.env.ignore_terminations,
            use_fixed_reset_state_ids: self.env.use_fixed_reset_state_ids,
            seed,
        }
    }

    pub fn architecture(&self) -> Architecture {
        let model = crate::envsim::AnyEnv::from(&self.env.task);
        use crate::envsim::EnvModel;
        Architecture {
            obs_dim: model.obs_dim(),
            trunk_widths: self.actor.trunk_widths.clone(),
            vocab_size: model.vocab_size(),
            chunk_len: self.actor.chunk_len,
            tokens_per_action: model.tokens_per_action(),
            value_hidden: self.actor.value_hidden,
        }
    }

    pub fn plan(&self) -> Result<PlacementPlan, HarnessError> {
        let cp = &self.cluster.component_placement;
        let plan = PlacementPlan {
            cluster_size: self.cluster.num_slots,
            env: cp.env.clone(),
            rollout: cp.rollout.clone(),
            actor: cp.actor.clone(),
            offload: OffloadFlags {
                env: self.env.enable_offload,
                rollout: self.rollout.enable_offload,
                actor: self.actor.enable_offload,
            },
            pipeline_stage_num: self.rollout.pipeline_stage_num,
        };
        plan.validate()
            .map_err(|e| HarnessError::Config(format!("cluster: {e}")))?;
        Ok(plan)
    }

    pub fn cost(&self) -> Result<CostModel, HarnessError> {
        if let Some(c) = &self.cost.overrides {
            return Ok(c.clone());
        }
        CostModel::preset(&self.cost.preset)
            .map_err(|e| HarnessError::Config(format!("cost.preset: {e}")))
    }

    /// Cross-field checks that serde cannot express.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::Config(m));
        self.env_config(0)
            .validate()
            .map_err(|e| HarnessError::Config(format!("env: {e}")))?;
        self.granularity()
            .validate()
            .map_err(|e| HarnessError::Config(format!("algorithm: {e}")))?;
        self.gae()
            .validate()
            .map_err(|e| HarnessError::Config(format!("algorithm.gamma/lambda: {e}")))?;
        self.filter_bounds()
            .validate()
            .map_err(|e| HarnessError::Config(format!("algorithm.filter_bounds: {e}")))?;
        self.algorithm
            .ppo
            .validate()
            .map_err(|e| HarnessError::Config(format!("algorithm.ppo: {e}")))?;
        if self.actor.chunk_len == 0 {
            return err("actor.chunk_len must be >= 1".into());
        }
        if self.rollout.steps == 0 {
            return err("rollout.steps must be >= 1".into());
        }
        if self.eval.num_envs == 0 {
            return err("eval.num_envs must be >= 1".into());
        }
        let mode = self.rollout_mode();
        match self.algorithm.name {
            Algo::Ppo => {
                if mode == RolloutMode::ValidMask {
                    return err("algorithm.name: PPO needs fixed-length or partial-reset rollouts (set env.auto_reset or env.ignore_terminations)".into());
                }
                let g = self.granularity();
                if g.value_level != g.advantage_level {
                    return err("algorithm.value_type: PPO needs value_type == reward_type".into());
                }
            }
            Algo::Grpo => {
                if mode == RolloutMode::PartialReset {
                    return err("algorithm.name: GRPO needs fixed-length or valid-mask rollouts (env.auto_reset must be false)".into());
                }
                if !self.env.use_fixed_reset_state_ids {
                    return err(
                        "env.use_fixed_reset_state_ids: GRPO groups need fixed reset states".into(),
                    );
                }
                let g = self.algorithm.group_size;
                if g < 2 || !self.env.num_envs.is_multiple_of(g) {
                    return err(format!(
                        "algorithm.group_size: {g} must be >= 2 and divide env.num_envs = {}",
                        self.env.num_envs
                    ));
                }
                let groups = self.env.num_envs / g;
                let model = crate::envsim::AnyEnv::from(&self.env.task);
                use crate::envsim::EnvModel;
                if groups > model.num_reset_states() {
                    return err(format!(
                        "env.task.num_reset_states: {} groups need as many distinct reset states",
                        groups
                    ));
                }
            }
        }
        let plan = self.plan()?;
        crate::placement::stage_partition(&plan, self.env.num_envs)
            .map_err(|e| HarnessError::Config(format!("rollout.pipeline_stage_num: {e}")))?;
        plan.check_memory(&self.cost()?).map_err(|e| {
            HarnessError::Config(format!("{{env,rollout,actor}}.enable_offload: {e}"))
        })?;
        Ok(())
    }
}

/// Sets `a.b.c` in a YAML tree, creating maps on the way. The value is
/// parsed as YAML, so `1`, `true`, `[0, 1]` and `"0-3"` all work.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), HarnessError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("--set {assignment:?}: expected key=value")))?;
    let value: Value =
        serde_yaml::from_str(raw).map_err(|e| HarnessError::Config(format!("--set {key}: {e}")))?;
    let mut node = root;
    for part in key.split('.') {
        if part.is_empty() {
            return Err(HarnessError::Config(format!(
                "--set {key}: empty path segment"
            )));
        }
        if !node.is_mapping() {
            *node = Value::Mapping(Default::default());
        }
        let map = node.as_mapping_mut().expect("mapping");
        node = map
            .entry(Value::String(part.to_string()))
            .or_insert(Value::Null);
    }
    *node = value;
    Ok(())
}
