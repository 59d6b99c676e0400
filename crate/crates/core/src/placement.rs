//! Component placement over resource slots and the epoch timeline.
//!
//! A [`PlacementPlan`] assigns the simulator (`env`), generation (`rollout`)
//! and training (`actor`) components to sets of slots. The mode is derived
//! from the overlap pattern. Rollouts run either on a deterministic virtual
//! clock driven by a [`CostModel`] or on real worker threads; both produce
//! the same trajectories, and both record an [`EpochTrace`].

use crate::envsim::EnvError;
use crate::policy::PolicyNet;
use crate::rollout::RolloutSpec;
use crate::types::TrajectorySlab;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use thiserror::Error;

mod real;
mod schedule;

pub use schedule::{schedule_rollout, ScheduledActivity};

#[derive(Debug, Error)]
pub enum PlacementError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("slot {slot} needs {used} memory but holds {capacity}")]
    MemoryOverflow {
        slot: usize,
        used: f64,
        capacity: f64,
    },
    #[error("trace has no frames or no time")]
    EmptyTrace,
    #[error("unknown cost preset {0:?}")]
    UnknownPreset(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("worker failed: {0}")]
    Worker(String),
}

/// Sorted set of slot ids, written as `"0-3"`, `"0-1,6"` or `"5"`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SlotSet(Vec<usize>);

impl SlotSet {
    pub fn range(start: usize, end_inclusive: usize) -> Self {
        Self((start..=end_inclusive).collect())
    }

    pub fn slots(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn intersects(&self, other: &SlotSet) -> bool {
        self.0.iter().any(|s| other.0.binary_search(s).is_ok())
    }
}

impl FromStr for SlotSet {
    type Err = PlacementError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PlacementError::InvalidPlan(format!("cannot parse slot range {s:?}"));
        let mut set = BTreeSet::new();
        for part in s.split(',').map(str::trim) {
            let (a, b) = match part.split_once('-') {
                Some((a, b)) => (a.trim(), b.trim()),
                None => (part, part),
            };
            let a: usize = a.parse().map_err(|_| bad())?;
            let b: usize = b.parse().map_err(|_| bad())?;
            if a > b {
                return Err(bad());
            }
            set.extend(a..=b);
        }
        Ok(Self(set.into_iter().collect()))
    }
}

impl TryFrom<String> for SlotSet {
    type Error = PlacementError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<SlotSet> for String {
    fn from(s: SlotSet) -> String {
        s.to_string()
    }
}

impl fmt::Display for SlotSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        let mut i = 0;
        while i < self.0.len() {
            let mut j = i;
            while j + 1 < self.0.len() && self.0[j + 1] == self.0[j] + 1 {
                j += 1;
            }
            parts.push(if i == j {
                self.0[i].to_string()
            } else {
                format!("{}-{}", self.0[i], self.0[j])
            });
            i = j + 1;
        }
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Env,
    Rollout,
    Actor,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Env, Component::Rollout, Component::Actor];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Colocated,
    Disaggregated,
    Hybrid,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Colocated => "colocated",
            Mode::Disaggregated => "disaggregated",
            Mode::Hybrid => "hybrid",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OffloadFlags {
    pub env: bool,
    pub rollout: bool,
    pub actor: bool,
}

impl OffloadFlags {
    pub fn all(on: bool) -> Self {
        Self {
            env: on,
            rollout: on,
            actor: on,
        }
    }

    pub fn get(&self, c: Component) -> bool {
        match c {
            Component::Env => self.env,
            Component::Rollout => self.rollout,
            Component::Actor => self.actor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementPlan {
    pub cluster_size: usize,
    pub env: SlotSet,
    pub rollout: SlotSet,
    pub actor: SlotSet,
    #[serde(default)]
    pub offload: OffloadFlags,
    #[serde(default = "one")]
    pub pipeline_stage_num: usize,
}

fn one() -> usize {
    1
}

impl PlacementPlan {
    pub fn new(
        cluster_size: usize,
        env: &str,
        rollout: &str,
        actor: &str,
    ) -> Result<Self, PlacementError> {
        let plan = Self {
            cluster_size,
            env: env.parse()?,
            rollout: rollout.parse()?,
            actor: actor.parse()?,
            offload: OffloadFlags::default(),
            pipeline_stage_num: 1,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn with_offload(mut self, offload: OffloadFlags) -> Self {
        self.offload = offload;
        self
    }

    pub fn with_stages(mut self, k: usize) -> Self {
        self.pipeline_stage_num = k;
        self
    }

    pub fn slots(&self, c: Component) -> &SlotSet {
        match c {
            Component::Env => &self.env,
            Component::Rollout => &self.rollout,
            Component::Actor => &self.actor,
        }
    }

    pub fn validate(&self) -> Result<(), PlacementError> {
        if self.pipeline_stage_num == 0 {
            return Err(PlacementError::InvalidPlan(
                "pipeline_stage_num must be >= 1".into(),
            ));
        }
        for c in Component::ALL {
            let s = self.slots(c);
            if s.is_empty() {
                return Err(PlacementError::InvalidPlan(format!("{c:?} has no slots")));
            }
            if let Some(&bad) = s.slots().iter().find(|&&x| x >= self.cluster_size) {
                return Err(PlacementError::InvalidPlan(format!(
                    "{c:?} slot {bad} outside cluster of {}",
                    self.cluster_size
                )));
            }
        }
        Ok(())
    }
}

impl PlacementPlan {
    /// Static residency check of both phases, without running anything.
    pub fn check_memory(&self, cost: &CostModel) -> Result<(), PlacementError> {
        for phase in [Phase::Rollout, Phase::Training] {
            for slot in 0..self.cluster_size {
                let used: f64 = Component::ALL
                    .into_iter()
                    .filter(|&c| phase.needs(c) || !self.offload.get(c))
                    .filter(|&c| self.slots(c).slots().contains(&slot))
                    .map(|c| cost.memory(c))
                    .sum();
                if used > cost.slot_capacity + 1e-12 {
                    return Err(PlacementError::MemoryOverflow {
                        slot,
                        used,
                        capacity: cost.slot_capacity,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Classifies a plan by how its slot sets overlap.
pub fn derive_mode(plan: &PlacementPlan) -> Result<Mode, PlacementError> {
    plan.validate()?;
    let (e, r, a) = (&plan.env, &plan.rollout, &plan.actor);
    Ok(if e == r && r == a {
        Mode::Colocated
    } else if !e.intersects(r) && !e.intersects(a) && !r.intersects(a) {
        Mode::Disaggregated
    } else {
        Mode::Hybrid
    })
}

/// Virtual durations and memory footprints.
///
/// Generation and simulation calls cost a fixed part plus a part linear in
/// the number of environments served, divided by the slots of the component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    /// Simulator time for one chunk step of one environment.
    pub t_sim_step: f64,
    /// Fixed launch cost of one simulator call.
    pub t_sim_call: f64,
    /// Generation time for one environment.
    pub t_gen: f64,
    pub t_gen_call: f64,
    pub t_train_per_frame: f64,
    pub t_offload: f64,
    pub t_onload: f64,
    /// Fixed cost of saving or restoring simulator state.
    pub t_env_state: f64,
    pub t_env_state_per_env: f64,
    /// Latency of one generation/simulation exchange across slot sets.
    pub t_comm: f64,
    /// Exchange latency per slot when both components share their slots.
    pub t_comm_colocated_per_slot: f64,
    pub mem_env: f64,
    pub mem_rollout: f64,
    pub mem_actor: f64,
    pub slot_capacity: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self::one_to_one()
    }
}

impl CostModel {
    /// Simulation and generation equally expensive, costs linear in batch size.
    pub fn one_to_one() -> Self {
        Self {
            t_sim_step: 0.125,
            t_sim_call: 0.0,
            t_gen: 0.125,
            t_gen_call: 0.0,
            t_train_per_frame: 0.125,
            t_offload: 10.0,
            t_onload: 10.0,
            t_env_state: 10.0,
            t_env_state_per_env: 0.0,
            t_comm: 0.05,
            t_comm_colocated_per_slot: 0.025,
            mem_env: 0.5,
            mem_rollout: 0.5,
            mem_actor: 0.8,
            slot_capacity: 1.0,
        }
    }

    /// Simulation fifteen times slower than generation, with a fixed
    /// per-call simulator cost that penalizes splitting the batch.
    pub fn fifteen_to_one() -> Self {
        Self {
            t_sim_step: 1.875,
            t_sim_call: 4.0,
            t_gen: 0.125,
            ..Self::one_to_one()
        }
    }

    pub fn preset(name: &str) -> Result<Self, PlacementError> {
        match name {
            "1to1" => Ok(Self::one_to_one()),
            "15to1" => Ok(Self::fifteen_to_one()),
            other => Err(PlacementError::UnknownPreset(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), PlacementError> {
        let d = [
            self.t_sim_step,
            self.t_sim_call,
            self.t_gen,
            self.t_gen_call,
            self.t_train_per_frame,
            self.t_offload,
            self.t_onload,
            self.t_env_state,
            self.t_env_state_per_env,
            self.t_comm,
            self.t_comm_colocated_per_slot,
        ];
        if d.iter().any(|x| !(*x >= 0.0)) {
            return Err(PlacementError::InvalidPlan("durations must be >= 0".into()));
        }
        Ok(())
    }

    pub fn memory(&self, c: Component) -> f64 {
        match c {
            Component::Env => self.mem_env,
            Component::Rollout => self.mem_rollout,
            Component::Actor => self.mem_actor,
        }
    }

    /// Every duration multiplied by `f`.
    pub fn scaled(&self, f: f64) -> Self {
        Self {
            t_sim_step: self.t_sim_step * f,
            t_sim_call: self.t_sim_call * f,
            t_gen: self.t_gen * f,
            t_gen_call: self.t_gen_call * f,
            t_train_per_frame: self.t_train_per_frame * f,
            t_offload: self.t_offload * f,
            t_onload: self.t_onload * f,
            t_env_state: self.t_env_state * f,
            t_env_state_per_env: self.t_env_state_per_env * f,
            t_comm: self.t_comm * f,
            t_comm_colocated_per_slot: self.t_comm_colocated_per_slot * f,
            ..self.clone()
        }
    }

    pub(crate) fn gen_time(&self, envs: usize, slots: usize) -> f64 {
        self.t_gen_call + self.t_gen * envs as f64 / slots as f64
    }

    pub(crate) fn sim_time(&self, envs: usize, slots: usize) -> f64 {
        self.t_sim_call + self.t_sim_step * envs as f64 / slots as f64
    }

    /// Latency of one message between generation and simulation.
    pub(crate) fn exchange_latency(&self, plan: &PlacementPlan) -> f64 {
        if plan.env == plan.rollout {
            self.t_comm_colocated_per_slot * plan.env.len() as f64
        } else {
            self.t_comm
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activity {
    Generate,
    Simulate,
    Offload,
    Onload,
    Train,
}

/// One busy interval on one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub slot: usize,
    pub component: Component,
    pub activity: Activity,
    pub stage: Option<usize>,
    pub step: Option<usize>,
    pub t_start: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Rollout,
    Training,
}

impl Phase {
    fn needs(self, c: Component) -> bool {
        match self {
            Phase::Rollout => c != Component::Actor,
            Phase::Training => c == Component::Actor,
        }
    }
}

/// Timeline of one epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochTrace {
    pub intervals: Vec<Interval>,
    pub frames: usize,
    /// Time when the rollout phase ended.
    pub rollout_end: f64,
    /// Components resident after the last phase.
    pub resident: BTreeSet<Component>,
    /// Highest per-slot memory use seen.
    pub peak_memory: f64,
}

impl EpochTrace {
    /// Steady-state residency at the start of an epoch: what training left
    /// behind plus everything that never offloads.
    pub fn steady_state(plan: &PlacementPlan) -> Self {
        Self {
            resident: Component::ALL
                .into_iter()
                .filter(|&c| Phase::Training.needs(c) || !plan.offload.get(c))
                .collect(),
            ..Self::default()
        }
    }

    pub fn makespan(&self) -> f64 {
        self.intervals.iter().map(|i| i.t_end).fold(0.0, f64::max)
    }

    fn slot_free(&self, slot: usize) -> f64 {
        self.intervals
            .iter()
            .filter(|i| i.slot == slot)
            .map(|i| i.t_end)
            .fold(0.0, f64::max)
    }

    /// Busy time per activity kind, summed over slots.
    pub fn busy(&self, activity: Activity) -> f64 {
        self.intervals
            .iter()
            .filter(|i| i.activity == activity)
            .map(|i| i.t_end - i.t_start)
            .sum()
    }

    pub fn count(&self, component: Component, activity: Activity) -> usize {
        let mut seen = BTreeSet::new();
        for i in &self.intervals {
            if i.component == component && i.activity == activity {
                seen.insert((i.t_start.to_bits(), i.stage, i.step));
            }
        }
        seen.len()
    }

    /// First pair of overlapping intervals on the same slot.
    pub fn find_overlap(&self) -> Option<(&Interval, &Interval)> {
        let mut by_slot: Vec<&Interval> = self.intervals.iter().collect();
        by_slot.sort_by(|a, b| a.slot.cmp(&b.slot).then(a.t_start.total_cmp(&b.t_start)));
        by_slot
            .windows(2)
            .find(|w| w[0].slot == w[1].slot && w[1].t_start < w[0].t_end)
            .map(|w| (w[0], w[1]))
    }

    /// Writes one JSON object per interval.
    pub fn export<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for i in &self.intervals {
            serde_json::to_writer(&mut w, i)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    fn push_on(
        &mut self,
        slots: &SlotSet,
        component: Component,
        activity: Activity,
        start: f64,
        end: f64,
    ) {
        for &slot in slots.slots() {
            self.intervals.push(Interval {
                slot,
                component,
                activity,
                stage: None,
                step: None,
                t_start: start,
                t_end: end,
            });
        }
    }

    /// Offloads what the phase does not need, onloads what it needs, then
    /// checks memory. Returns the time the phase may start.
    fn transition(
        &mut self,
        plan: &PlacementPlan,
        cost: &CostModel,
        phase: Phase,
        n_envs: usize,
    ) -> Result<f64, PlacementError> {
        let env_state = cost.t_env_state + cost.t_env_state_per_env * n_envs as f64;
        let resident: Vec<Component> = self.resident.iter().copied().collect();
        for c in resident {
            if !phase.needs(c) && plan.offload.get(c) {
                let d = cost.t_offload + if c == Component::Env { env_state } else { 0.0 };
                self.occupy(plan.slots(c), c, Activity::Offload, d);
                self.resident.remove(&c);
            }
        }
        for c in Component::ALL {
            if phase.needs(c) && !self.resident.contains(&c) {
                let d = cost.t_onload + if c == Component::Env { env_state } else { 0.0 };
                self.occupy(plan.slots(c), c, Activity::Onload, d);
                self.resident.insert(c);
            }
        }
        for slot in 0..plan.cluster_size {
            let used: f64 = self
                .resident
                .iter()
                .filter(|&&c| plan.slots(c).slots().contains(&slot))
                .map(|&c| cost.memory(c))
                .sum();
            self.peak_memory = self.peak_memory.max(used);
            if used > cost.slot_capacity + 1e-12 {
                return Err(PlacementError::MemoryOverflow {
                    slot,
                    used,
                    capacity: cost.slot_capacity,
                });
            }
        }
        Ok(self.makespan())
    }

    fn occupy(&mut self, slots: &SlotSet, c: Component, a: Activity, d: f64) {
        let start = slots
            .slots()
            .iter()
            .map(|&s| self.slot_free(s))
            .fold(0.0, f64::max);
        self.push_on(slots, c, a, start, start + d);
    }
}

/// Where the rollout runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Single-threaded, deterministic, timed by the cost model.
    #[default]
    Virtual,
    /// One thread per pipeline stage plus a generation thread, timed by the wall clock.
    Real,
}

/// Global environment ids of each pipeline stage.
pub fn stage_partition(
    plan: &PlacementPlan,
    n_envs: usize,
) -> Result<Vec<Vec<usize>>, PlacementError> {
    let k = plan.pipeline_stage_num;
    if !n_envs.is_multiple_of(k * plan.env.len()) {
        return Err(PlacementError::InvalidPlan(format!(
            "{n_envs} environments cannot be split into {k} stages over {} env slots",
            plan.env.len()
        )));
    }
    let per = n_envs / k;
    Ok((0..k).map(|i| (i * per..(i + 1) * per).collect()).collect())
}

/// Runs one rollout batch under `plan`, starting from `trace`'s residency.
pub fn run_rollout_epoch(
    plan: &PlacementPlan,
    backend: Backend,
    cost: &CostModel,
    policy: &PolicyNet,
    spec: &RolloutSpec,
    mut trace: EpochTrace,
) -> Result<(TrajectorySlab, EpochTrace), PlacementError> {
    plan.validate()?;
    cost.validate()?;
    let n_envs = spec.env_cfg.num_envs;
    let stages = stage_partition(plan, n_envs)?;
    let start = trace.transition(plan, cost, Phase::Rollout, n_envs)?;
    let slab = match backend {
        Backend::Virtual => {
            let sizes: Vec<usize> = stages.iter().map(Vec::len).collect();
            let acts = schedule_rollout(plan, cost, &sizes, spec.steps, start);
            let slab = schedule::execute(policy, spec, &stages, &acts)?;
            for a in &acts {
                let (c, slots) = match a.activity {
                    Activity::Generate => (Component::Rollout, &plan.rollout),
                    _ => (Component::Env, &plan.env),
                };
                for &slot in slots.slots() {
                    trace.intervals.push(Interval {
                        slot,
                        component: c,
                        activity: a.activity,
                        stage: Some(a.stage),
                        step: Some(a.step),
                        t_start: a.start,
                        t_end: a.end,
                    });
                }
            }
            slab
        }
        Backend::Real => real::run(plan, policy, spec, &stages, start, &mut trace)?,
    };
    trace.frames += slab.frames();
    trace.rollout_end = trace.makespan();
    Ok((slab, trace))
}

/// Appends the training phase: transitions, then training spread over the actor slots.
pub fn run_training_phase(
    plan: &PlacementPlan,
    cost: &CostModel,
    n_envs: usize,
    trace: &mut EpochTrace,
) -> Result<(), PlacementError> {
    plan.validate()?;
    let start = trace.transition(plan, cost, Phase::Training, n_envs)?;
    let d = trace.frames as f64 * cost.t_train_per_frame / plan.actor.len() as f64;
    trace.push_on(
        &plan.actor,
        Component::Actor,
        Activity::Train,
        start,
        start + d,
    );
    Ok(())
}

/// Frames per unit time over the whole epoch.
pub fn throughput(trace: &EpochTrace) -> Result<f64, PlacementError> {
    let t = trace.makespan();
    if trace.frames == 0 || t <= 0.0 {
        return Err(PlacementError::EmptyTrace);
    }
    Ok(trace.frames as f64 / t)
}
