//! Advantages and returns.
//!
//! PPO uses generalized advantage estimation over chunk or action units;
//! GRPO standardizes undiscounted episode returns within groups of
//! trajectories that share a task and an initial state. This module also
//! owns the valid-action mask, the per-trajectory loss weights and the
//! success-rate filter that drops uninformative groups.

use crate::granularity::{sum_in_order, Level};
use crate::types::{GroupKey, TrajectorySlab};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdvError {
    #[error("length mismatch: rewards {rewards}, values {values}, ends {ends}")]
    LengthMismatch {
        rewards: usize,
        values: usize,
        ends: usize,
    },
    #[error("group has zero return spread and eps_std = 0")]
    DegenerateGroup,
    #[error("group needs at least 2 trajectories, got {0}")]
    GroupTooSmall(usize),
    #[error("no group survived the success-rate filter")]
    SkipUpdate,
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaeParams {
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for GaeParams {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
        }
    }
}

impl GaeParams {
    pub fn validate(&self) -> Result<(), AdvError> {
        for (name, v) in [("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(AdvError::InvalidParams(format!(
                    "{name} = {v} not in [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// How a unit ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum UnitEnd {
    Continue,
    /// Next value is zero.
    Terminated,
    /// Cut by the step limit; carries the value of the final observation.
    Truncated(f64),
}

impl UnitEnd {
    pub fn is_done(self) -> bool {
        !matches!(self, UnitEnd::Continue)
    }
}

/// Backward GAE recursion.
///
/// `bootstrap` is the value following the last unit when it does not end
/// its episode.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    ends: &[UnitEnd],
    bootstrap: f64,
    params: GaeParams,
) -> Result<(Vec<f64>, Vec<f64>), AdvError> {
    let n = rewards.len();
    if values.len() != n || ends.len() != n {
        return Err(AdvError::LengthMismatch {
            rewards: n,
            values: values.len(),
            ends: ends.len(),
        });
    }
    let GaeParams { gamma, lambda } = params;
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let (v_next, carry) = match ends[t] {
            UnitEnd::Continue => (next_value, next_adv),
            UnitEnd::Terminated => (0.0, 0.0),
            UnitEnd::Truncated(v) => (v, 0.0),
        };
        let delta = rewards[t] + gamma * v_next - values[t];
        adv[t] = delta + gamma * lambda * carry;
        next_adv = adv[t];
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// One advantage unit on an environment's time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub record: usize,
    /// Slot inside the chunk for action units, `None` for chunk units.
    pub action: Option<usize>,
    pub episode_id: u64,
    pub reward: f64,
    pub value: f64,
    pub end: UnitEnd,
    pub executed: bool,
    /// Inside the valid-action mask.
    pub valid: bool,
}

/// Splits every environment's records into advantage units.
///
/// A chunk unit earns the sum of its executed rewards and ends where its
/// first executed terminal slot ends. Frozen slots produce non-executed,
/// invalid units.
pub fn unit_sequences(slab: &TrajectorySlab, level: Level) -> Vec<Vec<Unit>> {
    let mask = valid_action_mask(slab);
    let c = slab.chunk_len;
    slab.envs
        .iter()
        .enumerate()
        .map(|(env, records)| {
            let mut units = Vec::new();
            for (t, rec) in records.iter().enumerate() {
                let slot_end = |j: usize| -> UnitEnd {
                    if !rec.executed[j] {
                        UnitEnd::Continue
                    } else if rec.terminated[j] {
                        UnitEnd::Terminated
                    } else if rec.truncated[j] {
                        let b = rec.bootstrap[j].expect("truncated step without bootstrap");
                        UnitEnd::Truncated(match level {
                            Level::Chunk => b.scalar,
                            _ => b.action,
                        })
                    } else {
                        UnitEnd::Continue
                    }
                };
                let valid = &mask[env][t * c..(t + 1) * c];
                match level {
                    Level::Chunk => {
                        let executed: Vec<f64> = (0..c)
                            .filter(|&j| rec.executed[j])
                            .map(|j| rec.rewards[j])
                            .collect();
                        let first = (0..c).find(|&j| rec.executed[j]).unwrap_or(0);
                        let end = (0..c)
                            .map(slot_end)
                            .find(|e| e.is_done())
                            .unwrap_or(UnitEnd::Continue);
                        units.push(Unit {
                            record: t,
                            action: None,
                            episode_id: rec.episode_ids[first],
                            reward: sum_in_order(&executed),
                            value: rec.values_scalar,
                            end,
                            executed: !executed.is_empty(),
                            valid: valid.iter().any(|&v| v),
                        });
                    }
                    _ => {
                        for j in 0..c {
                            units.push(Unit {
                                record: t,
                                action: Some(j),
                                episode_id: rec.episode_ids[j],
                                reward: if rec.executed[j] { rec.rewards[j] } else { 0.0 },
                                value: rec.values_vector[j],
                                end: slot_end(j),
                                executed: rec.executed[j],
                                valid: valid[j],
                            });
                        }
                    }
                }
            }
            units
        })
        .collect()
}

/// GAE over the executed units of every environment. Non-executed units
/// get zero advantage and their own value as return.
pub fn gae_for_units(
    units: &[Vec<Unit>],
    tail_bootstrap: &[f64],
    params: GaeParams,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>, AdvError> {
    units
        .iter()
        .zip(tail_bootstrap)
        .map(|(seq, &boot)| {
            let idx: Vec<usize> = (0..seq.len()).filter(|&i| seq[i].executed).collect();
            let rewards: Vec<f64> = idx.iter().map(|&i| seq[i].reward).collect();
            let values: Vec<f64> = idx.iter().map(|&i| seq[i].value).collect();
            let ends: Vec<UnitEnd> = idx.iter().map(|&i| seq[i].end).collect();
            let (a, r) = compute_gae(&rewards, &values, &ends, boot, params)?;
            let mut adv = vec![0.0; seq.len()];
            let mut ret: Vec<f64> = seq.iter().map(|u| u.value).collect();
            for (k, &i) in idx.iter().enumerate() {
                adv[i] = a[k];
                ret[i] = r[k];
            }
            Ok((adv, ret))
        })
        .collect()
}

/// `G` trajectories sharing one group key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub key: GroupKey,
    pub envs: Vec<usize>,
    pub episode_ids: Vec<u64>,
    /// Undiscounted episode returns.
    pub returns: Vec<f64>,
    /// Atomic span of each trajectory, frozen slots included.
    pub lengths: Vec<usize>,
    /// One-based first success step.
    pub first_success: Vec<Option<usize>>,
}

impl GroupBatch {
    /// A group described by its returns alone.
    pub fn from_returns(returns: Vec<f64>) -> Result<Self, AdvError> {
        let g = returns.len();
        if g < 2 {
            return Err(AdvError::GroupTooSmall(g));
        }
        Ok(Self {
            key: GroupKey {
                task_id: 0,
                reset_state_id: 0,
            },
            envs: (0..g).collect(),
            episode_ids: vec![0; g],
            returns,
            lengths: vec![0; g],
            first_success: vec![None; g],
        })
    }

    pub fn size(&self) -> usize {
        self.returns.len()
    }

    pub fn mean_return(&self) -> f64 {
        sum_in_order(&self.returns) / self.size() as f64
    }
}

/// Collects the first episode of every environment into groups keyed by
/// `(task, reset state)`, ordered by key. Episodes that began after a reset
/// inside the rollout are left out.
pub fn collect_groups(slab: &TrajectorySlab) -> Result<Vec<GroupBatch>, AdvError> {
    let mut map: BTreeMap<GroupKey, GroupBatch> = BTreeMap::new();
    for ep in slab.episodes.iter().filter(|e| e.start == 0) {
        let key = ep.group_key.unwrap_or(GroupKey {
            task_id: 0,
            reset_state_id: u32::MAX,
        });
        let g = map.entry(key).or_insert_with(|| GroupBatch {
            key,
            envs: Vec::new(),
            episode_ids: Vec::new(),
            returns: Vec::new(),
            lengths: Vec::new(),
            first_success: Vec::new(),
        });
        g.envs.push(ep.env_id);
        g.episode_ids.push(ep.episode_id);
        g.returns.push(ep.total_reward);
        g.lengths.push(ep.span());
        g.first_success.push(ep.first_success_step);
    }
    let groups: Vec<GroupBatch> = map.into_values().collect();
    if let Some(g) = groups.iter().find(|g| g.size() < 2) {
        return Err(AdvError::GroupTooSmall(g.size()));
    }
    Ok(groups)
}

/// `(R_i - mean) / (std + eps_std)` with the population standard deviation.
pub fn grpo_group_advantage(batch: &GroupBatch, eps_std: f64) -> Result<Vec<f64>, AdvError> {
    let g = batch.size();
    if g < 2 {
        return Err(AdvError::GroupTooSmall(g));
    }
    let mean = batch.mean_return();
    let sq: Vec<f64> = batch.returns.iter().map(|r| (r - mean).powi(2)).collect();
    let std = (sum_in_order(&sq) / g as f64).sqrt();
    if std == 0.0 && eps_std == 0.0 {
        return Err(AdvError::DegenerateGroup);
    }
    Ok(batch
        .returns
        .iter()
        .map(|r| (r - mean) / (std + eps_std))
        .collect())
}

/// Per-atomic-slot mask, environment-major. A slot is valid when it was
/// executed and does not come after its episode's first success.
pub fn valid_action_mask(slab: &TrajectorySlab) -> Vec<Vec<bool>> {
    let first_success: HashMap<(usize, u64), Option<usize>> = slab
        .episodes
        .iter()
        .map(|e| ((e.env_id, e.episode_id), e.first_success_step))
        .collect();
    slab.envs
        .iter()
        .enumerate()
        .map(|(env, records)| {
            records
                .iter()
                .flat_map(|rec| (0..rec.chunk_len()).map(move |j| (rec, j)))
                .map(|(rec, j)| {
                    rec.executed[j]
                        && match first_success
                            .get(&(env, rec.episode_ids[j]))
                            .copied()
                            .flatten()
                        {
                            Some(s) => (rec.episode_steps[j] as usize) < s,
                            None => true,
                        }
                })
                .collect()
        })
        .collect()
}

/// How per-trajectory loss weights are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthNorm {
    /// `1 / |tau|` with `|tau|` the full span of the trajectory.
    Base,
    /// `1 / T_succ` with `T_succ` the number of valid units.
    #[default]
    LengthNormalized,
}

/// Per-unit weights: each trajectory's valid units share `1 / T_succ` (or
/// `1 / |tau|` in base mode); invalid units get zero.
pub fn trajectory_weights(units: &[Vec<Unit>], mode: LengthNorm) -> Vec<Vec<f64>> {
    units
        .iter()
        .map(|seq| {
            let mut span: HashMap<u64, usize> = HashMap::new();
            let mut valid: HashMap<u64, usize> = HashMap::new();
            for u in seq {
                *span.entry(u.episode_id).or_default() += 1;
                if u.valid {
                    *valid.entry(u.episode_id).or_default() += 1;
                }
            }
            seq.iter()
                .map(|u| {
                    if !u.valid {
                        return 0.0;
                    }
                    let denom = match mode {
                        LengthNorm::Base => span[&u.episode_id],
                        LengthNorm::LengthNormalized => valid[&u.episode_id],
                    };
                    1.0 / denom as f64
                })
                .collect()
        })
        .collect()
}

/// Atomic-level [`trajectory_weights`].
pub fn length_norm_weights(slab: &TrajectorySlab, mode: LengthNorm) -> Vec<Vec<f64>> {
    trajectory_weights(&unit_sequences(slab, Level::Action), mode)
}

/// Bounds on a group's mean return; the group is kept iff `lower < mean < upper`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterBounds {
    pub lower: f64,
    pub upper: f64,
}

impl Default for FilterBounds {
    fn default() -> Self {
        Self {
            lower: 0.0,
            upper: 1.0,
        }
    }
}

impl FilterBounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self, AdvError> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), AdvError> {
        if self.lower < self.upper {
            Ok(())
        } else {
            Err(AdvError::InvalidParams(format!(
                "filter bounds need lower < upper, got ({}, {})",
                self.lower, self.upper
            )))
        }
    }

    pub fn retains(&self, group: &GroupBatch) -> bool {
        let mean = group.mean_return();
        self.lower < mean && mean < self.upper
    }
}

/// Keeps the groups whose mean return lies strictly inside the bounds.
pub fn success_rate_filter(groups: Vec<GroupBatch>, bounds: FilterBounds) -> Vec<GroupBatch> {
    groups.into_iter().filter(|g| bounds.retains(g)).collect()
}

/// [`success_rate_filter`] that fails with [`AdvError::SkipUpdate`] when
/// nothing survives.
pub fn filter_or_skip(
    groups: Vec<GroupBatch>,
    bounds: FilterBounds,
) -> Result<Vec<GroupBatch>, AdvError> {
    let kept = success_rate_filter(groups, bounds);
    if kept.is_empty() {
        Err(AdvError::SkipUpdate)
    } else {
        Ok(kept)
    }
}

#[cfg(test)]
mod tests;
