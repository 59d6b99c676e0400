//! Loss assembly and the parameter update loop.
//!
//! Losses are weighted sums over advantage units. Each advantage unit
//! carries a weight (`1 / N` for PPO, `1 / (n_groups * G * L_i)` for GRPO)
//! and covers one or more log-probability units; every log-probability unit
//! inside it contributes its clipped surrogate scaled by that weight. Ratios
//! are formed at the log-probability level and never re-aggregated.

use crate::advantage::{
    collect_groups, filter_or_skip, gae_for_units, grpo_group_advantage, unit_sequences, AdvError,
    FilterBounds, GaeParams, LengthNorm,
};
use crate::granularity::{aggregate_logprob, expansion, GranularityError, GranularitySpec, Level};
use crate::policy::{PolicyError, PolicyNet};
use crate::types::{ActionChunk, Observation, TrajectorySlab};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error(transparent)]
    NonFinite(#[from] PolicyError),
    #[error("no group survived the success-rate filter")]
    SkipUpdate,
    #[error(transparent)]
    Granularity(#[from] GranularityError),
    #[error(transparent)]
    Advantage(AdvError),
    #[error("invalid optimizer config: {0}")]
    Config(String),
}

impl From<AdvError> for OptimError {
    fn from(e: AdvError) -> Self {
        match e {
            AdvError::SkipUpdate => OptimError::SkipUpdate,
            other => OptimError::Advantage(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoParams {
    pub clip_eps: f64,
    pub value_loss_coef: f64,
    pub entropy_coef: f64,
    pub epochs_per_batch: usize,
    /// Chunk records per minibatch; 0 means the whole batch.
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    /// Batch-level advantage whitening; `None` picks on for PPO, off for GRPO.
    pub normalize_advantages: Option<bool>,
}

impl Default for PpoParams {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            value_loss_coef: 0.5,
            entropy_coef: 0.0,
            epochs_per_batch: 4,
            minibatch_size: 0,
            learning_rate: 3e-3,
            max_grad_norm: 1.0,
            normalize_advantages: None,
        }
    }
}

impl PpoParams {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::Config(m.to_string()));
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps must be > 0");
        }
        if self.value_loss_coef < 0.0 || self.entropy_coef < 0.0 {
            return bad("loss coefficients must be >= 0");
        }
        if self.epochs_per_batch == 0 {
            return bad("epochs_per_batch must be >= 1");
        }
        if !(self.learning_rate > 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("learning_rate and max_grad_norm must be > 0");
        }
        Ok(())
    }
}

/// Which objective an update optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Ppo,
    Grpo(LengthNorm),
}

/// One chunk decision with per-advantage-unit training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub obs: Observation,
    pub chunk: ActionChunk,
    pub old_token_logprobs: Vec<f64>,
    pub adv: Vec<f64>,
    pub returns: Vec<f64>,
    pub valid: Vec<bool>,
    /// GRPO trajectory each unit belongs to.
    pub traj: Vec<Option<usize>>,
}

/// Lengths of one GRPO trajectory, in advantage units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajInfo {
    /// Full span, frozen units included.
    pub span: usize,
    /// Units inside the valid-action mask.
    pub valid: usize,
    pub group_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub spec: GranularitySpec,
    pub chunk_len: usize,
    pub tokens_per_action: usize,
    pub records: Vec<BatchRecord>,
    pub trajectories: Vec<TrajInfo>,
    pub n_groups: usize,
}

impl RolloutBatch {
    pub fn valid_units(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.valid.iter().filter(|&&v| v).count())
            .sum()
    }

    /// Whitens advantages over valid units.
    pub fn whiten(&mut self) {
        let vals: Vec<f64> = self
            .records
            .iter()
            .flat_map(|r| r.adv.iter().zip(&r.valid).filter(|p| *p.1).map(|p| *p.0))
            .collect();
        if vals.is_empty() {
            return;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        for r in &mut self.records {
            for (a, &v) in r.adv.iter_mut().zip(&r.valid) {
                if v {
                    *a = (*a - mean) / (std + 1e-8);
                }
            }
        }
    }

    /// Per-unit loss weights over the whole batch.
    pub fn weights(&self, objective: Objective) -> Vec<Vec<f64>> {
        let n_valid = self.valid_units().max(1) as f64;
        self.records
            .iter()
            .map(|r| {
                r.valid
                    .iter()
                    .zip(&r.traj)
                    .map(|(&v, t)| {
                        if !v {
                            return 0.0;
                        }
                        match objective {
                            Objective::Ppo => 1.0 / n_valid,
                            Objective::Grpo(mode) => {
                                let info = self.trajectories[t.expect("unit without trajectory")];
                                let len = match mode {
                                    LengthNorm::Base => info.span,
                                    LengthNorm::LengthNormalized => info.valid,
                                };
                                1.0 / (self.n_groups * info.group_size * len) as f64
                            }
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

fn unit_level(spec: &GranularitySpec) -> Level {
    spec.advantage_level
}

/// GAE targets for every executed unit; PPO rollout modes only.
pub fn build_ppo_batch(
    slab: &TrajectorySlab,
    spec: GranularitySpec,
    gae: GaeParams,
) -> Result<RolloutBatch, OptimError> {
    spec.validate()?;
    gae.validate()?;
    if spec.value_level != spec.advantage_level {
        return Err(OptimError::Config(format!(
            "PPO needs value_level == advantage_level, got {} and {}",
            spec.value_level, spec.advantage_level
        )));
    }
    let level = unit_level(&spec);
    let units = unit_sequences(slab, level);
    let boot: Vec<f64> = slab
        .tail_bootstrap
        .iter()
        .map(|b| {
            if level == Level::Chunk {
                b.scalar
            } else {
                b.action
            }
        })
        .collect();
    let targets = gae_for_units(&units, &boot, gae)?;
    let per = level.units_per_chunk(slab.chunk_len, slab.tokens_per_action);
    let mut records = Vec::new();
    for (env, recs) in slab.envs.iter().enumerate() {
        let (adv, ret) = &targets[env];
        for (t, rec) in recs.iter().enumerate() {
            let span = t * per..(t + 1) * per;
            let valid: Vec<bool> = units[env][span.clone()]
                .iter()
                .map(|u| u.executed)
                .collect();
            if !valid.iter().any(|&v| v) {
                continue;
            }
            records.push(BatchRecord {
                obs: rec.obs.clone(),
                chunk: rec.chunk.clone(),
                old_token_logprobs: rec.token_logprobs.clone(),
                adv: adv[span.clone()].to_vec(),
                returns: ret[span].to_vec(),
                traj: vec![None; per],
                valid,
            });
        }
    }
    Ok(RolloutBatch {
        spec,
        chunk_len: slab.chunk_len,
        tokens_per_action: slab.tokens_per_action,
        records,
        trajectories: Vec::new(),
        n_groups: 0,
    })
}

/// Group-relative targets for the first episode of every environment in a
/// retained group. With `use_mask` the valid-action mask restricts the units;
/// otherwise every executed unit counts.
pub fn build_grpo_batch(
    slab: &TrajectorySlab,
    spec: GranularitySpec,
    eps_std: f64,
    bounds: FilterBounds,
    use_mask: bool,
) -> Result<RolloutBatch, OptimError> {
    spec.validate()?;
    bounds.validate()?;
    let groups = filter_or_skip(collect_groups(slab)?, bounds)?;
    let level = unit_level(&spec);
    let units = unit_sequences(slab, level);
    let per = level.units_per_chunk(slab.chunk_len, slab.tokens_per_action);
    let mut trajectories = Vec::new();
    let mut member: HashMap<usize, (u64, f64, usize)> = HashMap::new();
    for g in &groups {
        let adv = grpo_group_advantage(g, eps_std)?;
        for (k, &env) in g.envs.iter().enumerate() {
            let eid = g.episode_ids[k];
            let in_ep = units[env].iter().filter(|u| u.episode_id == eid);
            let span = in_ep.clone().count();
            let valid = in_ep
                .filter(|u| if use_mask { u.valid } else { u.executed })
                .count();
            member.insert(env, (eid, adv[k], trajectories.len()));
            trajectories.push(TrajInfo {
                span,
                valid,
                group_size: g.size(),
            });
        }
    }
    let mut records = Vec::new();
    for (env, recs) in slab.envs.iter().enumerate() {
        let Some(&(eid, a, ti)) = member.get(&env) else {
            continue;
        };
        for (t, rec) in recs.iter().enumerate() {
            let us = &units[env][t * per..(t + 1) * per];
            let valid: Vec<bool> = us
                .iter()
                .map(|u| u.episode_id == eid && if use_mask { u.valid } else { u.executed })
                .collect();
            if !valid.iter().any(|&v| v) {
                continue;
            }
            records.push(BatchRecord {
                obs: rec.obs.clone(),
                chunk: rec.chunk.clone(),
                old_token_logprobs: rec.token_logprobs.clone(),
                adv: vec![a; per],
                returns: vec![0.0; per],
                traj: vec![Some(ti); per],
                valid,
            });
        }
    }
    Ok(RolloutBatch {
        spec,
        chunk_len: slab.chunk_len,
        tokens_per_action: slab.tokens_per_action,
        records,
        trajectories,
        n_groups: groups.len(),
    })
}

/// `exp(new - old)`.
pub fn ratio(new_logprob: f64, old_logprob: f64) -> f64 {
    (new_logprob - old_logprob).exp()
}

/// Loss value with its parts and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    pub approx_kl: f64,
}

/// Loss and exact gradient over `records` with the given per-unit weights.
fn weighted_loss(
    net: &PolicyNet,
    batch: &RolloutBatch,
    records: &[usize],
    weights: &[Vec<f64>],
    scale: f64,
    params: &PpoParams,
    with_value: bool,
) -> Result<(LossTerms, Vec<f64>), OptimError> {
    let spec = batch.spec;
    let (c, m) = (batch.chunk_len, batch.tokens_per_action);
    let lp_per_adv = expansion(spec.advantage_level, spec.logprob_level, c, m)?;
    let tok_per_lp = expansion(spec.logprob_level, Level::Token, c, m)?;
    let tok_per_adv = lp_per_adv * tok_per_lp;
    let eps = params.clip_eps;
    let mut terms = LossTerms::default();
    let mut lp_units = 0usize;
    let mut clipped = 0usize;
    let (total, grad) = net.grad(|tape| {
        for &ri in records {
            let r = &batch.records[ri];
            let w_unit = &weights[ri];
            if w_unit.iter().all(|&w| w == 0.0) {
                continue;
            }
            let (h, e) = tape.eval(&r.obs, &r.chunk);
            let new_lp = aggregate_logprob(&e.token_logprobs, m, spec.logprob_level);
            let old_lp = aggregate_logprob(&r.old_token_logprobs, m, spec.logprob_level);
            let seed = tape.seed_mut(h);
            for (u, (&n, &o)) in new_lp.iter().zip(&old_lp).enumerate() {
                let a_idx = u / lp_per_adv;
                let w = w_unit[a_idx] * scale;
                if w == 0.0 {
                    continue;
                }
                let adv = r.adv[a_idx];
                let rho = ratio(n, o);
                let unclipped = rho * adv;
                let clip = rho.clamp(1.0 - eps, 1.0 + eps) * adv;
                terms.policy_loss -= w * unclipped.min(clip);
                let d = if unclipped <= clip { adv * rho } else { 0.0 };
                let s = -(w * d);
                for p in u * tok_per_lp..(u + 1) * tok_per_lp {
                    seed.d_logprob[p] += s;
                }
                lp_units += 1;
                if (rho - 1.0).abs() > eps {
                    clipped += 1;
                }
                terms.approx_kl += rho - 1.0 - (n - o);
            }
            for (a_idx, &w0) in w_unit.iter().enumerate() {
                let w = w0 * scale;
                if w == 0.0 {
                    continue;
                }
                let toks = a_idx * tok_per_adv..(a_idx + 1) * tok_per_adv;
                let h_mean = e.entropies[toks.clone()].iter().sum::<f64>() / tok_per_adv as f64;
                terms.entropy += w * h_mean;
                if params.entropy_coef != 0.0 {
                    for p in toks {
                        seed.d_entropy[p] -= params.entropy_coef * w / tok_per_adv as f64;
                    }
                }
                if with_value && params.value_loss_coef != 0.0 {
                    let v = match spec.value_level {
                        Level::Chunk => e.value_scalar,
                        _ => e.value_vector[a_idx],
                    };
                    let diff = v - r.returns[a_idx];
                    terms.value_loss += w * diff * diff;
                    let dv = 2.0 * params.value_loss_coef * w * diff;
                    match spec.value_level {
                        Level::Chunk => seed.d_value_scalar += dv,
                        _ => seed.d_value_vector[a_idx] += dv,
                    }
                }
            }
        }
        terms.policy_loss + params.value_loss_coef * terms.value_loss
            - params.entropy_coef * terms.entropy
    })?;
    terms.loss = total;
    if lp_units > 0 {
        terms.clip_frac = clipped as f64 / lp_units as f64;
        terms.approx_kl /= lp_units as f64;
    }
    if !total.is_finite() {
        return Err(PolicyError::NonFinite(usize::MAX).into());
    }
    Ok((terms, grad))
}

fn all_records(batch: &RolloutBatch) -> Vec<usize> {
    (0..batch.records.len()).collect()
}

/// Clipped surrogate with value and entropy terms, averaged over valid units.
pub fn ppo_loss(
    net: &PolicyNet,
    batch: &RolloutBatch,
    params: &PpoParams,
) -> Result<(LossTerms, Vec<f64>), OptimError> {
    let w = batch.weights(Objective::Ppo);
    weighted_loss(net, batch, &all_records(batch), &w, 1.0, params, true)
}

/// GRPO objective in base or length-normalized form. No value term.
pub fn grpo_loss(
    net: &PolicyNet,
    batch: &RolloutBatch,
    mode: LengthNorm,
    params: &PpoParams,
) -> Result<(LossTerms, Vec<f64>), OptimError> {
    if batch.n_groups == 0 {
        return Err(OptimError::SkipUpdate);
    }
    let w = batch.weights(Objective::Grpo(mode));
    weighted_loss(net, batch, &all_records(batch), &w, 1.0, params, false)
}

/// Adam with global gradient-norm clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_grad_norm: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, max_grad_norm: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Applies one step and returns the pre-clipping gradient norm.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> f64 {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if norm > self.max_grad_norm {
            self.max_grad_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..theta.len() {
            let g = grad[i] * scale;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            theta[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        norm
    }
}

/// Summary of one update pass.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub steps: usize,
    /// Mean terms over the first and last optimizer epoch.
    pub first: LossTerms,
    pub last: LossTerms,
    pub grad_norm: f64,
    pub loss_curve: Vec<f64>,
}

/// Runs `epochs_per_batch` passes of shuffled minibatch descent on `batch`.
///
/// Minibatch weights are the full-batch weights scaled by
/// `n_records / minibatch_records`, so every minibatch loss estimates the
/// full-batch loss.
pub fn update(
    net: &mut PolicyNet,
    opt: &mut Adam,
    batch: &RolloutBatch,
    objective: Objective,
    params: &PpoParams,
    seed: u64,
) -> Result<UpdateMetrics, OptimError> {
    params.validate()?;
    if let Objective::Grpo(_) = objective {
        if batch.n_groups == 0 {
            return Err(OptimError::SkipUpdate);
        }
    }
    let whiten = params
        .normalize_advantages
        .unwrap_or(objective == Objective::Ppo);
    let mut owned;
    let batch = if whiten {
        owned = batch.clone();
        owned.whiten();
        &owned
    } else {
        batch
    };
    let weights = batch.weights(objective);
    let n = batch.records.len();
    let mb = if params.minibatch_size == 0 {
        n
    } else {
        params.minibatch_size.min(n)
    };
    let mut metrics = UpdateMetrics::default();
    if n == 0 {
        return Ok(metrics);
    }
    let with_value = objective == Objective::Ppo;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut norm_sum = 0.0;
    for epoch in 0..params.epochs_per_batch {
        order.shuffle(&mut rng);
        let mut acc = LossTerms::default();
        let mut count = 0.0;
        for idx in order.chunks(mb) {
            let scale = n as f64 / idx.len() as f64;
            let (terms, grad) =
                weighted_loss(net, batch, idx, &weights, scale, params, with_value)?;
            norm_sum += opt.step(net.theta_mut(), &grad);
            metrics.steps += 1;
            metrics.loss_curve.push(terms.loss);
            acc.loss += terms.loss;
            acc.policy_loss += terms.policy_loss;
            acc.value_loss += terms.value_loss;
            acc.entropy += terms.entropy;
            acc.clip_frac += terms.clip_frac;
            acc.approx_kl += terms.approx_kl;
            count += 1.0;
        }
        let mean = LossTerms {
            loss: acc.loss / count,
            policy_loss: acc.policy_loss / count,
            value_loss: acc.value_loss / count,
            entropy: acc.entropy / count,
            clip_frac: acc.clip_frac / count,
            approx_kl: acc.approx_kl / count,
        };
        if epoch == 0 {
            metrics.first = mean;
        }
        metrics.last = mean;
    }
    metrics.grad_norm = norm_sum / metrics.steps as f64;
    Ok(metrics)
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub algo: String,
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
    pub success_rate: f64,
    pub rollout_success_rate: f64,
    pub frames: usize,
    pub skipped: bool,
}

/// Appends one record as a JSON line.
pub fn write_metric<W: Write>(mut w: W, rec: &MetricRecord) -> std::io::Result<()> {
    serde_json::to_writer(&mut w, rec)?;
    w.write_all(b"\n")
}

/// Parses a JSON-lines metrics stream.
pub fn read_metrics(text: &str) -> Result<Vec<MetricRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[cfg(test)]
mod tests;
