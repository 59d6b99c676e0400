//! Tokenized chunk policy.
//!
//! The policy emits the `C x M` tokens of a chunk one at a time. Each token
//! distribution is computed by an MLP trunk whose input is the observation
//! projection plus a position embedding for the token being predicted plus
//! the embeddings of every token already emitted in the chunk. A separate
//! output layer per token position turns the trunk feature into logits.
//!
//! Two value heads (scalar and `C`-vector) read the trunk feature at the
//! first token position, i.e. with an empty prefix. Both are three-layer
//! MLPs and share nothing with the token output layers.
//!
//! Gradients are exact reverse mode: [`PolicyNet::grad`] runs a loss closure
//! against a [`Tape`] that records forward passes; the closure seeds the
//! derivatives of the loss with respect to the recorded outputs and the tape
//! backpropagates them into the flat parameter vector.

use crate::granularity::Level;
use crate::types::{ActionChunk, Observation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

mod checkpoint;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("non-finite gradient entry at parameter {0}")]
    NonFinite(usize),
    #[error("value head {head:?} does not match value level {level}")]
    HeadMismatch { head: ValueHeadKind, level: Level },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub obs_dim: usize,
    pub trunk_widths: Vec<usize>,
    pub vocab_size: usize,
    pub chunk_len: usize,
    pub tokens_per_action: usize,
    pub value_hidden: usize,
}

impl Architecture {
    pub fn positions(&self) -> usize {
        self.chunk_len * self.tokens_per_action
    }

    pub fn feature_dim(&self) -> usize {
        *self
            .trunk_widths
            .last()
            .expect("trunk has at least one layer")
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let ok = self.obs_dim > 0
            && !self.trunk_widths.is_empty()
            && self.trunk_widths.iter().all(|&w| w > 0)
            && self.vocab_size > 0
            && self.chunk_len > 0
            && self.tokens_per_action > 0
            && self.value_hidden > 0;
        if ok {
            Ok(())
        } else {
            Err(PolicyError::Shape(format!(
                "degenerate architecture {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueHeadKind {
    Scalar,
    Vector,
}

impl ValueHeadKind {
    pub fn for_level(level: Level) -> Self {
        match level {
            Level::Chunk => ValueHeadKind::Scalar,
            _ => ValueHeadKind::Vector,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct ValueLayout {
    l1: Dense,
    l2: Dense,
    out: Dense,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    input: Dense,
    pos_emb: usize,
    tok_emb: usize,
    trunk: Vec<Dense>,
    head_w: usize,
    head_b: usize,
    scalar: ValueLayout,
    vector: ValueLayout,
    total: usize,
}

impl Layout {
    fn new(a: &Architecture) -> Self {
        let mut off = 0usize;
        let mut dense = |rows: usize, cols: usize| {
            let d = Dense {
                w: off,
                b: off + rows * cols,
                rows,
                cols,
            };
            off += rows * cols + rows;
            d
        };
        let w0 = a.trunk_widths[0];
        let input = dense(w0, a.obs_dim);
        let trunk: Vec<Dense> = a
            .trunk_widths
            .windows(2)
            .map(|p| dense(p[1], p[0]))
            .collect();
        let h = a.feature_dim();
        let scalar = ValueLayout {
            l1: dense(a.value_hidden, h),
            l2: dense(a.value_hidden, a.value_hidden),
            out: dense(1, a.value_hidden),
        };
        let vector = ValueLayout {
            l1: dense(a.value_hidden, h),
            l2: dense(a.value_hidden, a.value_hidden),
            out: dense(a.chunk_len, a.value_hidden),
        };
        let p = a.positions();
        let pos_emb = off;
        off += p * w0;
        let tok_emb = off;
        off += p * a.vocab_size * w0;
        let head_w = off;
        off += p * a.vocab_size * h;
        let head_b = off;
        off += p * a.vocab_size;
        Self {
            input,
            pos_emb,
            tok_emb,
            trunk,
            head_w,
            head_b,
            scalar,
            vector,
            total: off,
        }
    }
}

/// Parameter-indexed ranges of the two output families, for isolation checks.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroups {
    pub token_head: std::ops::Range<usize>,
    pub scalar_value_head: std::ops::Range<usize>,
    pub vector_value_head: std::ops::Range<usize>,
}

fn matvec(theta: &[f64], d: Dense, x: &[f64], out: &mut [f64]) {
    for r in 0..d.rows {
        let row = &theta[d.w + r * d.cols..d.w + (r + 1) * d.cols];
        let mut acc = theta[d.b + r];
        for (w, xi) in row.iter().zip(x) {
            acc += w * xi;
        }
        out[r] = acc;
    }
}

/// `dx += W^T dy`, `dW += dy x^T`, `db += dy`.
fn matvec_backward(
    theta: &[f64],
    grad: &mut [f64],
    d: Dense,
    x: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
) {
    for r in 0..d.rows {
        let g = dy[r];
        if g == 0.0 {
            continue;
        }
        grad[d.b + r] += g;
        let base = d.w + r * d.cols;
        for c in 0..d.cols {
            grad[base + c] += g * x[c];
        }
    }
    if let Some(dx) = dx {
        for r in 0..d.rows {
            let g = dy[r];
            if g == 0.0 {
                continue;
            }
            let base = d.w + r * d.cols;
            for c in 0..d.cols {
                dx[c] += theta[base + c] * g;
            }
        }
    }
}

fn tanh_inplace(v: &mut [f64]) {
    for x in v {
        *x = x.tanh();
    }
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Forward activations of the trunk at one token position.
#[derive(Debug, Clone)]
struct PositionCache {
    /// Activations of every trunk layer, input layer first.
    acts: Vec<Vec<f64>>,
    log_probs: Vec<f64>,
}

#[derive(Debug, Clone)]
struct ValueCache {
    z1: Vec<f64>,
    z2: Vec<f64>,
}

#[derive(Debug, Clone)]
struct ChunkCache {
    obs: Vec<f64>,
    tokens: Vec<u32>,
    positions: Vec<PositionCache>,
    scalar: ValueCache,
    vector: ValueCache,
}

/// Outputs of one teacher-forced chunk evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkEval {
    /// `C x M` log-probabilities of the given tokens.
    pub token_logprobs: Vec<f64>,
    /// Entropy of the token distribution at every position.
    pub entropies: Vec<f64>,
    pub value_scalar: f64,
    pub value_vector: Vec<f64>,
}

/// Derivatives of a loss with respect to the outputs of one [`ChunkEval`].
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkSeed {
    pub d_logprob: Vec<f64>,
    pub d_entropy: Vec<f64>,
    pub d_value_scalar: f64,
    pub d_value_vector: Vec<f64>,
}

impl ChunkSeed {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            d_logprob: vec![0.0; arch.positions()],
            d_entropy: vec![0.0; arch.positions()],
            d_value_scalar: 0.0,
            d_value_vector: vec![0.0; arch.chunk_len],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkHandle(usize);

/// Records forward passes for one gradient evaluation.
pub struct Tape<'a> {
    net: &'a PolicyNet,
    caches: Vec<ChunkCache>,
    seeds: Vec<ChunkSeed>,
    theta_seed: Option<Vec<f64>>,
}

impl<'a> Tape<'a> {
    pub fn net(&self) -> &PolicyNet {
        self.net
    }

    pub fn theta(&self) -> &[f64] {
        &self.net.theta
    }

    /// Evaluates `chunk` under `obs` and records the activations.
    pub fn eval(&mut self, obs: &Observation, chunk: &ActionChunk) -> (ChunkHandle, ChunkEval) {
        let (cache, eval) = self.net.forward_chunk(obs.features(), &chunk.flat_tokens());
        self.caches.push(cache);
        self.seeds.push(ChunkSeed::zeros(&self.net.arch));
        (ChunkHandle(self.caches.len() - 1), eval)
    }

    pub fn seed_mut(&mut self, h: ChunkHandle) -> &mut ChunkSeed {
        &mut self.seeds[h.0]
    }

    /// Adds a direct derivative of the loss with respect to the parameters.
    pub fn seed_theta(&mut self, g: &[f64]) {
        let s = self
            .theta_seed
            .get_or_insert_with(|| vec![0.0; self.net.theta.len()]);
        for (a, b) in s.iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// How `sample_chunk` picks tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    #[default]
    Stochastic,
    /// Zero-temperature limit: always the most likely token.
    Greedy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    arch: Architecture,
    layout: Layout,
    theta: Vec<f64>,
}

impl PolicyNet {
    /// Orthogonal trunk and value hidden layers, small random embeddings,
    /// zero token output layer and zero value output layers.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self, PolicyError> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut theta = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ortho = |d: Dense, theta: &mut [f64], rng: &mut ChaCha8Rng| {
            let m = orthogonal(d.rows, d.cols, rng);
            theta[d.w..d.w + d.rows * d.cols].copy_from_slice(&m);
        };
        ortho(layout.input, &mut theta, &mut rng);
        for d in &layout.trunk {
            ortho(*d, &mut theta, &mut rng);
        }
        for v in [&layout.scalar, &layout.vector] {
            ortho(v.l1, &mut theta, &mut rng);
            ortho(v.l2, &mut theta, &mut rng);
        }
        let w0 = arch.trunk_widths[0];
        let emb_end = layout.tok_emb + arch.positions() * arch.vocab_size * w0;
        for x in &mut theta[layout.pos_emb..emb_end] {
            *x = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(Self {
            arch,
            layout,
            theta,
        })
    }

    /// Every parameter drawn from `N(0, scale^2)`; used by gradient checks.
    pub fn randomized(arch: Architecture, seed: u64, scale: f64) -> Result<Self, PolicyError> {
        let mut net = Self::new(arch, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A);
        for x in &mut net.theta {
            *x = scale * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(net)
    }

    pub fn from_parts(arch: Architecture, theta: Vec<f64>) -> Result<Self, PolicyError> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if theta.len() != layout.total {
            return Err(PolicyError::Shape(format!(
                "expected {} parameters, got {}",
                layout.total,
                theta.len()
            )));
        }
        Ok(Self {
            arch,
            layout,
            theta,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn param_groups(&self) -> ParamGroups {
        let l = &self.layout;
        let p = self.arch.positions() * self.arch.vocab_size;
        ParamGroups {
            token_head: l.head_w..l.head_b + p,
            scalar_value_head: l.scalar.l1.w..l.scalar.out.b + l.scalar.out.rows,
            vector_value_head: l.vector.l1.w..l.vector.out.b + l.vector.out.rows,
        }
    }

    fn input_base(&self, obs: &[f64]) -> Vec<f64> {
        let mut base = vec![0.0; self.layout.input.rows];
        matvec(&self.theta, self.layout.input, obs, &mut base);
        base
    }

    /// Trunk activations at `pos` given the running prefix-embedding sum.
    fn trunk(&self, base: &[f64], prefix_sum: &[f64], pos: usize) -> Vec<Vec<f64>> {
        let w0 = self.arch.trunk_widths[0];
        let pe = &self.theta[self.layout.pos_emb + pos * w0..self.layout.pos_emb + (pos + 1) * w0];
        let mut a0: Vec<f64> = (0..w0).map(|i| base[i] + pe[i] + prefix_sum[i]).collect();
        tanh_inplace(&mut a0);
        let mut acts = vec![a0];
        for d in &self.layout.trunk {
            let mut next = vec![0.0; d.rows];
            matvec(&self.theta, *d, acts.last().unwrap(), &mut next);
            tanh_inplace(&mut next);
            acts.push(next);
        }
        acts
    }

    fn logits_at(&self, h: &[f64], pos: usize) -> Vec<f64> {
        let v = self.arch.vocab_size;
        let d = Dense {
            w: self.layout.head_w + pos * v * h.len(),
            b: self.layout.head_b + pos * v,
            rows: v,
            cols: h.len(),
        };
        let mut out = vec![0.0; v];
        matvec(&self.theta, d, h, &mut out);
        out
    }

    fn add_token_embedding(&self, prefix_sum: &mut [f64], pos: usize, token: u32) {
        let w0 = self.arch.trunk_widths[0];
        let off = self.layout.tok_emb + (pos * self.arch.vocab_size + token as usize) * w0;
        for (s, e) in prefix_sum.iter_mut().zip(&self.theta[off..off + w0]) {
            *s += e;
        }
    }

    fn value_forward(&self, v: &ValueLayout, h: &[f64]) -> (ValueCache, Vec<f64>) {
        let mut z1 = vec![0.0; v.l1.rows];
        matvec(&self.theta, v.l1, h, &mut z1);
        tanh_inplace(&mut z1);
        let mut z2 = vec![0.0; v.l2.rows];
        matvec(&self.theta, v.l2, &z1, &mut z2);
        tanh_inplace(&mut z2);
        let mut out = vec![0.0; v.out.rows];
        matvec(&self.theta, v.out, &z2, &mut out);
        (ValueCache { z1, z2 }, out)
    }

    /// Vocabulary logits for the next token after `prefix` (tokens already emitted in the chunk).
    pub fn forward_logits(&self, obs: &Observation, prefix: &[u32]) -> Vec<f64> {
        assert!(
            prefix.len() < self.arch.positions(),
            "prefix fills the chunk"
        );
        let base = self.input_base(obs.features());
        let mut prefix_sum = vec![0.0; self.arch.trunk_widths[0]];
        for (p, &t) in prefix.iter().enumerate() {
            self.add_token_embedding(&mut prefix_sum, p, t);
        }
        let pos = prefix.len();
        let acts = self.trunk(&base, &prefix_sum, pos);
        self.logits_at(acts.last().unwrap(), pos)
    }

    /// Trunk feature at the first action token.
    pub fn trunk_feature(&self, obs: &Observation) -> Vec<f64> {
        let base = self.input_base(obs.features());
        let zero = vec![0.0; self.arch.trunk_widths[0]];
        self.trunk(&base, &zero, 0).pop().unwrap()
    }

    /// Draws a chunk token by token and returns the log-softmax of each drawn token.
    pub fn sample_chunk<R: Rng + ?Sized>(
        &self,
        obs: &Observation,
        rng: &mut R,
        mode: SampleMode,
    ) -> (ActionChunk, Vec<f64>) {
        let base = self.input_base(obs.features());
        let p = self.arch.positions();
        let mut prefix_sum = vec![0.0; self.arch.trunk_widths[0]];
        let mut tokens = Vec::with_capacity(p);
        let mut logprobs = Vec::with_capacity(p);
        for pos in 0..p {
            let acts = self.trunk(&base, &prefix_sum, pos);
            let ls = log_softmax(&self.logits_at(acts.last().unwrap(), pos));
            let tok = match mode {
                SampleMode::Greedy => argmax(&ls),
                SampleMode::Stochastic => {
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut pick = ls.len() - 1;
                    for (k, l) in ls.iter().enumerate() {
                        acc += l.exp();
                        if u < acc {
                            pick = k;
                            break;
                        }
                    }
                    pick
                }
            };
            tokens.push(tok as u32);
            logprobs.push(ls[tok]);
            self.add_token_embedding(&mut prefix_sum, pos, tok as u32);
        }
        (
            ActionChunk::from_flat(&tokens, self.arch.tokens_per_action),
            logprobs,
        )
    }

    fn forward_chunk(&self, obs: &[f64], tokens: &[u32]) -> (ChunkCache, ChunkEval) {
        let p = self.arch.positions();
        assert_eq!(tokens.len(), p, "chunk has the wrong number of tokens");
        let base = self.input_base(obs);
        let mut prefix_sum = vec![0.0; self.arch.trunk_widths[0]];
        let mut positions = Vec::with_capacity(p);
        let mut token_logprobs = Vec::with_capacity(p);
        let mut entropies = Vec::with_capacity(p);
        for (pos, &tok) in tokens.iter().enumerate() {
            let acts = self.trunk(&base, &prefix_sum, pos);
            let ls = log_softmax(&self.logits_at(acts.last().unwrap(), pos));
            token_logprobs.push(ls[tok as usize]);
            entropies.push(-ls.iter().map(|l| l.exp() * l).sum::<f64>());
            positions.push(PositionCache {
                acts,
                log_probs: ls,
            });
            self.add_token_embedding(&mut prefix_sum, pos, tok);
        }
        let h0 = positions[0].acts.last().unwrap().clone();
        let (scalar, vs) = self.value_forward(&self.layout.scalar, &h0);
        let (vector, vv) = self.value_forward(&self.layout.vector, &h0);
        let cache = ChunkCache {
            obs: obs.to_vec(),
            tokens: tokens.to_vec(),
            positions,
            scalar,
            vector,
        };
        let eval = ChunkEval {
            token_logprobs,
            entropies,
            value_scalar: vs[0],
            value_vector: vv,
        };
        (cache, eval)
    }

    /// Log-probabilities of given chunks, one `C x M` vector per chunk.
    pub fn evaluate_logprobs(&self, obs: &[Observation], chunks: &[ActionChunk]) -> Vec<Vec<f64>> {
        obs.iter()
            .zip(chunks)
            .map(|(o, c)| {
                self.forward_chunk(o.features(), &c.flat_tokens())
                    .1
                    .token_logprobs
            })
            .collect()
    }

    /// Raw head output: length 1 for the scalar head, `C` for the vector head.
    pub fn value(&self, obs: &[Observation], head: ValueHeadKind) -> Vec<Vec<f64>> {
        obs.iter()
            .map(|o| {
                let h = self.trunk_feature(o);
                let layout = match head {
                    ValueHeadKind::Scalar => &self.layout.scalar,
                    ValueHeadKind::Vector => &self.layout.vector,
                };
                self.value_forward(layout, &h).1
            })
            .collect()
    }

    /// Like [`PolicyNet::value`], but checks the head against the configured value level.
    pub fn value_for_level(
        &self,
        obs: &[Observation],
        head: ValueHeadKind,
        level: Level,
    ) -> Result<Vec<Vec<f64>>, PolicyError> {
        if ValueHeadKind::for_level(level) != head {
            return Err(PolicyError::HeadMismatch { head, level });
        }
        Ok(self.value(obs, head))
    }

    /// Both heads from one trunk pass.
    pub fn values_both(&self, obs: &Observation) -> (f64, Vec<f64>) {
        let h = self.trunk_feature(obs);
        let s = self.value_forward(&self.layout.scalar, &h).1[0];
        let v = self.value_forward(&self.layout.vector, &h).1;
        (s, v)
    }

    /// Evaluates `loss` against a fresh tape and returns the loss with its exact gradient.
    pub fn grad<F>(&self, loss: F) -> Result<(f64, Vec<f64>), PolicyError>
    where
        F: FnOnce(&mut Tape<'_>) -> f64,
    {
        let mut tape = Tape {
            net: self,
            caches: Vec::new(),
            seeds: Vec::new(),
            theta_seed: None,
        };
        let value = loss(&mut tape);
        let mut grad = tape
            .theta_seed
            .take()
            .unwrap_or_else(|| vec![0.0; self.theta.len()]);
        for (cache, seed) in tape.caches.iter().zip(&tape.seeds) {
            self.backward_chunk(cache, seed, &mut grad);
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(PolicyError::NonFinite(i));
        }
        Ok((value, grad))
    }

    fn value_backward(
        &self,
        v: &ValueLayout,
        cache: &ValueCache,
        h: &[f64],
        d_out: &[f64],
        grad: &mut [f64],
        dh: &mut [f64],
    ) {
        if d_out.iter().all(|&g| g == 0.0) {
            return;
        }
        let mut dz2 = vec![0.0; v.l2.rows];
        matvec_backward(&self.theta, grad, v.out, &cache.z2, d_out, Some(&mut dz2));
        for (g, z) in dz2.iter_mut().zip(&cache.z2) {
            *g *= 1.0 - z * z;
        }
        let mut dz1 = vec![0.0; v.l1.rows];
        matvec_backward(&self.theta, grad, v.l2, &cache.z1, &dz2, Some(&mut dz1));
        for (g, z) in dz1.iter_mut().zip(&cache.z1) {
            *g *= 1.0 - z * z;
        }
        matvec_backward(&self.theta, grad, v.l1, h, &dz1, Some(dh));
    }

    fn backward_chunk(&self, cache: &ChunkCache, seed: &ChunkSeed, grad: &mut [f64]) {
        let v = self.arch.vocab_size;
        let w0 = self.arch.trunk_widths[0];
        let hdim = self.arch.feature_dim();
        let p = cache.positions.len();
        // Input-layer pre-activation gradient per position, needed for the
        // prefix embeddings, which feed every later position.
        let mut d_pre0: Vec<Vec<f64>> = Vec::with_capacity(p);
        for (pos, pc) in cache.positions.iter().enumerate() {
            let g_lp = seed.d_logprob[pos];
            let g_h = seed.d_entropy[pos];
            let mut dh = vec![0.0; hdim];
            let h = pc.acts.last().unwrap();
            if g_lp != 0.0 || g_h != 0.0 {
                let tok = cache.tokens[pos] as usize;
                let ent = -pc.log_probs.iter().map(|l| l.exp() * l).sum::<f64>();
                let dlogits: Vec<f64> = pc
                    .log_probs
                    .iter()
                    .enumerate()
                    .map(|(k, &l)| {
                        let pk = l.exp();
                        let onehot = if k == tok { 1.0 } else { 0.0 };
                        g_lp * (onehot - pk) - g_h * pk * (l + ent)
                    })
                    .collect();
                let d = Dense {
                    w: self.layout.head_w + pos * v * hdim,
                    b: self.layout.head_b + pos * v,
                    rows: v,
                    cols: hdim,
                };
                matvec_backward(&self.theta, grad, d, h, &dlogits, Some(&mut dh));
            }
            if pos == 0 {
                let vs = [seed.d_value_scalar];
                self.value_backward(&self.layout.scalar, &cache.scalar, h, &vs, grad, &mut dh);
                self.value_backward(
                    &self.layout.vector,
                    &cache.vector,
                    h,
                    &seed.d_value_vector,
                    grad,
                    &mut dh,
                );
            }
            // Back through the trunk.
            let mut dcur = dh;
            for (l, d) in self.layout.trunk.iter().enumerate().rev() {
                let a = &pc.acts[l + 1];
                for (g, x) in dcur.iter_mut().zip(a) {
                    *g *= 1.0 - x * x;
                }
                let mut dprev = vec![0.0; d.cols];
                matvec_backward(&self.theta, grad, *d, &pc.acts[l], &dcur, Some(&mut dprev));
                dcur = dprev;
            }
            for (g, x) in dcur.iter_mut().zip(&pc.acts[0]) {
                *g *= 1.0 - x * x;
            }
            d_pre0.push(dcur);
        }
        for (pos, dpre) in d_pre0.iter().enumerate() {
            if dpre.iter().all(|&g| g == 0.0) {
                continue;
            }
            matvec_backward(&self.theta, grad, self.layout.input, &cache.obs, dpre, None);
            let pe = self.layout.pos_emb + pos * w0;
            for i in 0..w0 {
                grad[pe + i] += dpre[i];
            }
            for q in 0..pos {
                let off = self.layout.tok_emb + (q * v + cache.tokens[q] as usize) * w0;
                for i in 0..w0 {
                    grad[off + i] += dpre[i];
                }
            }
        }
    }

    pub fn save<W: Write>(&self, w: W) -> Result<(), PolicyError> {
        checkpoint::save(self, w)
    }

    pub fn load<R: Read>(r: R) -> Result<Self, PolicyError> {
        checkpoint::load(r)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Row-major `rows x cols` matrix with orthonormal rows (or columns, when taller than wide).
fn orthogonal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (n, k) = if rows <= cols {
        (rows, cols)
    } else {
        (cols, rows)
    };
    // n orthonormal vectors of length k via modified Gram-Schmidt.
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(n);
    while vecs.len() < n {
        let mut v: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        for u in &vecs {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            vecs.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut m = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            m[r * cols + c] = if rows <= cols { vecs[r][c] } else { vecs[c][r] };
        }
    }
    m
}

#[cfg(test)]
mod tests;
