//! Full and LSH-bucketed attention with shared query/key vectors.
//!
//! Both attention kinds reduce to a sparse *plan*: for each query, the list of
//! keys it attends to and their softmax weights. The graph op in
//! [`crate::autograd`] executes a plan forward and backward, so LSH and full
//! attention share a single differentiation path.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::reformer::ReformerConfig;
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

/// Attended keys and weights for every query of one head, in CSR layout.
///
/// Queries with an empty key range attend to themselves with weight one.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadPlan {
    pub offsets: Vec<usize>,
    pub keys: Vec<u32>,
    pub weights: Vec<f64>,
    dropout: Option<Vec<f64>>,
}

impl HeadPlan {
    pub fn queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn entries(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.offsets[i]..self.offsets[i + 1]).map(|k| (self.keys[k] as usize, self.weights[k]))
    }

    pub(crate) fn dropout_factor(&self, k: usize) -> f64 {
        self.dropout.as_ref().map_or(1.0, |d| d[k])
    }

    pub(crate) fn effective_weight(&self, k: usize) -> f64 {
        self.weights[k] * self.dropout_factor(k)
    }

    /// Drops attention weights with probability `p`, rescaling survivors.
    pub fn apply_dropout(&mut self, p: f64, rng: &mut Rng) {
        if p <= 0.0 {
            return;
        }
        use rand::Rng as _;
        let keep = 1.0 / (1.0 - p);
        self.dropout = Some(
            (0..self.keys.len())
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect(),
        );
    }
}

/// Counters for attention work.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionInstrumentation {
    /// Number of (query, key) scores evaluated.
    pub pairs_computed: u64,
    /// Largest number of scores held at once (one chunk of one round).
    pub peak_score_buffer: u64,
}

impl AttentionInstrumentation {
    fn record_block(&mut self, scores: u64) {
        self.pairs_computed += scores;
        self.peak_score_buffer = self.peak_score_buffer.max(scores);
    }
}

/// Hashing and chunking parameters for LSH attention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LshSettings {
    /// Fixed bucket count, or `None` for `2 * ceil(L / chunk_size)`.
    pub n_buckets: Option<usize>,
    pub n_rounds: usize,
    pub chunk_size: usize,
}

impl LshSettings {
    pub fn buckets_for(&self, len: usize) -> usize {
        self.n_buckets
            .unwrap_or_else(|| 2 * len.div_ceil(self.chunk_size).max(1))
    }
}

/// Seed for the random rotation of one hash round of one layer.
pub fn round_seed(model_seed: u64, layer: usize, round: usize) -> u64 {
    derive_seed(model_seed, &format!("lsh/layer{layer}/round{round}"))
}

/// Gaussian projection `[d_head, half]`, orthonormalized in blocks of
/// `d_head` columns. With `half <= d_head` this is a true rotation and buckets
/// are exactly uniform for isotropic input; wider projections stack several
/// independent frames, so every column still has unit length.
fn random_rotation(d_head: usize, half: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut rot: Vec<f64> = (0..d_head * half)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    for k in 0..half {
        let frame = k - k % d_head;
        for j in frame..k {
            let dot: f64 = (0..d_head).map(|c| rot[c * half + k] * rot[c * half + j]).sum();
            for c in 0..d_head {
                rot[c * half + k] -= dot * rot[c * half + j];
            }
        }
        let norm = (0..d_head).map(|c| rot[c * half + k].powi(2)).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for c in 0..d_head {
                rot[c * half + k] /= norm;
            }
        }
    }
    rot
}

/// Buckets rows `x[i*stride + offset .. + d_head]` with a shared rotation.
fn hash_rows(x: &[f64], len: usize, stride: usize, offset: usize, d_head: usize, n_buckets: usize, seed: u64) -> Vec<usize> {
    let half = n_buckets / 2;
    let rot = random_rotation(d_head, half, seed);
    let mut proj = vec![0.0; half];
    (0..len)
        .map(|i| {
            let row = &x[i * stride + offset..i * stride + offset + d_head];
            proj.iter_mut().for_each(|p| *p = 0.0);
            for (c, &xc) in row.iter().enumerate() {
                let r = &rot[c * half..(c + 1) * half];
                for (p, rv) in proj.iter_mut().zip(r) {
                    *p += xc * rv;
                }
            }
            // argmax over [xR ; -xR], first index on ties
            let mut best = 0;
            let mut best_val = f64::NEG_INFINITY;
            for (b, &p) in proj.iter().enumerate() {
                if p > best_val {
                    best_val = p;
                    best = b;
                }
            }
            for (b, &p) in proj.iter().enumerate() {
                if -p > best_val {
                    best_val = -p;
                    best = b + half;
                }
            }
            best
        })
        .collect()
}

/// Random-rotation LSH: bucket ids for each row of `x[L, d_head]`.
pub fn hash_vectors(x: &Tensor, n_buckets: usize, round_seed: u64) -> Result<Vec<usize>> {
    if n_buckets < 2 || !n_buckets.is_multiple_of(2) {
        return Err(Error::config("n_buckets", format!("must be even and at least 2, got {n_buckets}")));
    }
    if x.rank() != 2 {
        return Err(Error::Shape(format!("hash_vectors expects [L, d_head], got {:?}", x.shape())));
    }
    let d = x.cols();
    Ok(hash_rows(x.data(), x.rows(), d, 0, d, n_buckets, round_seed))
}

fn logsumexp(scores: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = scores.clone().fold(f64::NEG_INFINITY, f64::max);
    max + scores.map(|s| (s - max).exp()).sum::<f64>().ln()
}

/// Builds a full-attention plan for one head.
fn full_head_plan(x: &[f64], len: usize, stride: usize, offset: usize, d_head: usize, key_valid: &[bool], exclude_self: bool, instr: &mut AttentionInstrumentation) -> HeadPlan {
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut offsets = vec![0];
    let mut keys = Vec::new();
    let mut weights = Vec::new();
    let mut scores = Vec::new();
    let mut block = 0u64;
    for i in 0..len {
        let qi = &x[i * stride + offset..i * stride + offset + d_head];
        scores.clear();
        for j in 0..len {
            if !key_valid[j] || (exclude_self && j == i) {
                continue;
            }
            let kj = &x[j * stride + offset..j * stride + offset + d_head];
            scores.push((j, dot(qi, kj) * scale));
        }
        block += scores.len() as u64;
        if !scores.is_empty() {
            let lse = logsumexp(scores.iter().map(|s| s.1));
            for &(j, s) in &scores {
                keys.push(j as u32);
                weights.push((s - lse).exp());
            }
        }
        offsets.push(keys.len());
    }
    instr.record_block(block);
    HeadPlan {
        offsets,
        keys,
        weights,
        dropout: None,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Attention restricted to one hash round, normalized within the round.
#[derive(Clone, Debug)]
pub struct RoundAttention {
    pub buckets: Vec<usize>,
    pub offsets: Vec<usize>,
    pub keys: Vec<u32>,
    /// Raw scores, aligned with `keys`.
    pub scores: Vec<f64>,
    /// Softmax weights within the round; each nonempty query sums to one.
    pub weights: Vec<f64>,
    /// Log of the softmax normalizer per query; `None` when nothing is attended.
    pub lse: Vec<Option<f64>>,
}

/// Computes one hash round: hash, stable sort by (bucket, position), chunk,
/// and attend to same-bucket keys in the own and previous chunk.
#[allow(clippy::too_many_arguments)]
fn lsh_round(x: &[f64], len: usize, stride: usize, offset: usize, d_head: usize, key_valid: &[bool], n_buckets: usize, chunk: usize, seed: u64, instr: &mut AttentionInstrumentation) -> RoundAttention {
    let scale = 1.0 / (d_head as f64).sqrt();
    let buckets = hash_rows(x, len, stride, offset, d_head, n_buckets, seed);
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by_key(|&i| (buckets[i], i));

    let mut per_query: Vec<Vec<(u32, f64)>> = vec![Vec::new(); len];
    let n_chunks = len.div_ceil(chunk);
    for c in 0..n_chunks {
        let lo = c * chunk;
        let hi = ((c + 1) * chunk).min(len);
        let win_lo = lo.saturating_sub(chunk);
        let mut block = 0u64;
        for s in lo..hi {
            let i = order[s];
            let b = buckets[i];
            let qi = &x[i * stride + offset..i * stride + offset + d_head];
            let list = &mut per_query[i];
            for &j in &order[win_lo..hi] {
                if buckets[j] != b || j == i || !key_valid[j] {
                    continue;
                }
                let kj = &x[j * stride + offset..j * stride + offset + d_head];
                list.push((j as u32, dot(qi, kj) * scale));
            }
            block += list.len() as u64;
        }
        instr.record_block(block);
    }

    let mut offsets = vec![0];
    let mut keys = Vec::new();
    let mut scores = Vec::new();
    let mut weights = Vec::new();
    let mut lse = Vec::with_capacity(len);
    for list in per_query {
        if list.is_empty() {
            lse.push(None);
        } else {
            let l = logsumexp(list.iter().map(|e| e.1));
            for (j, s) in list {
                keys.push(j);
                scores.push(s);
                weights.push((s - l).exp());
            }
            lse.push(Some(l));
        }
        offsets.push(keys.len());
    }
    RoundAttention {
        buckets,
        offsets,
        keys,
        scores,
        weights,
        lse,
    }
}

/// Mixes rounds: each round's output is weighted by `exp(lse_r - logsumexp_r lse_r)`.
/// The result is a single plan whose weights are the per-round weights times
/// the round mixing weight.
pub fn combine_rounds(rounds: &[RoundAttention]) -> HeadPlan {
    let len = rounds.first().map_or(0, |r| r.lse.len());
    let mut offsets = vec![0];
    let mut keys = Vec::new();
    let mut weights = Vec::new();
    for i in 0..len {
        let present: Vec<f64> = rounds.iter().filter_map(|r| r.lse[i]).collect();
        if !present.is_empty() {
            let total = logsumexp(present.iter().copied());
            for r in rounds {
                if let Some(l) = r.lse[i] {
                    let mix = (l - total).exp();
                    for k in r.offsets[i]..r.offsets[i + 1] {
                        keys.push(r.keys[k]);
                        weights.push(mix * r.weights[k]);
                    }
                }
            }
        }
        offsets.push(keys.len());
    }
    HeadPlan {
        offsets,
        keys,
        weights,
        dropout: None,
    }
}

/// Which attention a model layer computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Lsh,
    Full,
}

/// Builds per-head plans for a `[L, n_heads * d_head]` shared-QK matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn head_plans(qk: &[f64], len: usize, d_model: usize, n_heads: usize, key_valid: &[bool], kind: AttentionKind, lsh: &LshSettings, model_seed: u64, layer: usize, instr: &mut AttentionInstrumentation) -> Vec<HeadPlan> {
    let d_head = d_model / n_heads;
    (0..n_heads)
        .map(|h| {
            let off = h * d_head;
            match kind {
                AttentionKind::Full => full_head_plan(qk, len, d_model, off, d_head, key_valid, true, instr),
                AttentionKind::Lsh => {
                    let nb = lsh.buckets_for(len);
                    let rounds: Vec<RoundAttention> = (0..lsh.n_rounds)
                        .map(|r| lsh_round(qk, len, d_model, off, d_head, key_valid, nb, lsh.chunk_size, round_seed(model_seed, layer, r), instr))
                        .collect();
                    combine_rounds(&rounds)
                }
            }
        })
        .collect()
}

fn check_pair(qk: &Tensor, v: &Tensor) -> Result<()> {
    if qk.rank() != 2 || qk.shape() != v.shape() {
        return Err(Error::shape(qk.shape(), v.shape(), "attention qk/v"));
    }
    Ok(())
}

fn execute(plan: &HeadPlan, v: &Tensor) -> Tensor {
    let d = v.cols();
    let mut out = vec![0.0; v.numel()];
    for i in 0..plan.queries() {
        let orow = &mut out[i * d..(i + 1) * d];
        if plan.offsets[i] == plan.offsets[i + 1] {
            orow.copy_from_slice(v.row(i));
        }
        for (j, w) in plan.entries(i) {
            for (o, x) in orow.iter_mut().zip(v.row(j)) {
                *o += w * x;
            }
        }
    }
    Tensor::new(v.shape().to_vec(), out).expect("attention output shape")
}

/// Dense softmax attention for one head: `softmax(qk·qkᵀ/√d)·v`, optionally
/// masking each position from attending to itself.
pub fn full_attention(qk: &Tensor, v: &Tensor, exclude_self: bool) -> Result<Tensor> {
    check_pair(qk, v)?;
    let (l, d) = (qk.rows(), qk.cols());
    let valid = vec![true; l];
    let mut instr = AttentionInstrumentation::default();
    let plan = full_head_plan(qk.data(), l, d, 0, d, &valid, exclude_self, &mut instr);
    Ok(execute(&plan, v))
}

/// Single-head LSH attention using the hash settings of `cfg` (layer 0 seeds).
pub fn lsh_attention(qk: &Tensor, v: &Tensor, cfg: &ReformerConfig, instr: &mut AttentionInstrumentation) -> Result<Tensor> {
    check_pair(qk, v)?;
    let l = qk.rows();
    if l > cfg.max_seq_len {
        return Err(Error::Length {
            len: l,
            max: cfg.max_seq_len,
        });
    }
    let lsh = cfg.lsh_settings();
    let nb = lsh.buckets_for(l);
    if nb < 2 || !nb.is_multiple_of(2) {
        return Err(Error::config("n_buckets", format!("must be even and at least 2, got {nb}")));
    }
    let valid = vec![true; l];
    let rounds = lsh_rounds(qk, &valid, &lsh, cfg.seed, 0, instr)?;
    Ok(execute(&combine_rounds(&rounds), v))
}

/// The individual hash rounds of single-head LSH attention, before mixing.
pub fn lsh_rounds(qk: &Tensor, key_valid: &[bool], lsh: &LshSettings, model_seed: u64, layer: usize, instr: &mut AttentionInstrumentation) -> Result<Vec<RoundAttention>> {
    let (l, d) = (qk.rows(), qk.cols());
    if key_valid.len() != l {
        return Err(Error::Shape("key mask length".into()));
    }
    let nb = lsh.buckets_for(l);
    Ok((0..lsh.n_rounds)
        .map(|r| lsh_round(qk.data(), l, d, 0, d, key_valid, nb, lsh.chunk_size, round_seed(model_seed, layer, r), instr))
        .collect())
}
