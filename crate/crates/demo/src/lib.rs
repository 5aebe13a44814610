//! Three library operations exposed to a static page through wasm-bindgen.
//! The plain functions are what the host tests call; the `#[wasm_bindgen]`
//! wrappers only flatten results into JS-friendly shapes.

use rand_distr::{Distribution, StandardNormal};
use relectra::attention::{lsh_rounds, AttentionInstrumentation, LshSettings};
use relectra::optim::{lr_at, TrainSchedule};
use relectra::rng::rng_for;
use relectra::tensor::Tensor;
use relectra::tokenizer::{train_bpe, TrainOptions};
use wasm_bindgen::prelude::*;

fn gaussian_rows(len: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, "demo.vectors");
    (0..len * dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Trains a vocabulary on `corpus` and splits `text` with it.
pub fn bpe_tokens(corpus: &str, vocab_size: usize, text: &str) -> Result<Vec<String>, String> {
    let vocab = train_bpe(
        [corpus],
        &TrainOptions {
            vocab_size,
            ..TrainOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let seq = vocab.encode(text, false);
    Ok(seq
        .ids
        .iter()
        .map(|&id| vocab.token(id).unwrap_or("?").to_string())
        .collect())
}

/// One hash round over `len` random vectors: bucket ids and the `len × len`
/// 0/1 matrix of (query, key) pairs actually scored.
#[derive(Clone, Debug, PartialEq)]
pub struct Pattern {
    pub buckets: Vec<usize>,
    pub attended: Vec<u8>,
    pub pairs: u64,
}

pub fn lsh_pattern(len: usize, dim: usize, n_buckets: usize, chunk_size: usize, seed: u64) -> Result<Pattern, String> {
    let x = Tensor::new(vec![len, dim], gaussian_rows(len, dim, seed)).map_err(|e| e.to_string())?;
    let lsh = LshSettings {
        n_buckets: Some(n_buckets),
        n_rounds: 1,
        chunk_size,
    };
    if n_buckets < 2 || !n_buckets.is_multiple_of(2) || chunk_size == 0 {
        return Err("n_buckets must be even and ≥ 2, chunk_size positive".into());
    }
    let mut instr = AttentionInstrumentation::default();
    let rounds = lsh_rounds(&x, &vec![true; len], &lsh, seed, 0, &mut instr).map_err(|e| e.to_string())?;
    let r = &rounds[0];
    let mut attended = vec![0u8; len * len];
    for i in 0..len {
        for k in r.offsets[i]..r.offsets[i + 1] {
            attended[i * len + r.keys[k] as usize] = 1;
        }
    }
    Ok(Pattern {
        buckets: r.buckets.clone(),
        attended,
        pairs: instr.pairs_computed,
    })
}

/// Learning rate at `points` evenly spaced steps of the two-phase schedule.
pub fn lr_points(total: u64, warmup: u64, switch: u64, lr1: f64, lr2: f64, points: usize) -> Result<Vec<(u64, f64)>, String> {
    let s = TrainSchedule {
        total_steps: total,
        warmup_steps: warmup,
        phase_switch_step: switch,
        lr_phase1: lr1,
        lr_phase2: lr2,
        ..TrainSchedule::default()
    };
    s.validate().map_err(|e| e.to_string())?;
    let n = points.max(2);
    (0..n)
        .map(|k| {
            let step = (k as u64 * total) / (n as u64 - 1);
            lr_at(step, &s).map(|lr| (step, lr)).map_err(|e| e.to_string())
        })
        .collect()
}

// ---- wasm surface --------------------------------------------------------

/// Tokens of `text`, newline separated (`</w>` marks word ends).
#[wasm_bindgen]
pub fn tokenize(corpus: &str, vocab_size: usize, text: &str) -> Result<String, JsError> {
    bpe_tokens(corpus, vocab_size, text)
        .map(|t| t.join("\n"))
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn buckets(len: usize, dim: usize, n_buckets: usize, chunk_size: usize, seed: u32) -> Result<Vec<u32>, JsError> {
    lsh_pattern(len, dim, n_buckets, chunk_size, seed as u64)
        .map(|p| p.buckets.iter().map(|&b| b as u32).collect())
        .map_err(|e| JsError::new(&e))
}

/// Row-major `len × len` attention mask of one hash round.
#[wasm_bindgen]
pub fn attention_pattern(len: usize, dim: usize, n_buckets: usize, chunk_size: usize, seed: u32) -> Result<Vec<u8>, JsError> {
    lsh_pattern(len, dim, n_buckets, chunk_size, seed as u64)
        .map(|p| p.attended)
        .map_err(|e| JsError::new(&e))
}

/// Interleaved `[step0, lr0, step1, lr1, …]`.
#[wasm_bindgen]
pub fn lr_curve(total: u32, warmup: u32, switch: u32, lr1: f64, lr2: f64, points: usize) -> Result<Vec<f64>, JsError> {
    lr_points(total as u64, warmup as u64, switch as u64, lr1, lr2, points)
        .map(|v| v.into_iter().flat_map(|(s, lr)| [s as f64, lr]).collect())
        .map_err(|e| JsError::new(&e))
}
