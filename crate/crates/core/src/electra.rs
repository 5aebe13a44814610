//! Replaced-token-detection pretraining: a small generator fills masked
//! positions and a discriminator labels every token as original or replaced.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;

use crate::attention::AttentionInstrumentation;
use crate::autograd::{softmax_in_place, Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::optim::{lr_at, AdamW, TrainSchedule};
use crate::params::{Binding, ParamStore};
use crate::reformer::{Mode, ReformerConfig, ReformerModel, INIT_STD};
use crate::rng::{derive_seed, rng_for, u64_from_chunks, u64_to_chunks, Rng, RngState};
use crate::tensor::Tensor;
use crate::tokenizer::SpecialIds;

pub const GENERATOR: &str = "generator.";
pub const DISCRIMINATOR: &str = "discriminator.";

#[derive(Clone, Debug, PartialEq)]
pub struct ElectraConfig {
    pub generator: ReformerConfig,
    pub discriminator: ReformerConfig,
    pub mask_prob: f64,
    /// Weight λ of the discriminator loss in `gen_loss + λ·disc_loss`.
    pub disc_weight: f64,
    pub tie_embeddings: bool,
    pub seed: u64,
}

/// A generator shaped like `disc` but `ratio` as wide (heads and FFN scaled
/// too). Its token table keeps the discriminator's width so it can be tied.
pub fn scaled_generator(disc: &ReformerConfig, ratio: f64) -> ReformerConfig {
    let scale = |v: usize| ((v as f64 * ratio).round() as usize).max(1);
    let n_heads = scale(disc.n_heads);
    let mut d_model = scale(disc.d_model);
    d_model = d_model.div_ceil(n_heads) * n_heads;
    ReformerConfig {
        d_model,
        n_heads,
        d_ffn: scale(disc.d_ffn),
        embedding_dim: disc.embedding_dim,
        ..disc.clone()
    }
}

impl Default for ElectraConfig {
    fn default() -> Self {
        let disc = ReformerConfig::default();
        ElectraConfig::new(scaled_generator(&disc, 0.25), disc, 0)
    }
}

impl ElectraConfig {
    /// Builds a config whose two encoders get LSH seeds derived from `seed`.
    pub fn new(mut generator: ReformerConfig, mut discriminator: ReformerConfig, seed: u64) -> Self {
        generator.seed = derive_seed(seed, "lsh.generator");
        discriminator.seed = derive_seed(seed, "lsh.discriminator");
        ElectraConfig {
            generator,
            discriminator,
            mask_prob: 0.15,
            disc_weight: 50.0,
            tie_embeddings: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.generator.vocab_size != self.discriminator.vocab_size {
            return Err(Error::config("vocab_size", "generator and discriminator vocabularies differ"));
        }
        if self.generator.max_seq_len != self.discriminator.max_seq_len {
            return Err(Error::config("max_seq_len", "generator and discriminator lengths differ"));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::config("mask_prob", format!("must lie in [0, 1], got {}", self.mask_prob)));
        }
        if !(self.disc_weight >= 0.0 && self.disc_weight.is_finite()) {
            return Err(Error::config("disc_weight", "must be a nonnegative finite number"));
        }
        if self.tie_embeddings && self.generator.embedding_dim != self.discriminator.embedding_dim {
            return Err(Error::config("tie_embeddings", "tied tables need equal embedding widths"));
        }
        Ok(())
    }

    /// Stores both encoder configs and the objective settings as exact records.
    pub fn write_meta(&self, ckpt: &mut Checkpoint) {
        self.generator.write_meta(ckpt, "generator");
        self.discriminator.write_meta(ckpt, "discriminator");
        ckpt.insert_f64s("meta.electra", &[self.mask_prob, self.disc_weight]);
        ckpt.insert_u64s("meta.electra.flags", &[self.tie_embeddings as u64, self.seed]);
    }

    pub fn read_meta(ckpt: &Checkpoint) -> Result<Self> {
        let f = ckpt.get_f64s("meta.electra")?;
        let u = ckpt.get_u64s("meta.electra.flags")?;
        if f.len() != 2 || u.len() != 2 {
            return Err(Error::Format("malformed meta.electra records".into()));
        }
        Ok(ElectraConfig {
            generator: ReformerConfig::read_meta(ckpt, "generator")?,
            discriminator: ReformerConfig::read_meta(ckpt, "discriminator")?,
            mask_prob: f[0],
            disc_weight: f[1],
            tie_embeddings: u[0] != 0,
            seed: u[1],
        })
    }
}

/// Selects each maskable position with probability `mask_prob` and replaces it
/// with `[MASK]`. `[CLS]`, `[SEP]` and `[PAD]` are never selected.
pub fn mask_tokens(ids: &[u32], mask_prob: f64, specials: &SpecialIds, rng: &mut Rng) -> (Vec<u32>, Vec<usize>) {
    let mut corrupt = ids.to_vec();
    let mut positions = Vec::new();
    for (i, &id) in ids.iter().enumerate() {
        if specials.is_structural(id) {
            continue;
        }
        if rng.random::<f64>() < mask_prob {
            corrupt[i] = specials.mask;
            positions.push(i);
        }
    }
    (corrupt, positions)
}

/// Samples a token at every masked position from the softmax of that row of
/// `gen_logits`; other positions are copied from `corrupt`.
pub fn sample_replacements(gen_logits: &Tensor, corrupt: &[u32], masked: &[usize], rng: &mut Rng) -> Result<Vec<u32>> {
    if gen_logits.rank() != 2 || gen_logits.rows() != corrupt.len() {
        return Err(Error::Shape(format!(
            "logits {:?} do not align with {} positions",
            gen_logits.shape(),
            corrupt.len()
        )));
    }
    let mut out = corrupt.to_vec();
    for &i in masked {
        let mut probs = gen_logits.row(i).to_vec();
        softmax_in_place(&mut probs);
        let dist = WeightedIndex::new(&probs).map_err(|e| Error::Numeric(format!("generator distribution: {e}")))?;
        out[i] = dist.sample(rng) as u32;
    }
    Ok(out)
}

/// 1 where the discriminator input differs from the original, else 0.
pub fn discriminator_labels(original: &[u32], replaced: &[u32]) -> Result<Vec<u8>> {
    if original.len() != replaced.len() {
        return Err(Error::Shape(format!(
            "original has {} tokens, replaced input has {}",
            original.len(),
            replaced.len()
        )));
    }
    Ok(original.iter().zip(replaced).map(|(a, b)| u8::from(a != b)).collect())
}

/// Mean of all points within `±window/2` steps of each point.
pub fn smooth_accuracy_curve(points: &[(u64, f64)], window: u64) -> Vec<(u64, f64)> {
    let half = window / 2;
    let (mut lo, mut hi) = (0usize, 0usize);
    let mut out = Vec::with_capacity(points.len());
    for &(step, _) in points {
        while hi < points.len() && points[hi].0 <= step + half {
            hi += 1;
        }
        while points[lo].0 + half < step {
            lo += 1;
        }
        let mean = points[lo..hi].iter().map(|p| p.1).sum::<f64>() / (hi - lo) as f64;
        out.push((step, mean));
    }
    out
}

/// One training or evaluation row after corruption.
#[derive(Clone, Debug, PartialEq)]
pub struct Corruption {
    pub original: Vec<u32>,
    pub corrupt: Vec<u32>,
    pub masked: Vec<usize>,
    /// Discriminator input; filled by sampling when not fixed in advance.
    pub replaced: Option<Vec<u32>>,
    /// `false` on padding.
    pub valid: Vec<bool>,
}

impl Corruption {
    pub fn new(original: Vec<u32>, valid: Vec<bool>, mask_prob: f64, specials: &SpecialIds, rng: &mut Rng) -> Self {
        let (corrupt, masked) = mask_tokens(&original, mask_prob, specials, rng);
        Corruption {
            original,
            corrupt,
            masked,
            replaced: None,
            valid,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub gen_loss: f64,
    pub disc_loss: f64,
    pub combined_loss: f64,
    pub gen_mlm_accuracy: f64,
    pub disc_accuracy: f64,
    pub masked_positions: usize,
    /// Positions that entered the discriminator loss.
    pub disc_positions: usize,
    pub non_pad_tokens: usize,
    pub lr: f64,
}

/// Generator and discriminator sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Electra {
    pub cfg: ElectraConfig,
    pub generator: ReformerModel,
    pub discriminator: ReformerModel,
}

pub(crate) struct Losses {
    pub gen: Var,
    pub disc: Var,
    pub combined: Var,
    pub gen_correct: usize,
    pub masked: usize,
    pub disc_correct: usize,
    pub disc_positions: usize,
    pub non_pad: usize,
}

impl Electra {
    pub fn new(cfg: ElectraConfig) -> Result<Self> {
        cfg.validate()?;
        let discriminator = ReformerModel::new(cfg.discriminator.clone(), DISCRIMINATOR)?;
        let mut generator = ReformerModel::new(cfg.generator.clone(), GENERATOR)?;
        if cfg.tie_embeddings {
            generator = generator.sharing_token_embedding(discriminator.token_embedding_name());
        }
        Ok(Electra {
            cfg,
            generator,
            discriminator,
        })
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.discriminator.init_params(store, rng)?;
        self.generator.init_params(store, rng)?;
        let (g, d) = (&self.cfg.generator, &self.cfg.discriminator);
        store.init_normal("generator.head.dense.w", &[g.d_model, g.embedding_dim], INIT_STD, rng)?;
        store.init_const("generator.head.dense.b", &[g.embedding_dim], 0.0)?;
        store.init_const("generator.head.ln.gamma", &[g.embedding_dim], 1.0)?;
        store.init_const("generator.head.ln.beta", &[g.embedding_dim], 0.0)?;
        store.init_const("generator.head.bias", &[g.vocab_size], 0.0)?;
        store.init_normal("discriminator.head.dense.w", &[d.d_model, d.d_model], INIT_STD, rng)?;
        store.init_const("discriminator.head.dense.b", &[d.d_model], 0.0)?;
        store.init_normal("discriminator.head.out.w", &[d.d_model, 1], INIT_STD, rng)?;
        store.init_const("discriminator.head.out.b", &[1], 0.0)?;
        Ok(())
    }

    /// Generator logits `[L, V]` over the tied (or own) token table.
    #[allow(clippy::too_many_arguments)]
    pub fn generator_logits(&self, g: &mut Graph, bind: &mut Binding, store: &ParamStore, ids: &[u32], valid: &[bool], mode: Mode, rng: &mut Rng, instr: &mut AttentionInstrumentation) -> Result<Var> {
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let h = self.generator.forward(g, bind, store, &ids, valid, mode, rng, instr)?;
        let w = bind.named(g, store, "generator.head.dense.w")?;
        let b = bind.named(g, store, "generator.head.dense.b")?;
        let h = g.linear(h, w, b)?;
        let h = g.gelu(h);
        let gamma = bind.named(g, store, "generator.head.ln.gamma")?;
        let beta = bind.named(g, store, "generator.head.ln.beta")?;
        let h = g.layer_norm(h, gamma, beta)?;
        let table = bind.named(g, store, self.generator.token_embedding_name())?;
        let logits = g.matmul_t(h, table)?;
        let bias = bind.named(g, store, "generator.head.bias")?;
        g.add_bias(logits, bias)
    }

    /// Discriminator logits `[L, 1]`; positive means "replaced".
    #[allow(clippy::too_many_arguments)]
    pub fn discriminator_logits(&self, g: &mut Graph, bind: &mut Binding, store: &ParamStore, ids: &[u32], valid: &[bool], mode: Mode, rng: &mut Rng, instr: &mut AttentionInstrumentation) -> Result<Var> {
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let h = self.discriminator.forward(g, bind, store, &ids, valid, mode, rng, instr)?;
        let w = bind.named(g, store, "discriminator.head.dense.w")?;
        let b = bind.named(g, store, "discriminator.head.dense.b")?;
        let h = g.linear(h, w, b)?;
        let h = g.gelu(h);
        let w = bind.named(g, store, "discriminator.head.out.w")?;
        let b = bind.named(g, store, "discriminator.head.out.b")?;
        g.linear(h, w, b)
    }

    /// Builds the combined loss of a batch of corrupted rows. Rows without a
    /// fixed `replaced` input are sampled from the generator with `sampler`.
    ///
    /// Both losses are means over the whole batch: generator cross-entropy
    /// over masked positions, discriminator BCE over every non-pad position.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn losses(
        &self,
        g: &mut Graph,
        bind: &mut Binding,
        store: &ParamStore,
        rows: &mut [Corruption],
        mode: Mode,
        sampler: &mut Rng,
        dropout: &mut Rng,
        instr: &mut AttentionInstrumentation,
    ) -> Result<Losses> {
        let total_masked: usize = rows.iter().map(|r| r.masked.len()).sum();
        let total_valid: usize = rows.iter().map(|r| r.valid.iter().filter(|v| **v).count()).sum();
        let mut gen_terms = Vec::new();
        let mut disc_terms = Vec::new();
        let (mut gen_correct, mut disc_correct) = (0, 0);
        let mut disc_counted = 0;
        for row in rows.iter_mut() {
            let len = row.original.len();
            if row.corrupt.len() != len || row.valid.len() != len {
                return Err(Error::Shape("corruption row fields differ in length".into()));
            }
            // Rows are trimmed to their real tokens: padding never reaches a model.
            let n = row.valid.iter().filter(|v| **v).count();
            if row.valid[..n].iter().any(|v| !v) {
                return Err(Error::Contract("padding must trail the real tokens".into()));
            }
            let valid = &row.valid[..n];
            let logits = self.generator_logits(g, bind, store, &row.corrupt[..n], valid, mode, dropout, instr)?;
            if !row.masked.is_empty() {
                let mut targets = vec![None; n];
                for &i in &row.masked {
                    targets[i] = Some(row.original[i] as usize);
                }
                let ce = g.cross_entropy(logits, &targets)?;
                gen_terms.push(g.scale(ce, row.masked.len() as f64 / total_masked as f64));
                let lv = g.value(logits);
                let v = self.cfg.generator.vocab_size;
                for &i in &row.masked {
                    if argmax(&lv[i * v..(i + 1) * v]) == row.original[i] as usize {
                        gen_correct += 1;
                    }
                }
            }
            let replaced = match &row.replaced {
                Some(r) => r.clone(),
                None => {
                    let lt = g.tensor(logits);
                    let mut r = sample_replacements(&lt, &row.corrupt[..n], &row.masked, sampler)?;
                    r.extend_from_slice(&row.original[n..]);
                    row.replaced = Some(r.clone());
                    r
                }
            };
            let labels = discriminator_labels(&row.original, &replaced)?;
            let dl = self.discriminator_logits(g, bind, store, &replaced[..n], valid, mode, dropout, instr)?;
            let yf: Vec<f64> = labels[..n].iter().map(|&l| l as f64).collect();
            let bce = g.bce_with_logits(dl, &yf, valid)?;
            disc_counted += g.loss_positions(bce).unwrap_or(0);
            disc_terms.push(g.scale(bce, n as f64 / total_valid.max(1) as f64));
            for (i, &z) in g.value(dl).iter().enumerate() {
                if (z > 0.0) == (labels[i] == 1) {
                    disc_correct += 1;
                }
            }
        }
        let sum_terms = |g: &mut Graph, terms: Vec<Var>| -> Result<Var> {
            let mut it = terms.into_iter();
            match it.next() {
                None => Ok(g.constant(vec![], vec![0.0])),
                Some(first) => it.try_fold(first, |acc, t| g.add(acc, t)),
            }
        };
        let gen = sum_terms(g, gen_terms)?;
        let disc = sum_terms(g, disc_terms)?;
        let weighted = g.scale(disc, self.cfg.disc_weight);
        let combined = g.add(gen, weighted)?;
        Ok(Losses {
            gen,
            disc,
            combined,
            gen_correct,
            masked: total_masked,
            disc_correct,
            disc_positions: disc_counted,
            non_pad: total_valid,
        })
    }

    /// Gradient-check entry point: combined loss of fixed corrupted rows with
    /// `param` bound to `x`. Dropout must be off in both configs.
    pub fn combined_loss_with(&self, g: &mut Graph, store: &ParamStore, rows: &[Corruption], param: &str, x: Var) -> Result<Var> {
        if rows.iter().any(|r| r.replaced.is_none()) {
            return Err(Error::Contract("rows need fixed replacements".into()));
        }
        let mut bind = Binding::new();
        bind.insert(store.id(param)?, x);
        let mut rows = rows.to_vec();
        let mut unused = rng_for(0, "unused");
        let mut dropout = rng_for(0, "unused");
        let mut instr = AttentionInstrumentation::default();
        Ok(self
            .losses(g, &mut bind, store, &mut rows, Mode::Eval, &mut unused, &mut dropout, &mut instr)?
            .combined)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Losses and accuracies of an evaluation pass (no parameter update).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalMetrics {
    pub gen_loss: f64,
    pub disc_loss: f64,
    pub gen_mlm_accuracy: f64,
    pub disc_accuracy: f64,
}

/// Owns the parameters, optimizer and random streams of a pretraining run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Electra,
    pub store: ParamStore,
    pub schedule: TrainSchedule,
    pub opt: AdamW,
    pub step: u64,
    specials: SpecialIds,
    mask_rng: Rng,
    sample_rng: Rng,
    dropout_rng: Rng,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Trainer {
    pub fn new(cfg: ElectraConfig, schedule: TrainSchedule, specials: SpecialIds) -> Result<Self> {
        schedule.validate()?;
        let model = Electra::new(cfg)?;
        let seed = model.cfg.seed;
        let mut store = ParamStore::new();
        model.init_params(&mut store, &mut rng_for(seed, "init"))?;
        let opt = AdamW::new(schedule.optimizer, &store);
        Ok(Trainer {
            model,
            store,
            schedule,
            opt,
            step: 0,
            specials,
            mask_rng: rng_for(seed, "masking"),
            sample_rng: rng_for(seed, "sampling"),
            dropout_rng: rng_for(seed, "dropout"),
        })
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    fn check_lengths(&self, batch: &Batch) -> Result<()> {
        let max = self.model.cfg.discriminator.max_seq_len;
        if let Some(row) = batch.ids.iter().find(|r| r.len() > max) {
            return Err(Error::Length { len: row.len(), max });
        }
        Ok(())
    }

    /// Masks, samples, scores and updates once. The schedule learning rate of
    /// update `step + 1` is used.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        self.check_lengths(batch)?;
        let step = self.step + 1;
        let lr = lr_at(step, &self.schedule)?;
        let mut rows: Vec<Corruption> = batch
            .ids
            .iter()
            .zip(&batch.mask)
            .map(|(ids, m)| Corruption::new(ids.clone(), m.clone(), self.model.cfg.mask_prob, &self.specials, &mut self.mask_rng))
            .collect();
        let mut g = Graph::new();
        let mut bind = Binding::new();
        let mut instr = AttentionInstrumentation::default();
        let l = self.model.losses(
            &mut g,
            &mut bind,
            &self.store,
            &mut rows,
            Mode::Train,
            &mut self.sample_rng,
            &mut self.dropout_rng,
            &mut instr,
        )?;
        let (gen_loss, disc_loss, combined) = (g.scalar(l.gen), g.scalar(l.disc), g.scalar(l.combined));
        if !combined.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        g.check_finite()
            .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
        g.backward(l.combined)?;
        bind.accumulate_grads(&g, &mut self.store);
        AdamW::clip_grad_norm(&mut self.store, self.schedule.grad_clip);
        self.opt.step(&mut self.store, lr);
        self.step = step;
        Ok(StepMetrics {
            step,
            gen_loss,
            disc_loss,
            combined_loss: combined,
            gen_mlm_accuracy: ratio(l.gen_correct, l.masked),
            disc_accuracy: ratio(l.disc_correct, l.disc_positions),
            masked_positions: l.masked,
            disc_positions: l.disc_positions,
            non_pad_tokens: l.non_pad,
            lr,
        })
    }

    /// Scores `batches` in eval mode with masking and sampling streams derived
    /// from `seed`, so repeated calls see identical corruption.
    pub fn evaluate(&self, batches: &[Batch], seed: u64) -> Result<EvalMetrics> {
        let mut mask_rng = rng_for(seed, "eval.masking");
        let mut sample_rng = rng_for(seed, "eval.sampling");
        let mut dropout = rng_for(seed, "eval.dropout");
        let (mut gl, mut dl, mut gc, mut m, mut dc, mut dp, mut n) = (0.0, 0.0, 0, 0, 0, 0, 0);
        for batch in batches {
            self.check_lengths(batch)?;
            let mut rows: Vec<Corruption> = batch
                .ids
                .iter()
                .zip(&batch.mask)
                .map(|(ids, mk)| Corruption::new(ids.clone(), mk.clone(), self.model.cfg.mask_prob, &self.specials, &mut mask_rng))
                .collect();
            let mut g = Graph::new();
            let mut bind = Binding::new();
            let mut instr = AttentionInstrumentation::default();
            let l = self.model.losses(&mut g, &mut bind, &self.store, &mut rows, Mode::Eval, &mut sample_rng, &mut dropout, &mut instr)?;
            gl += g.scalar(l.gen);
            dl += g.scalar(l.disc);
            gc += l.gen_correct;
            m += l.masked;
            dc += l.disc_correct;
            dp += l.disc_positions;
            n += 1;
        }
        let n = n.max(1) as f64;
        Ok(EvalMetrics {
            gen_loss: gl / n,
            disc_loss: dl / n,
            gen_mlm_accuracy: ratio(gc, m),
            disc_accuracy: ratio(dc, dp),
        })
    }

    /// Parameters, optimizer moments, step counter and RNG streams.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert_values("step", &u64_to_chunks(self.step));
        c.insert_values("adam.t", &u64_to_chunks(self.opt.t));
        self.model.cfg.write_meta(&mut c);
        c.add_params(&self.store, "");
        for (k, id) in self.store.ids().enumerate() {
            let t = self.store.tensor(id);
            let name = self.store.name(id);
            c.insert(&format!("adam.m.{name}"), &Tensor::new(t.shape().to_vec(), self.opt.m[k].clone()).expect("moment shape"));
            c.insert(&format!("adam.v.{name}"), &Tensor::new(t.shape().to_vec(), self.opt.v[k].clone()).expect("moment shape"));
        }
        for (name, rng) in [("masking", &self.mask_rng), ("sampling", &self.sample_rng), ("dropout", &self.dropout_rng)] {
            c.insert_values(&format!("rng.{name}"), &RngState::capture(rng).to_chunks());
        }
        c
    }

    /// Restores a trainer from [`Trainer::to_checkpoint`] output.
    pub fn from_checkpoint(cfg: ElectraConfig, schedule: TrainSchedule, specials: SpecialIds, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(cfg, schedule, specials)?;
        ckpt.load_params(&mut t.store, "")?;
        let chunks = |name: &str| -> Result<Vec<f64>> { Ok(ckpt.require(name)?.data().to_vec()) };
        let bad = |name: &str| Error::Format(format!("malformed checkpoint record {name}"));
        t.step = u64_from_chunks(&chunks("step")?).ok_or_else(|| bad("step"))?;
        t.opt.t = u64_from_chunks(&chunks("adam.t")?).ok_or_else(|| bad("adam.t"))?;
        let ids: Vec<_> = t.store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let name = t.store.name(id).to_string();
            for (prefix, slot) in [("adam.m.", &mut t.opt.m[k]), ("adam.v.", &mut t.opt.v[k])] {
                let rec = ckpt.require(&format!("{prefix}{name}"))?;
                if rec.numel() != slot.len() {
                    return Err(bad(&format!("{prefix}{name}")));
                }
                slot.copy_from_slice(rec.data());
            }
        }
        for (name, rng) in [("masking", &mut t.mask_rng), ("sampling", &mut t.sample_rng), ("dropout", &mut t.dropout_rng)] {
            let key = format!("rng.{name}");
            *rng = RngState::from_chunks(&chunks(&key)?).ok_or_else(|| bad(&key))?.restore();
        }
        Ok(t)
    }

    /// Like [`Trainer::from_checkpoint`] with the model config read back from
    /// the checkpoint.
    pub fn resume(schedule: TrainSchedule, specials: SpecialIds, ckpt: &Checkpoint) -> Result<Self> {
        Trainer::from_checkpoint(ElectraConfig::read_meta(ckpt)?, schedule, specials, ckpt)
    }
}

/// One line of the metrics stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsLine {
    pub step: u64,
    pub eval: EvalMetrics,
}

pub const METRICS_HEADER: &str = "step,gen_loss,disc_loss,gen_acc,disc_acc";

impl MetricsLine {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.step, self.eval.gen_loss, self.eval.disc_loss, self.eval.gen_mlm_accuracy, self.eval.disc_accuracy
        )
    }
}

/// Runs `trainer` until the schedule ends or `batches` is exhausted,
/// evaluating on `eval` every `eval_every` steps (and at step 0). `sink`
/// receives each metrics line as soon as it is computed.
pub fn pretrain<I, F>(trainer: &mut Trainer, batches: I, eval: &[Batch], eval_every: u64, eval_seed: u64, mut sink: F) -> Result<Vec<MetricsLine>>
where
    I: IntoIterator<Item = Batch>,
    F: FnMut(&MetricsLine, Option<&StepMetrics>) -> Result<()>,
{
    let every = eval_every.max(1);
    let mut lines = Vec::new();
    let mut emit = |trainer: &Trainer, last: Option<&StepMetrics>, lines: &mut Vec<MetricsLine>| -> Result<()> {
        let line = MetricsLine {
            step: trainer.step,
            eval: trainer.evaluate(eval, eval_seed)?,
        };
        sink(&line, last)?;
        lines.push(line);
        Ok(())
    };
    if trainer.step.is_multiple_of(every) {
        emit(trainer, None, &mut lines)?;
    }
    for batch in batches {
        if trainer.step >= trainer.schedule.total_steps {
            break;
        }
        let m = trainer.train_step(&batch)?;
        if trainer.step.is_multiple_of(every) {
            emit(trainer, Some(&m), &mut lines)?;
        }
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::SpecialIds;

    const SP: SpecialIds = SpecialIds::DEFAULT;

    #[test]
    fn masking_edge_probabilities() {
        let ids = vec![SP.cls, 7, 8, 9, SP.sep, SP.pad];
        let mut rng = rng_for(1, "m");
        let (c, p) = mask_tokens(&ids, 0.0, &SP, &mut rng);
        assert_eq!(c, ids);
        assert!(p.is_empty());
        let (c, p) = mask_tokens(&ids, 1.0, &SP, &mut rng);
        assert_eq!(p, vec![1, 2, 3]);
        assert_eq!(c, vec![SP.cls, SP.mask, SP.mask, SP.mask, SP.sep, SP.pad]);
    }

    #[test]
    fn masking_rate() {
        let mut rng = rng_for(2, "m");
        let ids: Vec<u32> = (0..10_000).map(|i| 5 + (i % 20)).collect();
        let (_, p) = mask_tokens(&ids, 0.15, &SP, &mut rng);
        let frac = p.len() as f64 / 10_000.0;
        assert!((0.14..=0.16).contains(&frac), "{frac}");
    }

    #[test]
    fn sampling_cases() {
        let ninf = f64::NEG_INFINITY;
        let logits = Tensor::new(vec![2, 3], vec![0.0, ninf, ninf, ninf, ninf, 0.0]).unwrap();
        let mut rng = rng_for(3, "s");
        // certain on the original (0 then 2)
        let r = sample_replacements(&logits, &[4, 4], &[0, 1], &mut rng).unwrap();
        assert_eq!(r, vec![0, 2]);
        let uniform = Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap();
        let hits = (0..10_000)
            .filter(|_| sample_replacements(&uniform, &[4], &[0], &mut rng).unwrap()[0] == 0)
            .count();
        assert!((hits as f64 / 10_000.0 - 0.25).abs() <= 0.02);
    }

    #[test]
    fn labels() {
        assert_eq!(discriminator_labels(&[5, 6, 7], &[5, 9, 7]).unwrap(), vec![0, 1, 0]);
        assert_eq!(discriminator_labels(&[5, 6], &[5, 6]).unwrap(), vec![0, 0]);
        assert!(matches!(discriminator_labels(&[1], &[1, 2]), Err(Error::Shape(_))));
    }

    #[test]
    fn smoothing() {
        let c: Vec<(u64, f64)> = (0..50).map(|i| (i, 0.3)).collect();
        assert!(smooth_accuracy_curve(&c, 200).iter().all(|p| (p.1 - 0.3).abs() < 1e-12));
        assert_eq!(smooth_accuracy_curve(&[(5, 0.7)], 200), vec![(5, 0.7)]);
        let alt: Vec<(u64, f64)> = (0..400).map(|i| (i, (i % 2) as f64)).collect();
        let s = smooth_accuracy_curve(&alt, 200);
        for p in &s[100..300] {
            assert!((p.1 - 0.5).abs() <= 0.01);
        }
    }

    fn tiny_cfg() -> ElectraConfig {
        let disc = ReformerConfig::tiny(16);
        let gen = scaled_generator(&disc, 0.5);
        ElectraConfig::new(gen, disc, 9)
    }

    fn toy_batch() -> Batch {
        Batch::from_rows(vec![vec![SP.cls, 6, 7, 8, 9, SP.sep], vec![SP.cls, 10, 11, SP.sep]], SP.pad)
    }

    #[test]
    fn lambda_zero_and_no_masking() {
        let mut cfg = tiny_cfg();
        cfg.disc_weight = 0.0;
        let sched = TrainSchedule {
            total_steps: 10,
            warmup_steps: 2,
            phase_switch_step: 5,
            ..TrainSchedule::default()
        };
        let mut t = Trainer::new(cfg.clone(), sched.clone(), SP).unwrap();
        let m = t.train_step(&toy_batch()).unwrap();
        assert_eq!(m.combined_loss, m.gen_loss);
        assert_eq!(m.disc_positions, 10);

        cfg.disc_weight = 50.0;
        cfg.mask_prob = 0.0;
        let mut t = Trainer::new(cfg, sched, SP).unwrap();
        let m = t.train_step(&toy_batch()).unwrap();
        assert_eq!(m.gen_loss, 0.0);
        assert_eq!(m.masked_positions, 0);
        assert!((m.combined_loss - 50.0 * m.disc_loss).abs() < 1e-12);
    }

    #[test]
    fn tied_embedding_is_one_parameter() {
        let t = Trainer::new(tiny_cfg(), TrainSchedule::default(), SP).unwrap();
        assert!(t.store.contains("discriminator.embed.tok"));
        assert!(!t.store.contains("generator.embed.tok"));
        assert_eq!(t.model.generator.token_embedding_name(), "discriminator.embed.tok");
    }

    #[test]
    fn over_length_rejected() {
        let mut t = Trainer::new(tiny_cfg(), TrainSchedule::default(), SP).unwrap();
        let b = Batch::from_rows(vec![vec![6; 100]], SP.pad);
        assert!(matches!(t.train_step(&b), Err(Error::Length { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let sched = TrainSchedule {
            total_steps: 10,
            warmup_steps: 2,
            phase_switch_step: 5,
            ..TrainSchedule::default()
        };
        let mut t = Trainer::new(tiny_cfg(), sched.clone(), SP).unwrap();
        t.train_step(&toy_batch()).unwrap();
        let c = t.to_checkpoint();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        let r = Trainer::from_checkpoint(tiny_cfg(), sched.clone(), SP, &back).unwrap();
        assert_eq!(r.step, 1);
        assert_eq!(r.to_checkpoint(), c);
        assert_eq!(ElectraConfig::read_meta(&back).unwrap(), tiny_cfg());
        assert_eq!(Trainer::resume(sched, SP, &back).unwrap().to_checkpoint(), c);
    }
}
