//! Token classifier on top of the pretrained discriminator body.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::attention::AttentionInstrumentation;
use crate::autograd::{softmax_in_place, Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::electra::DISCRIMINATOR;
use crate::error::{Error, Result};
use crate::ner::bio::{bio_decode, EntitySpan, LabelSet, Tag};
use crate::ner::chunking::{chunk_with_stride, merge_window_predictions, Window};
use crate::ner::data::NerExample;
use crate::ner::metrics::evaluate_ner;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Binding, ParamStore};
use crate::reformer::{Mode, ReformerConfig, ReformerModel, INIT_STD};
use crate::rng::{rng_for, Rng};
use crate::tokenizer::SpecialIds;

pub const HEAD_W: &str = "ner.head.w";
pub const HEAD_B: &str = "ner.head.b";
pub const DEFAULT_MAX_LEN: usize = 1536;

#[derive(Clone, Debug)]
pub struct NerModel {
    pub encoder: ReformerModel,
    pub labels: LabelSet,
    pub specials: SpecialIds,
}

impl NerModel {
    pub fn new(cfg: ReformerConfig, labels: LabelSet, specials: SpecialIds) -> Result<Self> {
        Ok(NerModel {
            encoder: ReformerModel::new(cfg, DISCRIMINATOR)?,
            labels,
            specials,
        })
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.encoder.init_params(store, rng)?;
        self.init_head(store, rng)
    }

    fn init_head(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        let d = self.encoder.cfg.d_model;
        store.init_normal(HEAD_W, &[d, self.labels.num_tags()], INIT_STD, rng)?;
        store.init_const(HEAD_B, &[self.labels.num_tags()], 0.0)?;
        Ok(())
    }

    /// Discriminator body from `pretrained` plus a fresh classification head.
    pub fn from_pretrained(&self, pretrained: &Checkpoint, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "ner.init");
        self.encoder.init_params(&mut store, &mut rng)?;
        pretrained.load_params_matching(&mut store, DISCRIMINATOR)?;
        self.init_head(&mut store, &mut rng_for(seed, "ner.head"))?;
        Ok(store)
    }

    /// Tag logits `[L, num_tags]` for a full model input.
    #[allow(clippy::too_many_arguments)]
    pub fn logits(&self, g: &mut Graph, bind: &mut Binding, store: &ParamStore, ids: &[u32], pos_start: usize, mode: Mode, rng: &mut Rng) -> Result<Var> {
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let valid = vec![true; ids.len()];
        let mut instr = AttentionInstrumentation::default();
        let h = self.encoder.forward_at(g, bind, store, &ids, &valid, pos_start, mode, rng, &mut instr)?;
        let w = bind.named(g, store, HEAD_W)?;
        let b = bind.named(g, store, HEAD_B)?;
        g.linear(h, w, b)
    }

    fn wrap(&self, body: &[u32]) -> Vec<u32> {
        let mut ids = Vec::with_capacity(body.len() + 2);
        ids.push(self.specials.cls);
        ids.extend_from_slice(body);
        ids.push(self.specials.sep);
        ids
    }

    /// Tag probabilities for each body token of one window (eval mode).
    pub fn window_scores(&self, store: &ParamStore, body: &[u32]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let mut bind = Binding::new();
        let mut unused = rng_for(0, "eval");
        let z = self.logits(&mut g, &mut bind, store, &self.wrap(body), 0, Mode::Eval, &mut unused)?;
        let t = g.tensor(z);
        Ok((1..=body.len())
            .map(|i| {
                let mut row = t.row(i).to_vec();
                softmax_in_place(&mut row);
                row
            })
            .collect())
    }

    /// Predicts tags for a document of any length. Windows hold
    /// `max_len - 2` body tokens (room for `[CLS]`/`[SEP]`) and advance by
    /// `stride`; overlapping predictions are merged by distance to the edge.
    pub fn predict(&self, store: &ParamStore, body: &[u32], max_len: usize, stride: usize) -> Result<Vec<Tag>> {
        if body.is_empty() {
            return Ok(Vec::new());
        }
        let windows = body_windows(body.len(), max_len, stride)?;
        let mut scored: Vec<(Window, Vec<usize>)> = Vec::with_capacity(windows.len());
        for w in windows {
            let scores = self.window_scores(store, &body[w.start..w.end])?;
            scored.push((w, scores.iter().map(|s| argmax(s)).collect()));
        }
        let merged = merge_window_predictions(&scored, body.len())?;
        Ok(merged.into_iter().map(|i| self.labels.tag_at(i).unwrap_or(Tag::O)).collect())
    }

    pub fn predict_spans(&self, store: &ParamStore, body: &[u32], max_len: usize, stride: usize) -> Result<Vec<EntitySpan>> {
        Ok(bio_decode(&self.predict(store, body, max_len, stride)?).spans)
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

/// Windows over body tokens for a model input limit of `max_len`.
pub fn body_windows(len: usize, max_len: usize, stride: usize) -> Result<Vec<Window>> {
    if max_len < 3 {
        return Err(Error::config("max_len", "must leave room for [CLS] and [SEP]"));
    }
    chunk_with_stride(len, max_len - 2, stride)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_len: usize,
    /// Defaults to half the window.
    pub stride: Option<usize>,
    pub optimizer: AdamWConfig,
    pub grad_clip: f64,
    /// Place each training window at a random absolute position so every
    /// position row up to `max_len` is trained.
    pub shift_positions: bool,
    pub seed: u64,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        FinetuneOptions {
            epochs: 10,
            batch_size: 1,
            lr: 3e-5,
            max_len: DEFAULT_MAX_LEN,
            stride: None,
            optimizer: AdamWConfig::default(),
            grad_clip: 1.0,
            shift_positions: true,
            seed: 0,
        }
    }
}

impl FinetuneOptions {
    pub fn stride(&self) -> usize {
        self.stride.unwrap_or((self.max_len.saturating_sub(2) / 2).max(1))
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Parameters of the epoch with the best dev f1 (earliest on ties;
    /// epoch 0 is the initial model).
    pub store: ParamStore,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    /// Dev overall f1 after each epoch, starting with the initial model.
    pub dev_f1: Vec<f64>,
}

pub fn dev_f1(model: &NerModel, store: &ParamStore, dev: &[NerExample], max_len: usize, stride: usize) -> Result<f64> {
    let mut pred = Vec::with_capacity(dev.len());
    let mut gold = Vec::with_capacity(dev.len());
    for ex in dev {
        pred.push(model.predict_spans(store, &ex.tokens.ids, max_len, stride)?);
        gold.push(ex.spans());
    }
    Ok(evaluate_ner(&pred, &gold)?.overall.f1)
}

/// Trains body and head with per-token cross-entropy, keeping the epoch with
/// the best dev f1. `log` receives `(epoch, dev_f1)` after each evaluation.
pub fn finetune(
    model: &NerModel,
    store: ParamStore,
    train: &[NerExample],
    dev: &[NerExample],
    opts: &FinetuneOptions,
    mut log: impl FnMut(usize, f64),
) -> Result<FinetuneOutcome> {
    if opts.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let stride = opts.stride();
    let max_body = opts.max_len.saturating_sub(2);
    if max_body + 2 > model.encoder.cfg.max_seq_len {
        return Err(Error::config(
            "max_len",
            format!("{} exceeds the encoder limit {}", opts.max_len, model.encoder.cfg.max_seq_len),
        ));
    }
    for ex in dev {
        ex.tag_indices(model.labels)?;
    }
    // Training windows: (ids with specials, targets).
    let mut instances: Vec<(Vec<u32>, Vec<Option<usize>>)> = Vec::new();
    for ex in train {
        let tags = ex.tag_indices(model.labels)?;
        if ex.is_empty() {
            continue;
        }
        for w in body_windows(ex.len(), opts.max_len, stride)? {
            let ids = model.wrap(&ex.tokens.ids[w.start..w.end]);
            let mut targets = vec![None];
            targets.extend(tags[w.start..w.end].iter().map(|&t| Some(t)));
            targets.push(None);
            instances.push((ids, targets));
        }
    }

    let mut store = store;
    let mut opt = AdamW::new(opts.optimizer, &store);
    let mut order_rng = rng_for(opts.seed, "ner.order");
    let mut pos_rng = rng_for(opts.seed, "ner.positions");
    let mut dropout_rng = rng_for(opts.seed, "ner.dropout");

    let f0 = dev_f1(model, &store, dev, opts.max_len, stride)?;
    log(0, f0);
    let mut best = (0, f0, store.clone());
    let mut history = vec![f0];
    let mut order: Vec<usize> = (0..instances.len()).collect();
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut order_rng);
        for batch in order.chunks(opts.batch_size) {
            for &k in batch {
                let (ids, targets) = &instances[k];
                let room = model.encoder.cfg.max_seq_len.min(opts.max_len) - ids.len();
                let pos = if opts.shift_positions && room > 0 {
                    pos_rng.random_range(0..=room)
                } else {
                    0
                };
                let mut g = Graph::new();
                let mut bind = Binding::new();
                let z = model.logits(&mut g, &mut bind, &store, ids, pos, Mode::Train, &mut dropout_rng)?;
                let ce = g.cross_entropy(z, targets)?;
                let loss = g.scale(ce, 1.0 / batch.len() as f64);
                if !g.scalar(loss).is_finite() {
                    return Err(Error::Numeric(format!("non-finite NER loss in epoch {epoch}")));
                }
                g.check_finite()?;
                g.backward(loss)?;
                bind.accumulate_grads(&g, &mut store);
            }
            AdamW::clip_grad_norm(&mut store, opts.grad_clip);
            opt.step(&mut store, opts.lr);
        }
        let f = dev_f1(model, &store, dev, opts.max_len, stride)?;
        log(epoch, f);
        history.push(f);
        if f > best.1 {
            best = (epoch, f, store.clone());
        }
    }
    Ok(FinetuneOutcome {
        store: best.2,
        best_epoch: best.0,
        best_dev_f1: best.1,
        dev_f1: history,
    })
}

/// Checkpoint of a fine-tuned tagger: parameters, encoder config and label set.
pub fn ner_checkpoint(model: &NerModel, store: &ParamStore) -> Checkpoint {
    let mut c = Checkpoint::new();
    c.add_params(store, "");
    model.encoder.cfg.write_meta(&mut c, "discriminator");
    c.insert_u64s(
        "meta.ner.labels",
        &[match model.labels {
            LabelSet::Legal => 0,
            LabelSet::Mixed => 1,
        }],
    );
    c
}

/// Rebuilds a tagger saved by [`ner_checkpoint`].
pub fn load_ner_checkpoint(ckpt: &Checkpoint, specials: SpecialIds) -> Result<(NerModel, ParamStore)> {
    let cfg = ReformerConfig::read_meta(ckpt, "discriminator")?;
    let labels = match ckpt.get_u64s("meta.ner.labels")?.first() {
        Some(0) => LabelSet::Legal,
        Some(1) => LabelSet::Mixed,
        _ => return Err(Error::Format("bad meta.ner.labels record".into())),
    };
    let model = NerModel::new(cfg, labels, specials)?;
    let mut store = ParamStore::new();
    model.init_params(&mut store, &mut rng_for(0, "ner.load"))?;
    ckpt.load_params(&mut store, "")?;
    Ok((model, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ner::bio::EntityLabel;
    use crate::tokenizer::TokenSequence;

    fn example(ids: Vec<u32>, tags: Vec<Tag>) -> NerExample {
        let n = ids.len();
        NerExample {
            tokens: TokenSequence {
                ids,
                offsets: vec![None; n],
            },
            tags,
            word_of: (0..n).collect(),
            source_id: "t".into(),
        }
    }

    fn tiny() -> NerModel {
        NerModel::new(ReformerConfig::tiny(16), LabelSet::Legal, SpecialIds::DEFAULT).unwrap()
    }

    #[test]
    fn zero_epochs_keeps_body() {
        let m = tiny();
        let mut store = ParamStore::new();
        m.init_params(&mut store, &mut rng_for(1, "x")).unwrap();
        let before = store.clone();
        let opts = FinetuneOptions {
            epochs: 0,
            max_len: 16,
            ..Default::default()
        };
        let out = finetune(&m, store, &[], &[], &opts, |_, _| {}).unwrap();
        assert_eq!(out.best_epoch, 0);
        assert_eq!(out.store, before);
    }

    #[test]
    fn label_mismatch_is_config_error() {
        let m = tiny();
        let mut store = ParamStore::new();
        m.init_params(&mut store, &mut rng_for(1, "x")).unwrap();
        let ex = example(vec![6, 7], vec![Tag::B(EntityLabel::Prob), Tag::O]);
        let opts = FinetuneOptions {
            max_len: 16,
            ..Default::default()
        };
        assert!(matches!(
            finetune(&m, store, &[ex], &[], &opts, |_, _| {}),
            Err(Error::Config { key, .. }) if key == "labels"
        ));
    }

    #[test]
    fn one_prediction_per_token() {
        let m = tiny();
        let mut store = ParamStore::new();
        m.init_params(&mut store, &mut rng_for(1, "x")).unwrap();
        let body: Vec<u32> = (0..40).map(|i| 5 + i % 11).collect();
        let tags = m.predict(&store, &body, 12, 5).unwrap();
        assert_eq!(tags.len(), 40);
    }

    #[test]
    fn checkpoint_restores_tagger() {
        let m = tiny();
        let mut store = ParamStore::new();
        m.init_params(&mut store, &mut rng_for(1, "x")).unwrap();
        let c = ner_checkpoint(&m, &store);
        let (m2, s2) = load_ner_checkpoint(&c, SpecialIds::DEFAULT).unwrap();
        assert_eq!(m2.encoder.cfg, m.encoder.cfg);
        assert_eq!(ner_checkpoint(&m2, &s2), c);
    }
}
