//! Flat `key = value` run configuration shared by every pipeline stage.
//!
//! Lines are `key = value`; `#` starts a comment. Every key is optional and
//! unknown keys are rejected. `preset = desk` (anywhere in the file) starts
//! from [`RunConfig::desk`] instead of the full-scale defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::AttentionKind;
use crate::electra::{scaled_generator, ElectraConfig};
use crate::error::{Error, Result};
use crate::ner::bio::LabelSet;
use crate::optim::TrainSchedule;
use crate::reformer::ReformerConfig;
use crate::tokenizer::DEFAULT_VOCAB_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Full,
    Desk,
}

/// Fine-tuning and inference settings of the tagger.
#[derive(Clone, Debug, PartialEq)]
pub struct NerSettings {
    pub labels: LabelSet,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_len: usize,
    /// `None` means half the window.
    pub stride: Option<usize>,
    pub max_edit: usize,
}

impl Default for NerSettings {
    fn default() -> Self {
        NerSettings {
            labels: LabelSet::Legal,
            epochs: 10,
            batch_size: 1,
            lr: 3e-5,
            max_len: 1536,
            stride: None,
            max_edit: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    /// Discriminator architecture; `vocab_size` is the tokenizer budget and
    /// is replaced by the trained vocabulary's size when models are built.
    pub model: ReformerConfig,
    /// Generator width relative to the discriminator.
    pub generator_ratio: f64,
    pub mask_prob: f64,
    pub disc_weight: f64,
    pub tie_embeddings: bool,
    pub schedule: TrainSchedule,
    pub eval_every: u64,
    pub eval_documents: usize,
    pub lowercase: bool,
    pub corpus_manifest: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub ner: NerSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: Preset::Full,
            seed: 0,
            model: ReformerConfig {
                vocab_size: DEFAULT_VOCAB_SIZE,
                ..ReformerConfig::default()
            },
            generator_ratio: 0.25,
            mask_prob: 0.15,
            disc_weight: 50.0,
            tie_embeddings: true,
            schedule: TrainSchedule::default(),
            eval_every: 100,
            eval_documents: 64,
            lowercase: true,
            corpus_manifest: None,
            vocab: None,
            output_dir: None,
            ner: NerSettings::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale analogue of the full recipe: 2-layer, 64-wide encoders and
    /// a 2,000-step schedule (warmup 200, switch 1,400) at the same rates.
    pub fn desk() -> Self {
        let d = RunConfig::default();
        RunConfig {
            preset: Preset::Desk,
            model: ReformerConfig {
                vocab_size: 1024,
                d_model: 64,
                embedding_dim: 64,
                n_heads: 4,
                n_layers: 2,
                d_ffn: 256,
                max_seq_len: 1536,
                n_buckets: None,
                n_hash_rounds: 2,
                chunk_size: 32,
                ..d.model
            },
            schedule: TrainSchedule {
                total_steps: 2_000,
                warmup_steps: 200,
                phase_switch_step: 1_400,
                ..d.schedule
            },
            ..d
        }
    }

    /// Model configuration for a vocabulary of `vocab_size` tokens.
    pub fn electra_config(&self, vocab_size: usize) -> ElectraConfig {
        let disc = ReformerConfig {
            vocab_size,
            ..self.model.clone()
        };
        let mut cfg = ElectraConfig::new(scaled_generator(&disc, self.generator_ratio), disc, self.seed);
        cfg.mask_prob = self.mask_prob;
        cfg.disc_weight = self.disc_weight;
        cfg.tie_embeddings = self.tie_embeddings;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.generator_ratio > 0.0 && self.generator_ratio <= 1.0) {
            return Err(Error::config("generator_ratio", "must lie in (0, 1]"));
        }
        self.electra_config(self.model.vocab_size).validate()?;
        self.schedule.validate()?;
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be positive"));
        }
        let n = &self.ner;
        if n.batch_size == 0 {
            return Err(Error::config("ner_batch_size", "must be positive"));
        }
        if n.max_len < 3 || n.max_len > self.model.max_seq_len {
            return Err(Error::config(
                "ner_max_len",
                format!("must lie in [3, max_seq_len = {}]", self.model.max_seq_len),
            ));
        }
        if let Some(s) = n.stride {
            if s == 0 || s >= n.max_len - 2 {
                return Err(Error::config("ner_stride", "must satisfy 0 < stride < ner_max_len - 2"));
            }
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let s = &mut self.schedule;
        match key {
            "preset" => {}
            "seed" => self.seed = num(key, v)?,
            "vocab_size" => m.vocab_size = num(key, v)?,
            "d_model" => m.d_model = num(key, v)?,
            "embedding_dim" => m.embedding_dim = num(key, v)?,
            "n_heads" => m.n_heads = num(key, v)?,
            "n_layers" => m.n_layers = num(key, v)?,
            "d_ffn" => m.d_ffn = num(key, v)?,
            "max_seq_len" => m.max_seq_len = num(key, v)?,
            "n_buckets" => m.n_buckets = if v == "auto" { None } else { Some(num(key, v)?) },
            "n_hash_rounds" => m.n_hash_rounds = num(key, v)?,
            "chunk_size" => m.chunk_size = num(key, v)?,
            "attention_dropout" => m.attention_dropout = num(key, v)?,
            "hidden_dropout" => m.hidden_dropout = num(key, v)?,
            "attention" => {
                m.attention = match v {
                    "lsh" => AttentionKind::Lsh,
                    "full" => AttentionKind::Full,
                    _ => return Err(Error::config(key, format!("expected lsh or full, got {v:?}"))),
                }
            }
            "generator_ratio" => self.generator_ratio = num(key, v)?,
            "mask_prob" => self.mask_prob = num(key, v)?,
            "disc_weight" => self.disc_weight = num(key, v)?,
            "tie_embeddings" => self.tie_embeddings = flag(key, v)?,
            "total_steps" => s.total_steps = num(key, v)?,
            "warmup_steps" => s.warmup_steps = num(key, v)?,
            "phase_switch_step" => s.phase_switch_step = num(key, v)?,
            "lr_phase1" => s.lr_phase1 = num(key, v)?,
            "lr_phase2" => s.lr_phase2 = num(key, v)?,
            "batch_size" => s.batch_size = num(key, v)?,
            "grad_clip" => s.grad_clip = num(key, v)?,
            "adam_beta1" => s.optimizer.beta1 = num(key, v)?,
            "adam_beta2" => s.optimizer.beta2 = num(key, v)?,
            "adam_eps" => s.optimizer.eps = num(key, v)?,
            "weight_decay" => s.optimizer.weight_decay = num(key, v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            "eval_documents" => self.eval_documents = num(key, v)?,
            "lowercase" => self.lowercase = flag(key, v)?,
            "corpus_manifest" => self.corpus_manifest = path(v),
            "vocab" => self.vocab = path(v),
            "output_dir" => self.output_dir = path(v),
            "labels" => self.ner.labels = v.parse()?,
            "ner_epochs" => self.ner.epochs = num(key, v)?,
            "ner_batch_size" => self.ner.batch_size = num(key, v)?,
            "ner_lr" => self.ner.lr = num(key, v)?,
            "ner_max_len" => self.ner.max_len = num(key, v)?,
            "ner_stride" => self.ner.stride = if v == "auto" { None } else { Some(num(key, v)?) },
            "max_edit" => self.ner.max_edit = num(key, v)?,
            _ => return Err(Error::config(key, "unknown configuration key")),
        }
        if key == "mask_prob" && !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::config(key, format!("must lie in [0, 1], got {v}")));
        }
        Ok(())
    }

    /// Every resolved value, in a form [`parse_config_str`] reads back exactly.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let s = &self.schedule;
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let auto = |v: Option<usize>| v.map_or("auto".to_string(), |v| v.to_string());
        let rows: Vec<(&str, String)> = vec![
            (
                "preset",
                match self.preset {
                    Preset::Full => "full",
                    Preset::Desk => "desk",
                }
                .into(),
            ),
            ("seed", self.seed.to_string()),
            ("vocab_size", m.vocab_size.to_string()),
            ("d_model", m.d_model.to_string()),
            ("embedding_dim", m.embedding_dim.to_string()),
            ("n_heads", m.n_heads.to_string()),
            ("n_layers", m.n_layers.to_string()),
            ("d_ffn", m.d_ffn.to_string()),
            ("max_seq_len", m.max_seq_len.to_string()),
            ("n_buckets", auto(m.n_buckets)),
            ("n_hash_rounds", m.n_hash_rounds.to_string()),
            ("chunk_size", m.chunk_size.to_string()),
            ("attention_dropout", format!("{:?}", m.attention_dropout)),
            ("hidden_dropout", format!("{:?}", m.hidden_dropout)),
            (
                "attention",
                match m.attention {
                    AttentionKind::Lsh => "lsh",
                    AttentionKind::Full => "full",
                }
                .into(),
            ),
            ("generator_ratio", format!("{:?}", self.generator_ratio)),
            ("mask_prob", format!("{:?}", self.mask_prob)),
            ("disc_weight", format!("{:?}", self.disc_weight)),
            ("tie_embeddings", self.tie_embeddings.to_string()),
            ("total_steps", s.total_steps.to_string()),
            ("warmup_steps", s.warmup_steps.to_string()),
            ("phase_switch_step", s.phase_switch_step.to_string()),
            ("lr_phase1", format!("{:?}", s.lr_phase1)),
            ("lr_phase2", format!("{:?}", s.lr_phase2)),
            ("batch_size", s.batch_size.to_string()),
            ("grad_clip", format!("{:?}", s.grad_clip)),
            ("adam_beta1", format!("{:?}", s.optimizer.beta1)),
            ("adam_beta2", format!("{:?}", s.optimizer.beta2)),
            ("adam_eps", format!("{:?}", s.optimizer.eps)),
            ("weight_decay", format!("{:?}", s.optimizer.weight_decay)),
            ("eval_every", self.eval_every.to_string()),
            ("eval_documents", self.eval_documents.to_string()),
            ("lowercase", self.lowercase.to_string()),
            ("corpus_manifest", opt(&self.corpus_manifest)),
            ("vocab", opt(&self.vocab)),
            ("output_dir", opt(&self.output_dir)),
            ("labels", self.ner.labels.to_string()),
            ("ner_epochs", self.ner.epochs.to_string()),
            ("ner_batch_size", self.ner.batch_size.to_string()),
            ("ner_lr", format!("{:?}", self.ner.lr)),
            ("ner_max_len", self.ner.max_len.to_string()),
            ("ner_stride", auto(self.ner.stride)),
            ("max_edit", self.ner.max_edit.to_string()),
        ];
        let mut out = String::from("# effective configuration\n");
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let p = dir.join("config.effective");
        std::fs::write(&p, self.to_text())?;
        Ok(p)
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, format!("cannot parse {v:?} as {}", std::any::type_name::<T>())))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got {v:?}"))),
    }
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

/// Parses configuration text and validates the result.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(line, format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if pairs.iter().any(|(key, _)| *key == k) {
            return Err(Error::config(k, format!("line {}: key given twice", n + 1)));
        }
        pairs.push((k, v));
    }
    let mut cfg = match pairs.iter().find(|(k, _)| *k == "preset") {
        None | Some((_, "full")) => RunConfig::default(),
        Some((_, "desk")) => RunConfig::desk(),
        Some((_, other)) => return Err(Error::config("preset", format!("expected full or desk, got {other:?}"))),
    };
    for (k, v) in pairs {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
    parse_config_str(&text)
}
