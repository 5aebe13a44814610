//! End-to-end runs shared by the command-line driver and the benchmarks:
//! pretraining with a metrics stream, and tagger fine-tuning / evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::{make_batches, Batch};
use crate::electra::{pretrain, MetricsLine, Trainer, METRICS_HEADER};
use crate::error::{Error, Result};
use crate::ner::data::{to_examples, NerExample, WordExample};
use crate::ner::metrics::{evaluate_ner, MetricsReport};
use crate::ner::model::{finetune, load_ner_checkpoint, ner_checkpoint, FinetuneOptions, NerModel};
use crate::params::ParamStore;
use crate::tokenizer::{train_bpe, TrainOptions, Vocab};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.rlct";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const NER_CHECKPOINT_FILE: &str = "ner.rlct";
pub const DEV_FILE: &str = "dev_f1.csv";

pub fn train_vocab<S: AsRef<str>>(cfg: &RunConfig, docs: &[S]) -> Result<Vocab> {
    train_bpe(
        docs.iter().map(|d| d.as_ref()),
        &TrainOptions {
            vocab_size: cfg.model.vocab_size,
            lowercase: cfg.lowercase,
            ..TrainOptions::default()
        },
    )
}

#[derive(Debug)]
pub struct PretrainReport {
    pub lines: Vec<MetricsLine>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Pretrains on `docs` (consumed in order; the first `step` batches are
/// skipped when resuming so the data stream continues where it stopped) and
/// writes the metrics stream, final checkpoint, vocabulary and config
/// snapshot into `out`.
pub fn run_pretraining<I>(cfg: &RunConfig, vocab: &Vocab, docs: I, eval_docs: &[String], out: &Path, resume: Option<&Checkpoint>) -> Result<PretrainReport>
where
    I: Iterator<Item = String>,
{
    std::fs::create_dir_all(out)?;
    cfg.write_snapshot(out)?;
    vocab.save(&out.join(VOCAB_FILE))?;
    let specials = vocab.specials();
    let mut trainer = match resume {
        Some(c) => {
            let t = Trainer::resume(cfg.schedule.clone(), specials, c)?;
            if t.model.cfg.discriminator.vocab_size != vocab.len() {
                return Err(Error::config("vocab", "checkpoint and vocabulary sizes differ"));
            }
            t
        }
        None => Trainer::new(cfg.electra_config(vocab.len()), cfg.schedule.clone(), specials)?,
    };
    let max_len = trainer.model.cfg.discriminator.max_seq_len;
    let eval: Vec<Batch> = make_batches(eval_docs.iter().cloned(), vocab, cfg.schedule.batch_size, max_len).collect();
    let skip = trainer.step as usize;
    let batches = make_batches(docs, vocab, cfg.schedule.batch_size, max_len).skip(skip);

    let metrics_path = out.join(METRICS_FILE);
    let mut w = BufWriter::new(File::create(&metrics_path)?);
    writeln!(w, "{METRICS_HEADER}")?;
    let lines = pretrain(&mut trainer, batches, &eval, cfg.eval_every, cfg.seed, |line, _| {
        writeln!(w, "{}", line.to_csv())?;
        w.flush()?;
        log::info!(
            "step {} gen_acc {:.4} disc_acc {:.4} gen_loss {:.4} disc_loss {:.4}",
            line.step,
            line.eval.gen_mlm_accuracy,
            line.eval.disc_accuracy,
            line.eval.gen_loss,
            line.eval.disc_loss
        );
        Ok(())
    })?;
    drop(w);
    if trainer.step < trainer.schedule.total_steps {
        log::warn!("corpus ended at step {} of {}", trainer.step, trainer.schedule.total_steps);
    }
    let ckpt = out.join(CHECKPOINT_FILE);
    trainer.to_checkpoint().save(&ckpt)?;
    Ok(PretrainReport {
        lines,
        checkpoint: ckpt,
        metrics: metrics_path,
    })
}

pub fn finetune_options(cfg: &RunConfig) -> FinetuneOptions {
    FinetuneOptions {
        epochs: cfg.ner.epochs,
        batch_size: cfg.ner.batch_size,
        lr: cfg.ner.lr,
        max_len: cfg.ner.max_len,
        stride: cfg.ner.stride,
        optimizer: cfg.schedule.optimizer,
        grad_clip: cfg.schedule.grad_clip,
        shift_positions: true,
        seed: cfg.seed,
    }
}

#[derive(Debug)]
pub struct FinetuneReport {
    pub model: NerModel,
    pub store: ParamStore,
    pub best_epoch: usize,
    pub dev_f1: Vec<f64>,
    pub checkpoint: PathBuf,
}

/// Fine-tunes a tagger from a pretraining checkpoint and writes the selected
/// model, the per-epoch dev f1 and a config snapshot into `out`.
pub fn run_finetuning(cfg: &RunConfig, vocab: &Vocab, pretrained: &Checkpoint, train: &[WordExample], dev: &[WordExample], out: &Path) -> Result<FinetuneReport> {
    std::fs::create_dir_all(out)?;
    cfg.write_snapshot(out)?;
    let body = crate::reformer::ReformerConfig::read_meta(pretrained, "discriminator")?;
    if body.vocab_size != vocab.len() {
        return Err(Error::config("vocab", "checkpoint and vocabulary sizes differ"));
    }
    let model = NerModel::new(body, cfg.ner.labels, vocab.specials())?;
    let store = model.from_pretrained(pretrained, cfg.seed)?;
    let train = to_examples(train, vocab, "train")?;
    let dev = to_examples(dev, vocab, "dev")?;
    let opts = finetune_options(cfg);
    let outcome = finetune(&model, store, &train, &dev, &opts, |epoch, f1| log::info!("epoch {epoch} dev f1 {f1:.4}"))?;
    let mut csv = String::from("epoch,dev_f1\n");
    for (e, f) in outcome.dev_f1.iter().enumerate() {
        csv.push_str(&format!("{e},{f:.6}\n"));
    }
    std::fs::write(out.join(DEV_FILE), csv)?;
    let ckpt = out.join(NER_CHECKPOINT_FILE);
    ner_checkpoint(&model, &outcome.store).save(&ckpt)?;
    Ok(FinetuneReport {
        model,
        store: outcome.store,
        best_epoch: outcome.best_epoch,
        dev_f1: outcome.dev_f1,
        checkpoint: ckpt,
    })
}

pub fn load_tagger(path: &Path, vocab: &Vocab) -> Result<(NerModel, ParamStore)> {
    load_ner_checkpoint(&Checkpoint::load(path)?, vocab.specials())
}

/// Predicts every example and scores against its gold tags.
pub fn evaluate_tagger(model: &NerModel, store: &ParamStore, examples: &[NerExample], max_len: usize, stride: usize) -> Result<MetricsReport> {
    let mut pred = Vec::with_capacity(examples.len());
    let mut gold = Vec::with_capacity(examples.len());
    for ex in examples {
        pred.push(model.predict_spans(store, &ex.tokens.ids, max_len, stride)?);
        gold.push(ex.spans());
    }
    evaluate_ner(&pred, &gold)
}
