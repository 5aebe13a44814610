//! `relectra` — one binary for the whole pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 numeric failure. Progress goes to stderr (level from `RELECTRA_LOG`),
//! results to stdout or the `--out` location.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use relectra::checkpoint::Checkpoint;
use relectra::config::{parse_config, RunConfig};
use relectra::corpus::{load_documents, mix_corpora, parse_manifest, CleanOptions, CorpusSource, Domain};
use relectra::ner::bio::{bio_encode, LabelSet, Tag};
use relectra::ner::data::{parse_conll, to_examples, write_conll, WordExample};
use relectra::ner::metrics::evaluate_ner;
use relectra::ner::{auto_annotate, parse_wordlists, Parties};
use relectra::pipeline;
use relectra::rng::rng_for;
use relectra::tokenizer::{evaluate_tokenization, train_bpe, TrainOptions, Vocab};
use relectra::{Error, Result};

#[derive(Parser)]
#[command(name = "relectra", version, about = "LSH-attention ELECTRA pretraining, BPE tokenizer and NER pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a BPE vocabulary on a text file or directory.
    TrainTokenizer {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = relectra::tokenizer::DEFAULT_VOCAB_SIZE)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Keep case instead of lowercasing.
        #[arg(long)]
        cased: bool,
    },
    /// Pretrain generator and discriminator.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of documents, or one holding a `manifest` file.
        #[arg(long)]
        corpus_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune a tagger on CoNLL data from a pretraining checkpoint.
    FinetuneNer {
        #[arg(long)]
        pretrained: PathBuf,
        /// Defaults to `vocab.txt` next to the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        labels: Option<LabelSet>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Score a tagger (or a prediction file) against gold CoNLL data.
    EvalNer {
        /// Tagger checkpoint; omit to score `--predicted` directly.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predicted: Option<PathBuf>,
        #[arg(long)]
        labels: Option<LabelSet>,
        #[arg(long, default_value_t = 1536)]
        max_len: usize,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tag party names and case-type phrases by string matching.
    AutoAnnotate {
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        wordlists: PathBuf,
        #[arg(long = "plaintiff")]
        plaintiffs: Vec<String>,
        #[arg(long = "defendant")]
        defendants: Vec<String>,
        #[arg(long, default_value_t = 1)]
        max_edit: usize,
        #[arg(long, default_value = "legal")]
        labels: LabelSet,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Count words a vocabulary fails to keep whole.
    EvalTokenizer {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        abbreviations: Option<PathBuf>,
        #[arg(long)]
        legal_lexicon: Option<PathBuf>,
        #[arg(long)]
        medical_lexicon: Option<PathBuf>,
    },
    /// List the records of a checkpoint.
    InspectCheckpoint {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RELECTRA_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainTokenizer {
            corpus,
            vocab_size,
            out,
            cased,
        } => {
            let opts = CleanOptions::default();
            let docs: Vec<String> = load_documents(&corpus)?
                .iter()
                .map(|d| relectra::corpus::clean_text(d, &opts))
                .collect();
            let vocab = train_bpe(
                docs.iter(),
                &TrainOptions {
                    vocab_size,
                    lowercase: !cased,
                    ..TrainOptions::default()
                },
            )?;
            vocab.save(&out)?;
            log::info!("{} tokens, {} merges -> {}", vocab.len(), vocab.merges().len(), out.display());
            Ok(())
        }
        Command::Pretrain {
            config,
            corpus_dir,
            out,
            resume,
            seed,
        } => pretrain(config, corpus_dir, out, resume, seed),
        Command::FinetuneNer {
            pretrained,
            vocab,
            train,
            dev,
            out,
            config,
            labels,
            seed,
            epochs,
            lr,
            max_len,
            stride,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(l) = labels {
                cfg.ner.labels = l;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.ner.epochs = e;
            }
            if let Some(lr) = lr {
                cfg.ner.lr = lr;
            }
            if let Some(m) = max_len {
                cfg.ner.max_len = m;
            }
            if stride.is_some() {
                cfg.ner.stride = stride;
            }
            cfg.output_dir = Some(out.clone());
            let ckpt = Checkpoint::load(&pretrained)?;
            let vocab = Vocab::load(&vocab.unwrap_or_else(|| sibling(&pretrained, pipeline::VOCAB_FILE)))?;
            let train = read_conll(&train)?;
            let dev = read_conll(&dev)?;
            let report = pipeline::run_finetuning(&cfg, &vocab, &ckpt, &train, &dev, &out)?;
            println!(
                "best_epoch\t{}\nbest_dev_f1\t{:.6}\ncheckpoint\t{}",
                report.best_epoch,
                report.dev_f1[report.best_epoch],
                report.checkpoint.display()
            );
            Ok(())
        }
        Command::EvalNer {
            model,
            vocab,
            data,
            predicted,
            labels,
            max_len,
            stride,
            out,
        } => {
            let gold = read_conll(&data)?;
            let report = match (model, predicted) {
                (Some(m), None) => {
                    let vocab = Vocab::load(&vocab.unwrap_or_else(|| sibling(&m, pipeline::VOCAB_FILE)))?;
                    let (model, store) = pipeline::load_tagger(&m, &vocab)?;
                    if labels.is_some_and(|l| l != model.labels) {
                        return Err(Error::config("labels", format!("the model was trained with {} labels", model.labels)));
                    }
                    let examples = to_examples(&gold, &vocab, "eval")?;
                    let stride = stride.unwrap_or((max_len.saturating_sub(2) / 2).max(1));
                    pipeline::evaluate_tagger(&model, &store, &examples, max_len, stride)?
                }
                (None, Some(p)) => {
                    let pred = read_conll(&p)?;
                    if pred.len() != gold.len() {
                        return Err(Error::Data(format!("{} predicted vs {} gold examples", pred.len(), gold.len())));
                    }
                    let spans = |ex: &[WordExample]| -> Vec<_> {
                        ex.iter().map(|e| relectra::ner::bio_decode(&e.tags).spans).collect()
                    };
                    evaluate_ner(&spans(&pred), &spans(&gold))?
                }
                _ => return Err(Error::config("model", "give exactly one of --model and --predicted")),
            };
            emit(out.as_deref(), &report.to_table())
        }
        Command::AutoAnnotate {
            text,
            wordlists,
            plaintiffs,
            defendants,
            max_edit,
            labels,
            out,
        } => {
            let body = fs::read_to_string(&text).map_err(|e| Error::Data(format!("{}: {e}", text.display())))?;
            let lists = fs::read_to_string(&wordlists).map_err(|e| Error::Data(format!("{}: {e}", wordlists.display())))?;
            let lists = parse_wordlists(&lists)?;
            let parties = Parties {
                plaintiffs,
                defendants,
            };
            let words: Vec<String> = body.split_whitespace().map(str::to_string).collect();
            let spans = auto_annotate(&body, &parties, &lists, max_edit);
            let tags = bio_encode(&spans, words.len())?;
            if let Some(t) = tags.iter().find(|t| **t != Tag::O && labels.tag_index(**t).is_none()) {
                return Err(Error::config("labels", format!("{t} is outside the {labels} label set")));
            }
            log::info!("{} spans over {} words", spans.len(), words.len());
            emit(out.as_deref(), &write_conll(&[WordExample { words, tags }]))
        }
        Command::EvalTokenizer {
            vocab,
            text,
            abbreviations,
            legal_lexicon,
            medical_lexicon,
        } => {
            let vocab = Vocab::load(&vocab)?;
            let body = fs::read_to_string(&text).map_err(|e| Error::Data(format!("{}: {e}", text.display())))?;
            let r = evaluate_tokenization(
                &body,
                &vocab,
                &word_set(abbreviations.as_deref(), &vocab)?,
                &word_set(legal_lexicon.as_deref(), &vocab)?,
                &word_set(medical_lexicon.as_deref(), &vocab)?,
            );
            println!(
                "words\t{}\ntotal_errors\t{}\nlegal_errors\t{}\nmedical_errors\t{}\nerror_words\t{}",
                r.word_count,
                r.total_errors,
                r.legal_errors,
                r.medical_errors,
                r.error_words.join(" ")
            );
            Ok(())
        }
        Command::InspectCheckpoint { checkpoint } => {
            let c = Checkpoint::load(&checkpoint)?;
            let mut out = std::io::stdout().lock();
            let mut total = 0;
            for (name, t) in c.records() {
                total += t.numel();
                writeln!(out, "{name}\t{:?}", t.shape())?;
            }
            writeln!(out, "# {} records, {} values", c.len(), total)?;
            if let Ok(s) = c.get_u64s("step") {
                writeln!(out, "# step {}", s[0])?;
            }
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => parse_config(p),
        None => Ok(RunConfig::default()),
    }
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn read_conll(path: &Path) -> Result<Vec<WordExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_conll(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn word_set(path: Option<&Path>, vocab: &Vocab) -> Result<HashSet<String>> {
    let Some(p) = path else {
        return Ok(HashSet::new());
    };
    let text = fs::read_to_string(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
    Ok(text.split_whitespace().map(|w| vocab.normalize(w)).collect())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Sources from `corpus_manifest`, a `manifest` file inside the corpus
/// directory, or the directory itself as a single legal source.
fn corpus_sources(cfg: &RunConfig, corpus_dir: Option<&Path>) -> Result<Vec<CorpusSource>> {
    let manifest = cfg
        .corpus_manifest
        .clone()
        .or_else(|| corpus_dir.map(|d| d.join("manifest")).filter(|p| p.is_file()));
    if let Some(m) = manifest {
        let text = fs::read_to_string(&m).map_err(|e| Error::Data(format!("{}: {e}", m.display())))?;
        return parse_manifest(&text, m.parent().unwrap_or(Path::new(".")));
    }
    let dir = corpus_dir.ok_or_else(|| Error::config("corpus_manifest", "no --corpus-dir and no manifest configured"))?;
    Ok(vec![CorpusSource {
        name: "corpus".into(),
        domain: Domain::Legal,
        path: dir.to_path_buf(),
        weight: 1.0,
    }])
}

fn pretrain(config: Option<PathBuf>, corpus_dir: Option<PathBuf>, out: Option<PathBuf>, resume: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if out.is_some() {
        cfg.output_dir = out;
    }
    let out = cfg
        .output_dir
        .clone()
        .ok_or_else(|| Error::config("output_dir", "give --out or set output_dir"))?;
    let sources = corpus_sources(&cfg, corpus_dir.as_deref())?;
    let clean = CleanOptions::default();
    let vocab = match &cfg.vocab {
        Some(p) => Vocab::load(p)?,
        None => {
            let mut docs = Vec::new();
            for s in &sources {
                docs.extend(load_documents(&s.path)?.iter().map(|d| relectra::corpus::clean_text(d, &clean)));
            }
            let v = pipeline::train_vocab(&cfg, &docs)?;
            log::info!("trained a {}-token vocabulary", v.len());
            v
        }
    };
    let eval: Vec<String> = mix_corpora(&sources, rng_for(cfg.seed, "corpus.eval"), &clean)?
        .take(cfg.eval_documents)
        .collect();
    let stream = mix_corpora(&sources, rng_for(cfg.seed, "corpus.train"), &clean)?;
    let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
    let report = pipeline::run_pretraining(&cfg, &vocab, stream, &eval, &out, resume.as_ref())?;
    println!("metrics\t{}\ncheckpoint\t{}", report.metrics.display(), report.checkpoint.display());
    Ok(())
}
