//! Acceptance run: one line per criterion. Expected values are computed here
//! by small independent oracles rather than by the library under test.
//!
//! `cargo test -p relectra-core --test acceptance` (takes ~20 min on one core).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use relectra::attention::{full_attention, lsh_attention, AttentionInstrumentation};
use relectra::autograd::check_gradients;
use relectra::checkpoint::Checkpoint;
use relectra::config::RunConfig;
use relectra::corpus::Batch;
use relectra::electra::{mask_tokens, scaled_generator, smooth_accuracy_curve, Corruption, Electra, ElectraConfig, Trainer};
use relectra::ner::{evaluate_ner, to_examples, EntityLabel, EntitySpan, LabelSet, NerExample};
use relectra::optim::{lr_at, TrainSchedule};
use relectra::params::ParamStore;
use relectra::pipeline;
use relectra::reformer::ReformerConfig;
use relectra::rng::{rng_for, Rng};
use relectra::synth;
use relectra::tensor::Tensor;
use relectra::tokenizer::{evaluate_tokenization, train_bpe, SpecialIds, TrainOptions, Vocab, WORD_END};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn randn(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

// ---- 1 -----------------------------------------------------------------

/// softmax(q_i·q_j/√d) over j ≠ i, straight from the definition.
fn naive_shared_qk_attention(qk: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = qk[0].len() as f64;
    let l = qk.len();
    (0..l)
        .map(|i| {
            let s: Vec<(usize, f64)> = (0..l)
                .filter(|&j| j != i)
                .map(|j| (j, qk[i].iter().zip(&qk[j]).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()))
                .collect();
            let m = s.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x.1 - m).exp()).sum();
            let mut out = vec![0.0; v[0].len()];
            for &(j, sc) in &s {
                let w = (sc - m).exp() / z;
                for (o, x) in out.iter_mut().zip(&v[j]) {
                    *o += w * x;
                }
            }
            out
        })
        .collect()
}

fn c1_degenerate_buckets() -> Outcome {
    let mut rng = rng_for(101, "acceptance.c1");
    let mut worst_full = 0.0f64;
    let mut worst_naive = 0.0f64;
    for inst in 0..50 {
        let l = rng.random_range(2..=64);
        let d = rng.random_range(2..=16);
        // rank one with positive scales: every row hashes to the same bucket
        let u = randn(&mut rng, d);
        let qk: Vec<Vec<f64>> = (0..l)
            .map(|_| {
                let c = rng.random_range(0.05..1.5);
                u.iter().map(|x| c * x).collect()
            })
            .collect();
        let v: Vec<Vec<f64>> = (0..l).map(|_| randn(&mut rng, d)).collect();
        let cfg = ReformerConfig {
            d_model: d,
            n_heads: 1,
            max_seq_len: 64,
            n_buckets: Some(2),
            n_hash_rounds: rng.random_range(1..=4),
            chunk_size: rng.random_range(l..=64),
            seed: inst,
            ..ReformerConfig::default()
        };
        let qt = Tensor::matrix(&qk).map_err(|e| e.to_string())?;
        let vt = Tensor::matrix(&v).map_err(|e| e.to_string())?;
        let mut instr = AttentionInstrumentation::default();
        let lsh = lsh_attention(&qt, &vt, &cfg, &mut instr).map_err(|e| e.to_string())?;
        let full = full_attention(&qt, &vt, true).map_err(|e| e.to_string())?;
        worst_full = worst_full.max(lsh.max_abs_diff(&full));
        let naive = naive_shared_qk_attention(&qk, &v);
        for (i, row) in naive.iter().enumerate() {
            for (a, b) in row.iter().zip(lsh.row(i)) {
                worst_naive = worst_naive.max((a - b).abs());
            }
        }
    }
    ensure(
        worst_full < 1e-6 && worst_naive < 1e-6,
        format!("50 instances, max |lsh - full| = {worst_full:.2e}, max |lsh - naive| = {worst_naive:.2e} (< 1e-6)"),
    )
}

// ---- 2 -----------------------------------------------------------------

fn c2_subquadratic() -> Outcome {
    let cfg = ReformerConfig {
        d_model: 32,
        n_heads: 1,
        max_seq_len: 8192,
        ..ReformerConfig::default()
    };
    let mut rng = rng_for(102, "acceptance.c2");
    let mut pairs = |l: usize, seed: u64| -> Result<u64, String> {
        let qk = Tensor::new(vec![l, 32], randn(&mut rng, l * 32)).map_err(|e| e.to_string())?;
        let v = qk.clone();
        let mut instr = AttentionInstrumentation::default();
        let cfg = ReformerConfig { seed, ..cfg.clone() };
        lsh_attention(&qk, &v, &cfg, &mut instr).map_err(|e| e.to_string())?;
        let bound = (cfg.n_hash_rounds * l * 2 * cfg.chunk_size) as u64;
        if instr.pairs_computed > bound {
            return Err(format!("{} pairs exceed the chunk bound {bound}", instr.pairs_computed));
        }
        Ok(instr.pairs_computed)
    };
    // five hash seeds / inputs per length, summed
    let (mut small, mut large) = (0u64, 0u64);
    for seed in 0..5 {
        small += pairs(1024, seed)?;
        large += pairs(8192, seed)?;
    }
    let ratio = large as f64 / small as f64;
    let per_query = |p: u64, l: usize| p as f64 / (5 * cfg.n_hash_rounds * l) as f64;
    ensure(
        large <= 8 * small,
        format!(
            "pairs/query/round {:.2} at L=1024, {:.2} at L=8192; ratio {ratio:.4} (≤ 8; dense 64; same-bucket expectation 8191/1023 = {:.4}), chunk {} rounds {}",
            per_query(small, 1024),
            per_query(large, 8192),
            8191.0 / 1023.0,
            cfg.chunk_size,
            cfg.n_hash_rounds
        ),
    )
}

// ---- 3 -----------------------------------------------------------------

fn c3_gradients() -> Outcome {
    let disc = ReformerConfig {
        vocab_size: 32,
        d_model: 8,
        embedding_dim: 8,
        n_heads: 2,
        n_layers: 1,
        d_ffn: 16,
        max_seq_len: 8,
        n_buckets: Some(2),
        n_hash_rounds: 2,
        chunk_size: 4,
        attention_dropout: 0.0,
        hidden_dropout: 0.0,
        ..ReformerConfig::default()
    };
    // a half-width generator: at d_model 2 layer norm is ±1 and nearly singular
    let cfg = ElectraConfig::new(scaled_generator(&disc, 0.5), disc, 3);
    let model = Electra::new(cfg).map_err(|e| e.to_string())?;
    let mut store = ParamStore::new();
    let mut rng = rng_for(103, "acceptance.c3");
    model.init_params(&mut store, &mut rng).map_err(|e| e.to_string())?;
    // Check at a generic point: with 0.02-scale weights many gradients are
    // ~1e-9 and finite differences drown in roundoff.
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let t = store.get(name).map_err(|e| e.to_string())?;
        let moved: Vec<f64> = t.data().iter().zip(randn(&mut rng, t.numel())).map(|(v, z)| v + 0.3 * z).collect();
        let moved = Tensor::new(t.shape().to_vec(), moved).map_err(|e| e.to_string())?;
        store.set_data(name, &moved).map_err(|e| e.to_string())?;
    }

    let sp = SpecialIds::DEFAULT;
    let mut rows = Vec::new();
    for n in [8usize, 6] {
        let mut ids = vec![sp.cls];
        ids.extend((0..n - 2).map(|_| rng.random_range(5..32u32)));
        ids.push(sp.sep);
        let mut valid = vec![true; n];
        ids.resize(8, sp.pad);
        valid.resize(8, false);
        let mut row = Corruption::new(ids, valid, 0.4, &sp, &mut rng);
        if row.masked.is_empty() {
            row.masked.push(1);
            row.corrupt[1] = sp.mask;
        }
        // fixed generator samples: half keep the original, half replace it
        let mut replaced = row.corrupt.clone();
        for (k, &i) in row.masked.iter().enumerate() {
            replaced[i] = if k % 2 == 0 { row.original[i] } else { 5 + (row.original[i] - 5 + 1) % 27 };
        }
        row.replaced = Some(replaced);
        rows.push(row);
    }

    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for name in &names {
        let x = store.get(name).map_err(|e| e.to_string())?.clone();
        let err = check_gradients(|g, v| model.combined_loss_with(g, &store, &rows, name, v), &x, 1e-5).map_err(|e| e.to_string())?;
        checked += x.numel();
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    ensure(
        worst.0 < 1e-4,
        format!(
            "{} tensors / {checked} scalars, max relative error {:.2e} at {} (< 1e-4)",
            names.len(),
            worst.0,
            worst.1
        ),
    )
}

// ---- 4 -----------------------------------------------------------------

/// Plain BPE: recount every adjacent pair each iteration, take the most
/// frequent (ties: lexicographically smallest pair), stop at `vocab_size`
/// tokens or when no pair occurs twice.
fn oracle_bpe(corpus: &str, vocab_size: usize, n_specials: usize) -> Vec<(String, String)> {
    let mut words: BTreeMap<Vec<String>, u64> = BTreeMap::new();
    for w in corpus.split_whitespace() {
        let mut syms: Vec<String> = w.to_lowercase().chars().map(String::from).collect();
        syms.push(WORD_END.to_string());
        *words.entry(syms).or_insert(0) += 1;
    }
    let mut tokens: HashSet<String> = words.keys().flatten().cloned().collect();
    let mut merges = Vec::new();
    while tokens.len() + n_specials < vocab_size {
        let mut counts: HashMap<(String, String), u64> = HashMap::new();
        for (syms, c) in &words {
            for p in syms.windows(2) {
                *counts.entry((p[0].clone(), p[1].clone())).or_insert(0) += c;
            }
        }
        let Some((best, c)) = counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0))) else {
            break;
        };
        if c < 2 {
            break;
        }
        let joined = format!("{}{}", best.0, best.1);
        let mut next = BTreeMap::new();
        for (syms, c) in words {
            let mut out = Vec::new();
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == best.0 && syms[i + 1] == best.1 {
                    out.push(joined.clone());
                    i += 2;
                } else {
                    out.push(syms[i].clone());
                    i += 1;
                }
            }
            *next.entry(out).or_insert(0) += c;
        }
        words = next;
        tokens.insert(joined);
        merges.push(best);
    }
    merges
}

fn random_word(rng: &mut Rng, alphabet: &[char], max_len: usize) -> String {
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
}

fn c4_bpe_oracle() -> Outcome {
    let mut rng = rng_for(104, "acceptance.c4");
    let n_specials = TrainOptions::default().specials.len();
    let mut total_merges = 0;
    let mut vocabs: Vec<(Vocab, Vec<char>)> = Vec::new();
    for k in 0..20 {
        let alphabet: Vec<char> = "abcdefgh".chars().take(rng.random_range(2..=8)).collect();
        // a small pool of words so pairs repeat
        let pool: Vec<String> = (0..rng.random_range(3..=12)).map(|_| random_word(&mut rng, &alphabet, 7)).collect();
        let n_words = rng.random_range(5..=50);
        let corpus: Vec<String> = (0..n_words).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect();
        let corpus = corpus.join(" ");
        let base = corpus.chars().filter(|c| !c.is_whitespace()).collect::<HashSet<_>>().len() + 1 + n_specials;
        let vocab_size = base + rng.random_range(0..40);
        let v = train_bpe([corpus.as_str()], &TrainOptions {
            vocab_size,
            ..TrainOptions::default()
        })
        .map_err(|e| e.to_string())?;
        let expect = oracle_bpe(&corpus, vocab_size, n_specials);
        if v.merges() != expect.as_slice() {
            return Err(format!("corpus {k}: merges differ\n  got    {:?}\n  oracle {:?}", v.merges(), expect));
        }
        total_merges += expect.len();
        let used: Vec<char> = corpus.chars().filter(|c| !c.is_whitespace()).collect::<HashSet<_>>().into_iter().collect();
        let mut used = used;
        used.sort_unstable();
        vocabs.push((v, used));
    }
    for t in 0..1000 {
        let (v, alphabet) = &vocabs[t % vocabs.len()];
        let n = rng.random_range(1..=8);
        let s: Vec<String> = (0..n).map(|_| random_word(&mut rng, alphabet, 10)).collect();
        let s = s.join(" ");
        let back = v.decode(&v.encode(&s, true).ids).map_err(|e| e.to_string())?;
        if back != s {
            return Err(format!("round trip of {s:?} gave {back:?}"));
        }
    }
    Ok(format!("20 corpora, {total_merges} merges identical to the recount oracle; 1000 round trips exact"))
}

// ---- 5 -----------------------------------------------------------------

fn c5_masking() -> Outcome {
    let sp = SpecialIds::DEFAULT;
    let mut rng = rng_for(105, "acceptance.c5");
    let (mut content, mut masked) = (0usize, 0usize);
    for _ in 0..50 {
        let mut ids = vec![sp.cls];
        ids.extend((0..200).map(|_| rng.random_range(5..1000u32)));
        ids.push(sp.sep);
        ids.extend([sp.pad; 7]);
        let (corrupt, pos) = mask_tokens(&ids, 0.15, &sp, &mut rng);
        if pos.iter().any(|&i| sp.is_structural(ids[i])) {
            return Err("a structural token was masked".into());
        }
        if pos.iter().any(|&i| corrupt[i] != sp.mask) {
            return Err("a masked position does not hold [MASK]".into());
        }
        content += 200;
        masked += pos.len();
    }
    let frac = masked as f64 / content as f64;
    ensure((0.14..=0.16).contains(&frac), format!("{masked}/{content} = {frac:.4} masked (in [0.14, 0.16])"))
}

// ---- 6 -----------------------------------------------------------------

fn c6_disc_coverage() -> Outcome {
    let disc = ReformerConfig {
        vocab_size: 60,
        max_seq_len: 64,
        ..ReformerConfig::tiny(60)
    };
    let cfg = ElectraConfig::new(scaled_generator(&disc, 0.5), disc, 6);
    let sched = TrainSchedule {
        total_steps: 200,
        warmup_steps: 10,
        phase_switch_step: 150,
        ..TrainSchedule::default()
    };
    let sp = SpecialIds::DEFAULT;
    let mut trainer = Trainer::new(cfg, sched, sp).map_err(|e| e.to_string())?;
    let mut rng = rng_for(106, "acceptance.c6");
    let mut total = 0;
    for b in 0..100 {
        let rows: Vec<Vec<u32>> = (0..rng.random_range(1..=5))
            .map(|_| {
                let mut r = vec![sp.cls];
                r.extend((0..rng.random_range(1..=40)).map(|_| rng.random_range(5..60u32)));
                r.push(sp.sep);
                r
            })
            .collect();
        let batch = Batch::from_rows(rows, sp.pad);
        let non_pad = batch.ids.iter().flatten().filter(|&&t| t != sp.pad).count();
        let m = trainer.train_step(&batch).map_err(|e| e.to_string())?;
        if m.disc_positions != non_pad {
            return Err(format!("batch {b}: {} positions in disc_loss, {non_pad} non-pad tokens", m.disc_positions));
        }
        total += non_pad;
    }
    Ok(format!("100 padded batches, {total} non-pad tokens, all counted by the discriminator loss"))
}

// ---- 7 -----------------------------------------------------------------

fn c7_schedule() -> Outcome {
    let s = TrainSchedule::default();
    // 1e-5 until 80k, then 1e-6; warmup to 20k, linear decay to 0 at 120k
    let closed = |t: f64| -> f64 {
        let base = if t < 80_000.0 { 1e-5 } else { 1e-6 };
        if t < 20_000.0 {
            base * t / 20_000.0
        } else {
            base * (120_000.0 - t) / 100_000.0
        }
    };
    let expected = [
        (0u64, 0.0),
        (10_000, 5e-6),
        (20_000, 1e-5),
        (50_000, 7e-6),
        (79_999, 4.0001e-6),
        (80_000, 4e-7),
        (100_000, 2e-7),
        (120_000, 0.0),
    ];
    let mut worst = 0.0f64;
    for (step, want) in expected {
        let got = lr_at(step, &s).map_err(|e| e.to_string())?;
        let form = closed(step as f64);
        let err = (got - want).abs().max((got - form).abs()) / want.max(1e-30);
        if (got - want).abs() > 1e-12 * want.max(1e-12) || (got - form).abs() > 1e-12 * want.max(1e-12) {
            return Err(format!("lr_at({step}) = {got:e}, expected {want:e}"));
        }
        worst = worst.max(if want == 0.0 { got.abs() } else { err });
    }
    Ok(format!("8 steps match the closed form (max relative error {worst:.1e})"))
}

// ---- 8, 9, 10, 12 -------------------------------------------------------

const ROOT_SEED: u64 = 2024;
const PRETRAIN_DOCS: usize = 4000;
const DRAWDOWN_TOL: f64 = 0.005;

fn desk_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.seed = ROOT_SEED;
    cfg.eval_every = 50;
    cfg.ner.labels = LabelSet::Mixed;
    cfg
}

struct Pretrained {
    cfg: RunConfig,
    vocab: Vocab,
    checkpoint: PathBuf,
}

fn pretrain_run(out: &Path) -> Result<(Pretrained, Vec<(u64, f64, f64)>), String> {
    let cfg = desk_config();
    let docs = synth::pretraining_documents(cfg.seed, PRETRAIN_DOCS);
    let eval: Vec<String> = synth::generate_cases(cfg.seed, "synth.eval", cfg.eval_documents).iter().map(|c| c.text()).collect();
    let vocab = pipeline::train_vocab(&cfg, &docs).map_err(|e| e.to_string())?;
    let report = pipeline::run_pretraining(&cfg, &vocab, docs.iter().cloned().cycle(), &eval, out, None).map_err(|e| e.to_string())?;
    let curve = report.lines.iter().map(|l| (l.step, l.eval.gen_mlm_accuracy, l.eval.disc_accuracy)).collect();
    Ok((
        Pretrained {
            cfg,
            vocab,
            checkpoint: report.checkpoint,
        },
        curve,
    ))
}

/// Largest drop below the running maximum.
fn drawdown(curve: &[(u64, f64)]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    let mut worst = 0.0f64;
    for &(_, v) in curve {
        best = best.max(v);
        worst = worst.max(best - v);
    }
    worst
}

fn c8_convergence(curve: &[(u64, f64, f64)], vocab_len: usize, steps: u64) -> Outcome {
    let gen: Vec<(u64, f64)> = curve.iter().map(|c| (c.0, c.1)).collect();
    let disc: Vec<(u64, f64)> = curve.iter().map(|c| (c.0, c.2)).collect();
    let sg = smooth_accuracy_curve(&gen, 200);
    let sd = smooth_accuracy_curve(&disc, 200);
    let (g_last, d_last) = (sg.last().map_or(0.0, |p| p.1), sd.last().map_or(0.0, |p| p.1));
    let chance = 1.0 / synth::world_vocabulary().len() as f64;
    let (dg, dd) = (drawdown(&sg), drawdown(&sd));
    ensure(
        steps == 2000 && g_last > 5.0 * chance && d_last > 0.6 && dg <= DRAWDOWN_TOL && dd <= DRAWDOWN_TOL,
        format!(
            "{steps} steps, smoothed gen acc {g_last:.4} (> 5×{chance} = {:.3}; vocab {vocab_len}), disc acc {d_last:.4} (> 0.6), drawdown gen {dg:.4} disc {dd:.4} (≤ {DRAWDOWN_TOL})",
            5.0 * chance
        ),
    )
}

struct Tagger {
    report: relectra::ner::MetricsReport,
    test: Vec<NerExample>,
    checkpoint: PathBuf,
}

fn finetune_run(p: &Pretrained, out: &Path) -> Result<Tagger, String> {
    let ckpt = Checkpoint::load(&p.checkpoint).map_err(|e| e.to_string())?;
    let (train, dev, test) = synth::ner_splits(p.cfg.seed, 1000, 100, 200);
    let r = pipeline::run_finetuning(&p.cfg, &p.vocab, &ckpt, &train, &dev, out).map_err(|e| e.to_string())?;
    // score the model as reloaded from disk, not the in-memory one
    let (model, store) = pipeline::load_tagger(&r.checkpoint, &p.vocab).map_err(|e| e.to_string())?;
    let test = to_examples(&test, &p.vocab, "test").map_err(|e| e.to_string())?;
    let opts = pipeline::finetune_options(&p.cfg);
    let report = pipeline::evaluate_tagger(&model, &store, &test, opts.max_len, opts.stride()).map_err(|e| e.to_string())?;
    Ok(Tagger {
        report,
        test,
        checkpoint: r.checkpoint,
    })
}

/// Ten examples with hand-counted exact-match outcomes.
fn c9_metric_oracle() -> Outcome {
    use EntityLabel::*;
    let s = EntitySpan::new;
    let gold = vec![
        vec![s(Plt, 0, 2), s(Def, 5, 7)],
        vec![s(Type, 1, 3)],
        vec![s(Prob, 0, 1), s(Prob, 4, 6)],
        vec![],
        vec![s(Plt, 2, 4)],
        vec![s(Def, 0, 3), s(Type, 5, 6)],
        vec![s(Prob, 2, 3)],
        vec![s(Plt, 0, 1), s(Def, 3, 4)],
        vec![s(Type, 0, 2)],
        vec![s(Prob, 1, 4)],
    ];
    let pred = vec![
        vec![s(Plt, 0, 2), s(Def, 5, 7)], // 2 correct
        vec![s(Type, 1, 2)],              // boundary miss
        vec![s(Prob, 0, 1)],              // 1 of 2
        vec![s(Plt, 0, 1)],               // spurious
        vec![s(Def, 2, 4)],               // wrong label
        vec![s(Def, 0, 3), s(Type, 5, 6)], // 2 correct
        vec![],                           // missed
        vec![s(Plt, 0, 1), s(Def, 3, 4)], // 2 correct
        vec![s(Type, 0, 2), s(Prob, 3, 4)], // 1 correct, 1 spurious
        vec![s(Prob, 1, 4)],              // correct
    ];
    // per label (predicted, gold, correct), counted by hand from the table above
    let hand = [(Type, (3, 3, 2)), (Plt, (3, 3, 2)), (Def, (4, 3, 3)), (Prob, (3, 4, 2))];
    let (tp, tg, tc) = (13.0, 13.0, 9.0);
    let r = evaluate_ner(&pred, &gold).map_err(|e| e.to_string())?;
    for (label, (p, g, c)) in hand {
        let got = r.per_label.get(&label).copied().unwrap_or_default();
        if (got.predicted, got.gold, got.correct) != (p, g, c) {
            return Err(format!("{label:?}: got {:?}, hand count {:?}", (got.predicted, got.gold, got.correct), (p, g, c)));
        }
        let (pp, rr) = (c as f64 / p as f64, c as f64 / g as f64);
        if got.precision != pp || got.recall != rr || (got.f1 - 2.0 * pp * rr / (pp + rr)).abs() > 1e-15 {
            return Err(format!("{label:?}: scores {got:?}"));
        }
    }
    let o = r.overall;
    let (p, rc) = (tc / tp, tc / tg);
    ensure(
        o.precision == p && o.recall == rc && (o.f1 - 2.0 * p * rc / (p + rc)).abs() < 1e-15,
        format!("hand-counted oracle: overall p {:.4} r {:.4} f1 {:.4}", o.precision, o.recall, o.f1),
    )
}

fn c10_long_input(p: &Pretrained, tagger_ckpt: &Path) -> Outcome {
    let (model, store) = pipeline::load_tagger(tagger_ckpt, &p.vocab).map_err(|e| e.to_string())?;
    let doc = synth::long_document(p.cfg.seed, 5000);
    let ex = NerExample::from_words(&doc.words, &doc.tags, &p.vocab, "long").map_err(|e| e.to_string())?;
    if ex.len() < 5000 {
        return Err(format!("document has only {} tokens", ex.len()));
    }
    let ids = &ex.tokens.ids[..5000];
    let a = model.predict(&store, ids, 1536, 512).map_err(|e| e.to_string())?;
    let b = model.predict(&store, ids, 1536, 768).map_err(|e| e.to_string())?;
    let sa = relectra::ner::bio_decode(&a).spans;
    let sb = relectra::ner::bio_decode(&b).spans;
    let differing = a.iter().zip(&b).filter(|(x, y)| x != y).count();
    ensure(
        a.len() == 5000 && b.len() == 5000 && sa == sb,
        format!(
            "5000 tokens -> {} / {} predictions, {} / {} spans at stride 512 / 768, {differing} differing tags",
            a.len(),
            b.len(),
            sa.len(),
            sb.len()
        ),
    )
}

fn c12_determinism(first: &Path, second: &Path) -> Outcome {
    let files = [
        ("pretrain", pipeline::METRICS_FILE),
        ("pretrain", pipeline::CHECKPOINT_FILE),
        ("pretrain", pipeline::VOCAB_FILE),
        ("ner", pipeline::DEV_FILE),
        ("ner", pipeline::NER_CHECKPOINT_FILE),
    ];
    let mut bytes = 0;
    for (sub, f) in files {
        let a = std::fs::read(first.join(sub).join(f)).map_err(|e| format!("{sub}/{f}: {e}"))?;
        let b = std::fs::read(second.join(sub).join(f)).map_err(|e| format!("{sub}/{f}: {e}"))?;
        if a != b {
            return Err(format!("{sub}/{f} differs between runs"));
        }
        bytes += a.len();
    }
    Ok(format!("{} files ({bytes} bytes) bitwise identical across two runs", files.len()))
}

// ---- 11 ----------------------------------------------------------------

fn c11_tokenizer_eval() -> Outcome {
    let size = 360;
    let opts = TrainOptions {
        vocab_size: size,
        ..TrainOptions::default()
    };
    let domain = train_bpe([synth::domain_corpus(111, 3000)], &opts).map_err(|e| e.to_string())?;
    let general = train_bpe([synth::general_corpus(111, 3000)], &opts).map_err(|e| e.to_string())?;
    if domain.len() != general.len() {
        return Err(format!("vocab sizes differ: {} vs {}", domain.len(), general.len()));
    }
    let legal: HashSet<String> = synth::legal_lexicon().into_iter().collect();
    let medical: HashSet<String> = synth::medical_lexicon().into_iter().collect();
    let none = HashSet::new();
    let d = evaluate_tokenization(synth::TOKENIZER_SAMPLE, &domain, &none, &legal, &medical);
    let g = evaluate_tokenization(synth::TOKENIZER_SAMPLE, &general, &none, &legal, &medical);
    ensure(
        d.total_errors < g.total_errors,
        format!(
            "vocab {} each: domain total_errors {} (legal {}, medical {}) < general {} (legal {}, medical {})",
            domain.len(),
            d.total_errors,
            d.legal_errors,
            d.medical_errors,
            g.total_errors,
            g.legal_errors,
            g.medical_errors
        ),
    )
}

// ---- driver --------------------------------------------------------------

struct Line {
    n: usize,
    outcome: Outcome,
    took: Duration,
    budget: Option<Duration>,
}

/// `RELECTRA_ACCEPTANCE_ONLY=1,5,7` runs a subset; the others report as failed.
fn selected(n: usize) -> bool {
    match std::env::var("RELECTRA_ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').any(|k| k.trim().parse() == Ok(n)),
        Err(_) => true,
    }
}

fn timed(n: usize, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> Line {
    let start = Instant::now();
    if !selected(n) {
        return Line {
            n,
            outcome: Err("not run (excluded by RELECTRA_ACCEPTANCE_ONLY)".into()),
            took: Duration::ZERO,
            budget,
        };
    }
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let line = Line {
        n,
        outcome,
        took: start.elapsed(),
        budget,
    };
    print_line(&line);
    line
}

fn passed(l: &Line) -> bool {
    l.outcome.is_ok() && l.budget.is_none_or(|b| l.took <= b)
}

fn print_line(l: &Line) {
    let status = if passed(l) { "PASS" } else { "FAIL" };
    let detail = match &l.outcome {
        Ok(s) | Err(s) => s,
    };
    let budget = l.budget.map_or(String::new(), |b| format!(" / budget {:.0}s", b.as_secs_f64()));
    println!("criterion {:>2}: {status} — {detail} ({:.1}s{budget})", l.n, l.took.as_secs_f64());
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn main() {
    // plain `cargo test` passes `--test-threads` etc.; `--list` must not run anything
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut lines = vec![
        timed(1, secs(5), c1_degenerate_buckets),
        timed(2, secs(60), c2_subquadratic),
        timed(3, secs(60), c3_gradients),
        timed(4, secs(10), c4_bpe_oracle),
        timed(5, secs(1), c5_masking),
        timed(6, secs(5), c6_disc_coverage),
        timed(7, secs(1), c7_schedule),
    ];

    let root = tempfile::tempdir().expect("temp dir");
    let run_a = root.path().join("a");
    let mut pretrained = None;
    let mut curve = Vec::new();
    let c8 = timed(8, secs(15 * 60), || {
        let (p, c) = pretrain_run(&run_a.join("pretrain"))?;
        let steps = c.last().map_or(0, |x| x.0);
        let len = p.vocab.len();
        curve = c;
        pretrained = Some(p);
        c8_convergence(&curve, len, steps)
    });
    lines.push(c8);

    let mut tagger_ckpt = None;
    let c9 = timed(9, secs(20 * 60), || {
        let p = pretrained.as_ref().ok_or("no pretrained checkpoint (criterion 8 errored)")?;
        let t = finetune_run(p, &run_a.join("ner"))?;
        tagger_ckpt = Some(t.checkpoint.clone());
        let o = t.report.overall;
        let oracle = c9_metric_oracle();
        let per: Vec<String> = t.report.per_label.iter().map(|(l, s)| format!("{} {:.3}", l.as_str(), s.f1)).collect();
        let detail = format!(
            "{} test docs: overall exact-match f1 {:.4} (≥ 0.8) [{}]; {}",
            t.test.len(),
            o.f1,
            per.join(", "),
            match &oracle {
                Ok(s) | Err(s) => s,
            }
        );
        ensure(o.f1 >= 0.8 && oracle.is_ok(), detail)
    });
    lines.push(c9);

    lines.push(timed(10, secs(120), || {
        let p = pretrained.as_ref().ok_or("no pretrained checkpoint")?;
        let t = tagger_ckpt.as_ref().ok_or("no tagger checkpoint (criterion 9 errored)")?;
        c10_long_input(p, t)
    }));
    lines.push(timed(11, secs(30), c11_tokenizer_eval));

    let run_b = root.path().join("b");
    lines.push(timed(12, None, || {
        let (p, _) = pretrain_run(&run_b.join("pretrain"))?;
        finetune_run(&p, &run_b.join("ner"))?;
        c12_determinism(&run_a, &run_b)
    }));

    lines.sort_by_key(|l| l.n);
    println!();
    println!("acceptance summary:");
    for l in &lines {
        print_line(l);
    }
    let failed: Vec<usize> = lines.iter().filter(|l| !passed(l)).map(|l| l.n).collect();
    println!("{} of {} criteria passed", lines.len() - failed.len(), lines.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
