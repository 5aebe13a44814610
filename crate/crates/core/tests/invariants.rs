use proptest::prelude::*;
use relectra::corpus::make_batches;
use relectra::ner::{auto_annotate, chunk_with_stride, evaluate_ner, merge_window_predictions, parse_wordlists, EntityLabel, EntitySpan, Parties};
use relectra::synth;
use relectra::tokenizer::{train_bpe, TrainOptions, Vocab};

fn label(i: u8) -> EntityLabel {
    EntityLabel::ALL[i as usize % 4]
}

fn span_lists() -> impl Strategy<Value = Vec<Vec<EntitySpan>>> {
    prop::collection::vec(prop::collection::vec((0u8..4, 0usize..20, 1usize..4), 0..5), 1..6).prop_map(|docs| {
        docs.into_iter()
            .map(|spans| spans.into_iter().map(|(l, s, n)| EntitySpan::new(label(l), s, s + n)).collect())
            .collect()
    })
}

proptest! {
    #[test]
    fn windows_cover_without_gaps(len in 1usize..3000, max_len in 2usize..600, frac in 0.0f64..1.0) {
        let stride = (((max_len - 1) as f64 * frac) as usize).max(1);
        let w = chunk_with_stride(len, max_len, stride).unwrap();
        prop_assert_eq!(w[0].start, 0);
        prop_assert_eq!(w.last().unwrap().end, len);
        for pair in w.windows(2) {
            prop_assert!(pair[1].start <= pair[0].end, "gap between windows");
        }
        // every position receives exactly one merged prediction: its own index
        let scored: Vec<_> = w.iter().map(|x| (*x, (x.start..x.end).collect::<Vec<_>>())).collect();
        let merged = merge_window_predictions(&scored, len).unwrap();
        prop_assert_eq!(merged, (0..len).collect::<Vec<_>>());
    }

    #[test]
    fn scoring_swaps_precision_and_recall(pred in span_lists(), extra in span_lists()) {
        let mut gold = pred.clone();
        for (g, e) in gold.iter_mut().zip(&extra) {
            g.extend(e.iter().copied());
        }
        let a = evaluate_ner(&pred, &gold).unwrap().overall;
        let b = evaluate_ner(&gold, &pred).unwrap().overall;
        prop_assert_eq!(a.precision, b.recall);
        prop_assert_eq!(a.recall, b.precision);
        prop_assert!((a.f1 - b.f1).abs() < 1e-12);
    }
}

#[test]
fn exact_annotation_is_subset_of_fuzzy() {
    let lists = parse_wordlists(&synth::wordlist_text()).unwrap();
    for case in synth::generate_cases(5, "invariants", 40) {
        let mut text = case.text();
        // introduce a typo in one word so fuzzy matching has something to add
        text = text.replacen("accident", "acident", 1);
        let parties = Parties {
            plaintiffs: vec![case.plaintiff.clone()],
            defendants: vec![case.defendant.clone()],
        };
        let exact = auto_annotate(&text, &parties, &lists, 0);
        let fuzzy = auto_annotate(&text, &parties, &lists, 1);
        for s in &exact {
            assert!(fuzzy.contains(s), "{s:?} lost when max_edit grew");
        }
    }
}

#[test]
fn vocabulary_survives_text_round_trip() {
    let docs = synth::pretraining_documents(9, 200);
    let v = train_bpe(docs.iter().map(String::as_str), &TrainOptions {
        vocab_size: 300,
        ..TrainOptions::default()
    })
    .unwrap();
    let back = Vocab::from_text(&v.to_text()).unwrap();
    assert_eq!(v, back);
    for d in docs.iter().take(20) {
        assert_eq!(v.encode(d, true), back.encode(d, true));
    }
}

#[test]
fn batches_pad_only_at_the_end() {
    let docs = synth::pretraining_documents(4, 30);
    let v = train_bpe(docs.iter().map(String::as_str), &TrainOptions {
        vocab_size: 250,
        ..TrainOptions::default()
    })
    .unwrap();
    let sp = v.specials();
    let batches: Vec<_> = make_batches(docs.into_iter(), &v, 3, 40).collect();
    assert!(!batches.is_empty());
    for b in &batches {
        for (ids, mask) in b.ids.iter().zip(&b.mask) {
            assert!(ids.len() <= 40);
            let n = mask.iter().filter(|m| **m).count();
            assert!(mask[..n].iter().all(|m| *m));
            assert_eq!(ids[0], sp.cls);
            assert_eq!(ids[n - 1], sp.sep);
            assert!(ids[n..].iter().all(|&t| t == sp.pad));
        }
    }
}
