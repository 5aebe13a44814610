use relectra_demo::{bpe_tokens, lr_points, lsh_pattern};

#[test]
fn tokenizes_with_learned_merges() {
    let toks = bpe_tokens("the plaintiff sued the defendant . the plaintiff won", 60, "the plaintiff").unwrap();
    assert_eq!(toks, vec!["the</w>", "plaintiff</w>"]);
    assert!(bpe_tokens("", 60, "x").is_err());
}

#[test]
fn pattern_respects_buckets_and_chunks() {
    let p = lsh_pattern(32, 8, 4, 8, 3).unwrap();
    assert_eq!(p.buckets.len(), 32);
    assert_eq!(p.attended.iter().map(|&a| a as u64).sum::<u64>(), p.pairs);
    for i in 0..32 {
        assert_eq!(p.attended[i * 32 + i], 0, "self is excluded");
        for j in 0..32 {
            if p.attended[i * 32 + j] == 1 {
                assert_eq!(p.buckets[i], p.buckets[j]);
            }
        }
    }
    assert!(p.pairs <= 32 * 2 * 8);
    assert!(lsh_pattern(8, 4, 3, 4, 0).is_err());
}

#[test]
fn curve_has_warmup_peak_and_switch() {
    let c = lr_points(2000, 200, 1400, 1e-5, 1e-6, 11).unwrap();
    assert_eq!(c.len(), 11);
    assert_eq!(c[0], (0, 0.0));
    assert_eq!(c[1].0, 200);
    assert!((c[1].1 - 1e-5).abs() < 1e-18);
    assert_eq!(*c.last().unwrap(), (2000, 0.0));
    assert!(lr_points(100, 200, 50, 1e-5, 1e-6, 5).is_err());
}
