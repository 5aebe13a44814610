//! Exact-match entity scoring.

use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};
use crate::ner::bio::{EntityLabel, EntitySpan};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Scores {
    pub predicted: usize,
    pub gold: usize,
    pub correct: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Scores {
    fn from_counts(predicted: usize, gold: usize, correct: usize) -> Self {
        let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (p, r) = (div(correct, predicted), div(correct, gold));
        Scores {
            predicted,
            gold,
            correct,
            precision: p,
            recall: r,
            f1: if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub per_label: BTreeMap<EntityLabel, Scores>,
    /// Micro-averaged over all labels.
    pub overall: Scores,
}

/// A predicted span is correct iff a gold span has the same label, start and
/// end. Labels absent from both sides are not reported.
pub fn evaluate_ner(predictions: &[Vec<EntitySpan>], gold: &[Vec<EntitySpan>]) -> Result<MetricsReport> {
    if predictions.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predicted examples vs {} gold examples",
            predictions.len(),
            gold.len()
        )));
    }
    let mut counts: BTreeMap<EntityLabel, (usize, usize, usize)> = BTreeMap::new();
    for (p, g) in predictions.iter().zip(gold) {
        let gs: HashSet<&EntitySpan> = g.iter().collect();
        let ps: HashSet<&EntitySpan> = p.iter().collect();
        for s in &ps {
            let c = counts.entry(s.label).or_default();
            c.0 += 1;
            if gs.contains(s) {
                c.2 += 1;
            }
        }
        for s in &gs {
            counts.entry(s.label).or_default().1 += 1;
        }
    }
    let (mut tp, mut tg, mut tc) = (0, 0, 0);
    let mut report = MetricsReport::default();
    for (label, (p, g, c)) in counts {
        tp += p;
        tg += g;
        tc += c;
        report.per_label.insert(label, Scores::from_counts(p, g, c));
    }
    report.overall = Scores::from_counts(tp, tg, tc);
    Ok(report)
}

impl MetricsReport {
    /// Tab-separated table: label, precision, recall, f1, predicted, gold.
    pub fn to_table(&self) -> String {
        let mut s = String::from("label\tprecision\trecall\tf1\tpredicted\tgold\n");
        let row = |name: &str, sc: &Scores| {
            format!(
                "{name}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}\n",
                sc.precision, sc.recall, sc.f1, sc.predicted, sc.gold
            )
        };
        for (l, sc) in &self.per_label {
            s.push_str(&row(l.as_str(), sc));
        }
        s.push_str(&row("overall", &self.overall));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use EntityLabel::*;

    #[test]
    fn hand_counts() {
        let p = vec![vec![EntitySpan::new(Plt, 0, 2)]];
        let g = vec![vec![EntitySpan::new(Plt, 0, 2), EntitySpan::new(Def, 3, 4)]];
        let r = evaluate_ner(&p, &g).unwrap();
        assert_eq!(r.overall.precision, 1.0);
        assert_eq!(r.overall.recall, 0.5);
        assert!((r.overall.f1 - 2.0 / 3.0).abs() < 1e-12);

        let r = evaluate_ner(&g, &g).unwrap();
        assert_eq!(r.overall.f1, 1.0);
        assert!(r.per_label.values().all(|s| s.precision == 1.0 && s.recall == 1.0));

        let r = evaluate_ner(&[vec![]], &g[..]).unwrap();
        assert_eq!((r.overall.precision, r.overall.recall, r.overall.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn swap_exchanges_precision_and_recall() {
        let a = vec![vec![EntitySpan::new(Type, 0, 3), EntitySpan::new(Plt, 5, 6)], vec![]];
        let b = vec![vec![EntitySpan::new(Type, 0, 3)], vec![EntitySpan::new(Def, 1, 2)]];
        let ab = evaluate_ner(&a, &b).unwrap();
        let ba = evaluate_ner(&b, &a).unwrap();
        assert_eq!(ab.overall.precision, ba.overall.recall);
        assert_eq!(ab.overall.recall, ba.overall.precision);
        assert_eq!(ab.overall.f1, ba.overall.f1);
    }
}
