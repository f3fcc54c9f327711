//! Confusion matrix and the accuracy / precision / recall / F1 report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    #[serde(flatten)]
    pub counts: Counts,
    pub threshold: f64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        let c = self.counts;
        c.tp + c.fp + c.fn_ + c.tn
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub threshold: f64,
    pub n: u64,
}

/// A prediction counts as positive iff `p >= threshold`.
pub fn confusion(preds: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMatrix> {
    if preds.is_empty() {
        return Err(Error::Data("confusion matrix of no predictions".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut c = Counts {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    for (&p, &y) in preds.iter().zip(labels) {
        match (p >= threshold, y) {
            (true, 1) => c.tp += 1,
            (true, 0) => c.fp += 1,
            (false, 1) => c.fn_ += 1,
            (false, 0) => c.tn += 1,
            (_, other) => return Err(Error::Data(format!("label {other} is not 0 or 1"))),
        }
    }
    Ok(ConfusionMatrix {
        counts: c,
        threshold,
    })
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F1 from precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Zero denominators yield 0 for the affected metric.
pub fn compute_metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let Counts { tp, fp, fn_, tn } = cm.counts;
    let n = cm.total();
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    MetricsReport {
        acc: ratio(tp + tn, n),
        precision,
        recall,
        f1: f1_score(precision, recall),
        tp,
        fp,
        fn_,
        tn,
        threshold: cm.threshold,
        n,
    }
}

pub fn evaluate(preds: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsReport> {
    Ok(compute_metrics(&confusion(preds, labels, threshold)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cm(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionMatrix {
        ConfusionMatrix {
            counts: Counts { tp, fp, fn_, tn },
            threshold: 0.5,
        }
    }

    #[test]
    fn confusion_examples() {
        let c = confusion(&[0.9, 0.2], &[1, 0], 0.5).unwrap();
        assert_eq!(c.counts, Counts { tp: 1, fp: 0, fn_: 0, tn: 1 });
        let c = confusion(&[0.7, 0.1, 0.6], &[1, 0, 1], 0.5).unwrap();
        assert_eq!((c.counts.fp, c.counts.fn_), (0, 0));
        let tie = confusion(&[0.5], &[0], 0.5).unwrap();
        assert_eq!(tie.counts.fp, 1);
    }

    #[test]
    fn confusion_errors() {
        assert!(confusion(&[], &[], 0.5).is_err());
        assert!(confusion(&[0.2, 0.3], &[1], 0.5).is_err());
        assert!(confusion(&[0.2], &[4], 0.5).is_err());
    }

    #[test]
    fn reported_f1_is_consistent() {
        let f1 = f1_score(0.782, 0.770);
        assert!((f1 - 0.776).abs() <= 0.0005, "{f1}");
    }

    #[test]
    fn degenerate_and_counting_cases() {
        let r = compute_metrics(&cm(0, 0, 0, 10));
        assert_eq!((r.acc, r.precision, r.recall, r.f1), (1.0, 0.0, 0.0, 0.0));
        let r = compute_metrics(&cm(2, 1, 1, 6));
        assert!((r.acc - 0.8).abs() < 1e-15);
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.n, 10);
    }

    #[test]
    fn report_serializes_with_fn_field() {
        let r = compute_metrics(&cm(1, 2, 3, 4));
        let v: serde_json::Value = serde_json::to_value(r).unwrap();
        for key in ["acc", "precision", "recall", "f1", "tp", "fp", "fn", "tn", "threshold", "n"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_permutation_invariant(
            pairs in prop::collection::vec((0.0f64..1.0, 0u8..2), 1..60),
            rot in 0usize..60,
        ) {
            let (p, y): (Vec<f64>, Vec<u8>) = pairs.iter().cloned().unzip();
            let r = evaluate(&p, &y, 0.5).unwrap();
            for m in [r.acc, r.precision, r.recall, r.f1] {
                prop_assert!((0.0..=1.0).contains(&m));
            }
            prop_assert!(r.f1 <= r.precision.max(r.recall) + 1e-15);
            prop_assert_eq!(r.f1 == 0.0, r.precision * r.recall == 0.0);
            let k = rot % pairs.len();
            let mut rotated = pairs.clone();
            rotated.rotate_left(k);
            rotated.reverse();
            let (p2, y2): (Vec<f64>, Vec<u8>) = rotated.into_iter().unzip();
            prop_assert_eq!(evaluate(&p2, &y2, 0.5).unwrap(), r);
        }
    }
}
