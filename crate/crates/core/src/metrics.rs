//! Binary classification metrics: confusion matrix, the six scalar metrics,
//! ROC curve, and AUC. Cataract is always the positive class.
//!
//! Degenerate ratios (0/0) are reported as [`MetricValue::Undefined`] naming
//! the zero denominator rather than silently coerced to zero.

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Count agreement between labels and predictions.
pub fn confusion(labels: &[Label], predictions: &[Label]) -> Result<ConfusionMatrix> {
    if labels.is_empty() || labels.len() != predictions.len() {
        return Err(Error::shape_mismatch(
            "confusion",
            "two equal-length non-empty slices",
            format!("{} labels vs {} predictions", labels.len(), predictions.len()),
        ));
    }
    let mut cm = ConfusionMatrix::default();
    for (&truth, &pred) in labels.iter().zip(predictions) {
        match (truth, pred) {
            (Label::Cataract, Label::Cataract) => cm.tp += 1,
            (Label::Normal, Label::Cataract) => cm.fp += 1,
            (Label::Normal, Label::Normal) => cm.tn += 1,
            (Label::Cataract, Label::Normal) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// A ratio metric, or a 0/0 case with its zero denominator named.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Defined(f64),
    Undefined { undefined: String },
}

impl MetricValue {
    fn ratio(numerator: usize, denominator: usize, denominator_name: &str) -> MetricValue {
        if denominator == 0 {
            MetricValue::Undefined {
                undefined: denominator_name.to_string(),
            }
        } else {
            MetricValue::Defined(numerator as f64 / denominator as f64)
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            MetricValue::Defined(v) => Some(*v),
            MetricValue::Undefined { .. } => None,
        }
    }
}

/// The six scalar metrics. Sensitivity and recall are the same ratio by
/// definition and always carry the same value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarMetrics {
    pub accuracy: MetricValue,
    pub precision: MetricValue,
    pub recall: MetricValue,
    pub sensitivity: MetricValue,
    pub specificity: MetricValue,
    pub f1: MetricValue,
}

pub fn scalar_metrics(cm: &ConfusionMatrix) -> ScalarMetrics {
    let accuracy = MetricValue::ratio(cm.tp + cm.tn, cm.total(), "tp+fp+tn+fn");
    let precision = MetricValue::ratio(cm.tp, cm.tp + cm.fp, "tp+fp");
    let recall = MetricValue::ratio(cm.tp, cm.tp + cm.fn_, "tp+fn");
    let specificity = MetricValue::ratio(cm.tn, cm.tn + cm.fp, "tn+fp");
    let f1 = match (precision.value(), recall.value()) {
        (Some(p), Some(r)) if p + r > 0.0 => MetricValue::Defined(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => MetricValue::Undefined {
            undefined: "precision+recall".into(),
        },
        _ => MetricValue::Undefined {
            undefined: "precision or recall".into(),
        },
    };
    ScalarMetrics {
        accuracy,
        precision,
        recall: recall.clone(),
        sensitivity: recall,
        specificity,
        f1,
    }
}

/// One point of the ROC sweep. The leading sentinel carries an infinite
/// threshold, which JSON cannot represent directly; it round-trips as null.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    #[serde(with = "json_inf")]
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

mod json_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Threshold sweep over the unique scores (descending, predictions positive
/// at `score >= threshold`) with an infinity sentinel so the curve starts at
/// (0,0); it ends at (1,1) at the smallest score. Tied scores collapse into
/// one point. AUC by the trapezoidal rule.
pub fn roc(labels: &[Label], scores: &[f64]) -> Result<(Vec<RocPoint>, f64)> {
    if labels.len() != scores.len() {
        return Err(Error::shape_mismatch(
            "roc",
            format!("{} labels", labels.len()),
            format!("{} scores", scores.len()),
        ));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::RocUndefined {
            reason: "scores must be finite".into(),
        });
    }
    let positives = labels.iter().filter(|&&l| l == Label::Cataract).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::RocUndefined {
            reason: format!(
                "both classes required, got {positives} positive / {negatives} negative"
            ),
        });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // consume the whole tie group at this score
        while i < order.len() && scores[order[i]] == threshold {
            match labels[order[i]] {
                Label::Cataract => tp += 1,
                Label::Normal => fp += 1,
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
        });
    }

    let mut auc = 0.0;
    for pair in points.windows(2) {
        auc += (pair[1].fpr - pair[0].fpr) * (pair[1].tpr + pair[0].tpr) / 2.0;
    }
    Ok((points, auc))
}

/// Full evaluation artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub metrics: ScalarMetrics,
    pub roc_points: Vec<RocPoint>,
    pub auc: f64,
}

/// Confusion, scalar metrics, and ROC in one shot from scores at `threshold`.
pub fn evaluate(labels: &[Label], scores: &[f64], threshold: f64) -> Result<EvalReport> {
    let predictions: Vec<Label> = scores
        .iter()
        .map(|&s| if s >= threshold { Label::Cataract } else { Label::Normal })
        .collect();
    let cm = confusion(labels, &predictions)?;
    let metrics = scalar_metrics(&cm);
    let (roc_points, auc) = roc(labels, scores)?;
    Ok(EvalReport {
        confusion: cm,
        metrics,
        roc_points,
        auc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use proptest::prelude::*;
    use rand::Rng;

    fn l(bits: &[u8]) -> Vec<Label> {
        bits.iter()
            .map(|&b| if b == 1 { Label::Cataract } else { Label::Normal })
            .collect()
    }

    #[test]
    fn all_correct_has_no_false_counts() {
        let labels = l(&[1, 0, 1, 0]);
        let cm = confusion(&labels, &labels).unwrap();
        assert_eq!((cm.fp, cm.fn_), (0, 0));
        assert_eq!((cm.tp, cm.tn), (2, 2));
    }

    #[test]
    fn crossed_predictions_count_fn_and_fp() {
        let cm = confusion(&l(&[1, 0]), &l(&[0, 1])).unwrap();
        assert_eq!(cm.fn_, 1);
        assert_eq!(cm.fp, 1);
        assert_eq!(cm.tp + cm.tn, 0);
    }

    #[test]
    fn random_counts_match_brute_force_tally() {
        let mut rng = crate::rng::stream(14, "metrics.tally");
        let labels: Vec<Label> = (0..1000)
            .map(|_| if rng.gen_bool(0.5) { Label::Cataract } else { Label::Normal })
            .collect();
        let preds: Vec<Label> = (0..1000)
            .map(|_| if rng.gen_bool(0.5) { Label::Cataract } else { Label::Normal })
            .collect();
        let cm = confusion(&labels, &preds).unwrap();
        let mut want = [0usize; 4];
        for (a, b) in labels.iter().zip(&preds) {
            let idx = match (a, b) {
                (Label::Cataract, Label::Cataract) => 0,
                (Label::Normal, Label::Cataract) => 1,
                (Label::Normal, Label::Normal) => 2,
                (Label::Cataract, Label::Normal) => 3,
            };
            want[idx] += 1;
        }
        assert_eq!([cm.tp, cm.fp, cm.tn, cm.fn_], want);
        assert_eq!(cm.total(), 1000);
    }

    /// tp=8, fp=2, fn=1, tn=9 worked out by hand from the definitions.
    #[test]
    fn hand_derived_matrix_values() {
        let cm = ConfusionMatrix {
            tp: 8,
            fp: 2,
            tn: 9,
            fn_: 1,
        };
        let m = scalar_metrics(&cm);
        let close = |v: &MetricValue, want: f64| (v.value().unwrap() - want).abs() <= 1e-12;
        assert!(close(&m.accuracy, 0.85));
        assert!(close(&m.precision, 0.8));
        assert!(close(&m.recall, 8.0 / 9.0));
        assert!(close(&m.sensitivity, 8.0 / 9.0));
        assert!(close(&m.specificity, 9.0 / 11.0));
        let p = 0.8;
        let r = 8.0 / 9.0;
        assert!(close(&m.f1, 2.0 * p * r / (p + r)));
    }

    #[test]
    fn perfect_classifier_scores_one_everywhere() {
        let cm = ConfusionMatrix {
            tp: 5,
            fp: 0,
            tn: 7,
            fn_: 0,
        };
        let m = scalar_metrics(&cm);
        for v in [m.accuracy, m.precision, m.recall, m.sensitivity, m.specificity, m.f1] {
            assert_eq!(v.value(), Some(1.0));
        }
    }

    #[test]
    fn zero_over_zero_is_undefined_not_zero() {
        let cm = ConfusionMatrix {
            tp: 0,
            fp: 0,
            tn: 10,
            fn_: 3,
        };
        let m = scalar_metrics(&cm);
        assert_eq!(
            m.precision,
            MetricValue::Undefined {
                undefined: "tp+fp".into()
            }
        );
        // recall is defined here: 0 / (0+3)
        assert_eq!(m.recall.value(), Some(0.0));
    }

    #[test]
    fn perfectly_separated_scores_give_auc_one() {
        let labels = l(&[1, 1, 0, 0]);
        let (_, auc) = roc(&labels, &[0.9, 0.8, 0.2, 0.1]).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn identical_scores_give_the_chance_diagonal() {
        let labels = l(&[1, 0, 1, 0]);
        let (points, auc) = roc(&labels, &[0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(points.len(), 2);
        assert_eq!((points[0].fpr, points[0].tpr), (0.0, 0.0));
        assert_eq!((points[1].fpr, points[1].tpr), (1.0, 1.0));
        assert!((auc - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn example_curve_auc_three_quarters() {
        let labels = l(&[1, 0, 1, 0]);
        let scores = [0.9, 0.8, 0.7, 0.1];
        let (points, auc) = roc(&labels, &scores).unwrap();
        assert!((auc - 0.75).abs() <= 1e-12);
        let want = oracles::auc_pairwise(&[1, 0, 1, 0], &scores);
        assert!((auc - want).abs() <= 1e-12);
        assert_eq!(points[0].tpr, 0.0);
        assert_eq!(points.last().unwrap().tpr, 1.0);
        assert_eq!(points.last().unwrap().fpr, 1.0);
    }

    #[test]
    fn single_class_labels_are_rejected() {
        let labels = l(&[1, 1, 1]);
        assert!(matches!(
            roc(&labels, &[0.1, 0.2, 0.3]),
            Err(Error::RocUndefined { .. })
        ));
    }

    #[test]
    fn trapezoid_auc_equals_pairwise_auc_on_random_instances() {
        let mut rng = crate::rng::stream(15, "metrics.auc");
        for round in 0..100 {
            let n = rng.gen_range(2..=200);
            let mut bits: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            // force both classes
            bits[0] = 1;
            if !bits.contains(&0) {
                bits[n - 1] = 0;
            }
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    // quantized scores so ties actually occur
                    (rng.gen_range(0..20) as f64) / 20.0
                })
                .collect();
            let labels = l(&bits);
            let (_, auc) = roc(&labels, &scores).unwrap();
            let want = oracles::auc_pairwise(&bits, &scores);
            assert!(
                (auc - want).abs() <= 1e-12,
                "round {round}: trapezoid {auc} vs pairwise {want}"
            );
        }
    }

    #[test]
    fn accuracy_decomposes_over_class_rates() {
        let cm = ConfusionMatrix {
            tp: 13,
            fp: 4,
            tn: 21,
            fn_: 7,
        };
        let m = scalar_metrics(&cm);
        let p = (cm.tp + cm.fn_) as f64;
        let n = (cm.tn + cm.fp) as f64;
        let composed = (m.sensitivity.value().unwrap() * p + m.specificity.value().unwrap() * n)
            / (p + n);
        assert!((m.accuracy.value().unwrap() - composed).abs() <= 1e-12);
    }

    #[test]
    fn f1_is_the_harmonic_mean() {
        let cm = ConfusionMatrix {
            tp: 9,
            fp: 3,
            tn: 14,
            fn_: 2,
        };
        let m = scalar_metrics(&cm);
        let p = m.precision.value().unwrap();
        let r = m.recall.value().unwrap();
        let harmonic = 2.0 / (1.0 / p + 1.0 / r);
        assert!((m.f1.value().unwrap() - harmonic).abs() <= 1e-12);
    }

    #[test]
    fn eval_report_roundtrips_through_json() {
        let labels = l(&[1, 0, 1, 0, 1]);
        let report = evaluate(&labels, &[0.9, 0.2, 0.8, 0.6, 0.4], 0.5).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    proptest! {
        #[test]
        fn metrics_are_permutation_invariant(seed in 0u64..500) {
            let mut rng = crate::rng::stream(seed, "metrics.perm");
            let n = rng.gen_range(2..60);
            let labels: Vec<Label> = (0..n)
                .map(|i| if i == 0 || rng.gen_bool(0.5) { Label::Cataract } else { Label::Normal })
                .collect();
            let preds: Vec<Label> = (0..n)
                .map(|_| if rng.gen_bool(0.5) { Label::Cataract } else { Label::Normal })
                .collect();
            let base = scalar_metrics(&confusion(&labels, &preds).unwrap());

            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let shuffled_labels: Vec<Label> = order.iter().map(|&i| labels[i]).collect();
            let shuffled_preds: Vec<Label> = order.iter().map(|&i| preds[i]).collect();
            let shuffled = scalar_metrics(&confusion(&shuffled_labels, &shuffled_preds).unwrap());
            prop_assert_eq!(base, shuffled);
        }
    }
}
