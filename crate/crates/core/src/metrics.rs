//! PAD evaluation metrics.
//!
//! **Convention: bonafide is the positive class.** TP counts bonafide
//! presentations accepted as bonafide, FN bonafide rejected as attack, TN
//! attacks rejected, FP attacks accepted. APCER = FP / (TN + FP) is the
//! fraction of attacks that got through; BPCER = FN / (TP + FN) is the
//! fraction of genuine users turned away; ACER is their mean. Some of the
//! ISO PAD literature flips the positive class — everything in this crate
//! uses the convention above.
//!
//! Decisions at a threshold use `p >= threshold` (ties accept as bonafide).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Label;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no scores provided")]
    EmptyScores,
    #[error("no attack samples: APCER undefined")]
    NoAttackSamples,
    #[error("no bonafide samples: BPCER undefined")]
    NoBonafideSamples,
    #[error("scores contain a single class")]
    SingleClassScores,
}

/// Confusion tallies under the bonafide-positive convention.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    #[serde(rename = "tp")]
    pub tpc: usize,
    #[serde(rename = "fp")]
    pub fpc: usize,
    #[serde(rename = "tn")]
    pub tnc: usize,
    #[serde(rename = "fn")]
    pub fnc: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tpc + self.fpc + self.tnc + self.fnc
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tpc += other.tpc;
        self.fpc += other.fpc;
        self.tnc += other.tnc;
        self.fnc += other.fnc;
    }
}

/// Tally predictions at a threshold: predict bonafide iff `p >= threshold`.
pub fn confusion_from_scores(
    pairs: &[(f64, Label)],
    threshold: f64,
) -> Result<ConfusionCounts, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyScores);
    }
    let mut counts = ConfusionCounts::default();
    for &(p, label) in pairs {
        let predicted_bonafide = p >= threshold;
        match (label, predicted_bonafide) {
            (Label::Bonafide, true) => counts.tpc += 1,
            (Label::Bonafide, false) => counts.fnc += 1,
            (Label::Attack, true) => counts.fpc += 1,
            (Label::Attack, false) => counts.tnc += 1,
        }
    }
    Ok(counts)
}

/// Attack presentation classification error rate: `FP / (TN + FP)`.
pub fn apcer(counts: &ConfusionCounts) -> Result<f64, MetricsError> {
    let attacks = counts.tnc + counts.fpc;
    if attacks == 0 {
        return Err(MetricsError::NoAttackSamples);
    }
    Ok(counts.fpc as f64 / attacks as f64)
}

/// Bonafide presentation classification error rate: `FN / (TP + FN)`.
pub fn bpcer(counts: &ConfusionCounts) -> Result<f64, MetricsError> {
    let bonafide = counts.tpc + counts.fnc;
    if bonafide == 0 {
        return Err(MetricsError::NoBonafideSamples);
    }
    Ok(counts.fnc as f64 / bonafide as f64)
}

/// Average classification error rate: `(APCER + BPCER) / 2`.
pub fn acer(apcer: f64, bpcer: f64) -> f64 {
    (apcer + bpcer) / 2.0
}

/// Errors and counts at one operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub counts: ConfusionCounts,
    pub threshold: f64,
}

impl MetricsReport {
    pub fn at_threshold(pairs: &[(f64, Label)], threshold: f64) -> Result<Self, MetricsError> {
        let counts = confusion_from_scores(pairs, threshold)?;
        let a = apcer(&counts)?;
        let b = bpcer(&counts)?;
        Ok(MetricsReport {
            apcer: a,
            bpcer: b,
            acer: acer(a, b),
            counts,
            threshold,
        })
    }
}

/// One curve sample. For ROC `x` is the false-positive rate and `y` the
/// true-positive rate; for PR `x` is recall and `y` precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

/// Threshold sweep: every distinct score, plus a sentinel above the max
/// (accept nothing) and one below the min (accept everything).
fn candidate_thresholds(pairs: &[(f64, Label)]) -> Vec<f64> {
    let mut scores: Vec<f64> = pairs.iter().map(|&(p, _)| p).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    scores.dedup();
    let mut thresholds = Vec::with_capacity(scores.len() + 2);
    thresholds.push(scores[0] - 1.0);
    thresholds.extend(scores);
    thresholds.push(thresholds[thresholds.len() - 1] + 1.0);
    thresholds
}

fn sort_and_dedupe(mut points: Vec<CurvePoint>) -> Vec<CurvePoint> {
    points.sort_by(|a, b| {
        a.x.partial_cmp(&b.x)
            .expect("finite rates")
            .then(a.y.partial_cmp(&b.y).expect("finite rates"))
    });
    points.dedup_by(|a, b| a.x == b.x && a.y == b.y);
    points
}

/// ROC curve over the candidate thresholds, sorted by x then y; always
/// includes (0, 0) and (1, 1) via the sentinels. Requires both classes.
pub fn roc_curve(pairs: &[(f64, Label)]) -> Result<Vec<CurvePoint>, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyScores);
    }
    let bonafide = pairs.iter().filter(|(_, l)| l.is_bonafide()).count();
    if bonafide == 0 || bonafide == pairs.len() {
        return Err(MetricsError::SingleClassScores);
    }
    let points = candidate_thresholds(pairs)
        .into_iter()
        .map(|threshold| {
            let c = confusion_from_scores(pairs, threshold).expect("non-empty");
            CurvePoint {
                threshold,
                x: c.fpc as f64 / (c.tnc + c.fpc) as f64,
                y: c.tpc as f64 / (c.tpc + c.fnc) as f64,
            }
        })
        .collect();
    Ok(sort_and_dedupe(points))
}

/// Precision-recall curve over the candidate thresholds. Precision at zero
/// predicted positives is defined as 1. Requires at least one bonafide.
pub fn pr_curve(pairs: &[(f64, Label)]) -> Result<Vec<CurvePoint>, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyScores);
    }
    if !pairs.iter().any(|(_, l)| l.is_bonafide()) {
        return Err(MetricsError::SingleClassScores);
    }
    let points = candidate_thresholds(pairs)
        .into_iter()
        .map(|threshold| {
            let c = confusion_from_scores(pairs, threshold).expect("non-empty");
            let predicted_positive = c.tpc + c.fpc;
            CurvePoint {
                threshold,
                x: c.tpc as f64 / (c.tpc + c.fnc) as f64,
                y: if predicted_positive == 0 {
                    1.0
                } else {
                    c.tpc as f64 / predicted_positive as f64
                },
            }
        })
        .collect();
    Ok(sort_and_dedupe(points))
}

/// Trapezoidal area under a curve whose points are already sorted by x.
pub fn auc(points: &[CurvePoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].x - w[0].x) * (w[0].y + w[1].y) / 2.0)
        .sum()
}
