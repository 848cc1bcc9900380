//! Detection metrics: precision-recall analysis, threshold selection, and
//! evaluation reports.
//!
//! The PR curve places one operating point at every distinct score threshold
//! (descending, prediction = score ≥ threshold) and integrates by linear
//! interpolation, anchored at recall 0 with the first finite precision — not
//! a fiat precision of 1. Thresholds are chosen on validation data only and
//! applied unchanged to test data.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Per-flow anomaly scores aligned with labels and attack types.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScoredFlows {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub attack_types: Vec<String>,
}

impl ScoredFlows {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>, attack_types: Vec<String>) -> Self {
        assert_eq!(scores.len(), labels.len());
        assert_eq!(scores.len(), attack_types.len());
        ScoredFlows {
            scores,
            labels,
            attack_types,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

fn validate_binary(scores: &[f64], labels: &[bool], what: &str) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::dim(what, labels.len(), scores.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("{what}: scores must be finite")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::SingleClass(what.to_string()));
    }
    Ok(())
}

/// Precision-recall curve as (recall, precision) points of ascending recall,
/// starting from the recall-0 anchor.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    validate_binary(scores, labels, "pr_curve")?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let total_pos = labels.iter().filter(|&&l| l).count() as f64;

    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // consume the whole tie group: one operating point per distinct score
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / total_pos;
        points.push((recall, precision));
    }
    let anchor = (0.0, points[0].1);
    let mut curve = vec![anchor];
    curve.extend(points);
    Ok(curve)
}

/// Area under the precision-recall curve by trapezoidal integration.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let curve = pr_curve(scores, labels)?;
    let mut area = 0.0;
    for w in curve.windows(2) {
        let (r0, p0) = w[0];
        let (r1, p1) = w[1];
        area += (r1 - r0) * (p1 + p0) / 2.0;
    }
    Ok(area)
}

/// Binary confusion counts with attacks as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

pub fn confusion(predictions: &[bool], labels: &[bool]) -> Confusion {
    assert_eq!(predictions.len(), labels.len());
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0 // no members and no predictions for this class
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Unweighted mean of the per-class F1 scores of the two classes.
pub fn macro_f1(predictions: &[bool], labels: &[bool]) -> f64 {
    let c = confusion(predictions, labels);
    let f1_pos = f1_from_counts(c.tp, c.fp, c.fn_);
    // negative class viewed as its own positive
    let f1_neg = f1_from_counts(c.tn, c.fn_, c.fp);
    (f1_pos + f1_neg) / 2.0
}

/// Validation-selected decision threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub macro_f1: f64,
    /// All validation scores were equal; the choice collapses to a sentinel.
    pub degenerate: bool,
}

/// Pick the threshold maximizing macro F1 on validation scores. Candidates
/// are midpoints between consecutive distinct scores plus ±∞ sentinels;
/// prediction is `score >= threshold`. Ties break toward the larger
/// threshold (fewer alarms).
pub fn select_threshold(scores: &[f64], labels: &[bool]) -> Result<ThresholdChoice> {
    validate_binary(scores, labels, "select_threshold")?;
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();

    let mut candidates = vec![f64::NEG_INFINITY];
    for w in distinct.windows(2) {
        candidates.push((w[0] + w[1]) / 2.0);
    }
    candidates.push(f64::INFINITY);

    let mut best = ThresholdChoice {
        threshold: f64::NEG_INFINITY,
        macro_f1: f64::NEG_INFINITY,
        degenerate: distinct.len() == 1,
    };
    for &t in &candidates {
        let preds: Vec<bool> = scores.iter().map(|&s| s >= t).collect();
        let f1 = macro_f1(&preds, labels);
        if f1 >= best.macro_f1 {
            best.threshold = t;
            best.macro_f1 = f1;
        }
    }
    Ok(best)
}

/// Five-number summary of a score set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl ScoreSummary {
    pub fn from_scores(scores: &[f64]) -> Option<ScoreSummary> {
        if scores.is_empty() {
            return None;
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |p: f64| -> f64 {
            let rank = p * (sorted.len() - 1) as f64;
            let lo = rank.floor() as usize;
            let hi = rank.ceil() as usize;
            let frac = rank - lo as f64;
            sorted[lo] * (1.0 - frac) + sorted[hi] * frac
        };
        Some(ScoreSummary {
            count: sorted.len(),
            min: sorted[0],
            q25: q(0.25),
            median: q(0.5),
            q75: q(0.75),
            max: sorted[sorted.len() - 1],
        })
    }
}

pub const BENIGN_TYPE_KEY: &str = "benign";

/// Full evaluation outcome: threshold selected on validation, all test-set
/// metrics, the PR curve, and per-attack-type score summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub val_pr_auc: f64,
    pub val_macro_f1: f64,
    pub threshold: f64,
    pub threshold_degenerate: bool,
    pub pr_auc: f64,
    pub macro_f1: f64,
    pub confusion: Confusion,
    /// (recall, precision) points including the recall-0 anchor.
    pub pr_curve: Vec<(f64, f64)>,
    pub per_type: BTreeMap<String, ScoreSummary>,
    pub config_fingerprint: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("report serializes"))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        serde_json::from_str(&s).map_err(|e| Error::Checkpoint(format!("bad report: {e}")))
    }

    /// PR-curve points as CSV (for the plot command).
    pub fn pr_curve_csv(&self) -> String {
        let mut out = String::from("recall,precision\n");
        for (r, p) in &self.pr_curve {
            out.push_str(&format!("{r},{p}\n"));
        }
        out
    }
}

/// Assemble the evaluation report: threshold from validation only, all other
/// metrics from the test partition.
pub fn evaluate_scores(
    val: &ScoredFlows,
    test: &ScoredFlows,
    config_fingerprint: String,
    seed: u64,
) -> Result<EvalReport> {
    let choice = select_threshold(&val.scores, &val.labels)?;
    let val_pr = pr_auc(&val.scores, &val.labels)?;
    let test_pr = pr_auc(&test.scores, &test.labels)
        .map_err(|e| Error::SingleClass(format!("test partition: {e}")))?;
    let curve = pr_curve(&test.scores, &test.labels)?;
    let preds: Vec<bool> = test.scores.iter().map(|&s| s >= choice.threshold).collect();
    let test_f1 = macro_f1(&preds, &test.labels);
    let conf = confusion(&preds, &test.labels);

    let mut by_type: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ((&score, &label), ty) in test
        .scores
        .iter()
        .zip(&test.labels)
        .zip(&test.attack_types)
    {
        let key = if label { ty.clone() } else { BENIGN_TYPE_KEY.to_string() };
        by_type.entry(key).or_default().push(score);
    }
    let per_type = by_type
        .into_iter()
        .filter_map(|(k, v)| ScoreSummary::from_scores(&v).map(|s| (k, s)))
        .collect();

    Ok(EvalReport {
        val_pr_auc: val_pr,
        val_macro_f1: choice.macro_f1,
        threshold: choice.threshold,
        threshold_degenerate: choice.degenerate,
        pr_auc: test_pr,
        macro_f1: test_f1,
        confusion: conf,
        pr_curve: curve,
        per_type,
        config_fingerprint,
        seed,
    })
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Brute-force reference implementations used only as test oracles.

    use super::macro_f1;

    /// O(n²) PR-AUC: evaluate precision/recall at every distinct threshold by
    /// direct counting, then integrate with the same anchor rule.
    pub fn brute_force_pr_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let total_pos = labels.iter().filter(|&&l| l).count() as f64;
        let mut points = Vec::new();
        for &t in &thresholds {
            let mut tp = 0.0;
            let mut fp = 0.0;
            for (&s, &l) in scores.iter().zip(labels) {
                if s >= t {
                    if l {
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                }
            }
            points.push((tp / total_pos, tp / (tp + fp)));
        }
        let mut curve = vec![(0.0, points[0].1)];
        curve.extend(points);
        let mut area = 0.0;
        for w in curve.windows(2) {
            area += (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0;
        }
        area
    }

    /// Exhaustive sweep over every candidate threshold; returns the best
    /// macro F1 achievable.
    pub fn brute_force_best_macro_f1(scores: &[f64], labels: &[bool]) -> f64 {
        let mut distinct: Vec<f64> = scores.to_vec();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        let mut candidates = vec![f64::NEG_INFINITY, f64::INFINITY];
        for w in distinct.windows(2) {
            candidates.push((w[0] + w[1]) / 2.0);
        }
        candidates
            .iter()
            .map(|&t| {
                let preds: Vec<bool> = scores.iter().map(|&s| s >= t).collect();
                macro_f1(&preds, labels)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}
