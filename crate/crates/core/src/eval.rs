//! Point- and instance-level detection metrics.
//!
//! Every metric here is computed point by point against the ground truth;
//! there is no point-adjust step that would credit a whole true segment when
//! any of its points is flagged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

impl MetricReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            iou: ratio(tp, tp + fp + fn_),
            degenerate: tp + fp == 0 || tp + fn_ == 0,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::fmt::Display for MetricReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<10} {:>10}", "metric", "value")?;
        writeln!(f, "{:<10} {:>10}", "tp", self.tp)?;
        writeln!(f, "{:<10} {:>10}", "fp", self.fp)?;
        writeln!(f, "{:<10} {:>10}", "fn", self.fn_)?;
        writeln!(f, "{:<10} {:>10}", "tn", self.tn)?;
        writeln!(f, "{:<10} {:>10.4}", "precision", self.precision)?;
        writeln!(f, "{:<10} {:>10.4}", "recall", self.recall)?;
        writeln!(f, "{:<10} {:>10.4}", "f1", self.f1)?;
        write!(f, "{:<10} {:>10.4}", "iou", self.iou)?;
        if self.degenerate {
            write!(f, "\n(degenerate: a ratio had a zero denominator)")?;
        }
        Ok(())
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            context: "prediction vs ground truth",
            expected: b,
            found: a,
        });
    }
    Ok(())
}

pub fn point_metrics(pred: &[bool], truth: &[bool]) -> Result<MetricReport> {
    check_lengths(pred.len(), truth.len())?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(MetricReport::from_counts(tp, fp, fn_, tn))
}

/// Metrics for predictions `score >= threshold`.
pub fn instance_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<MetricReport> {
    check_lengths(scores.len(), labels.len())?;
    let pred: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    point_metrics(&pred, labels)
}

/// Candidate thresholds in ascending order: just below the minimum, the
/// midpoints between consecutive distinct scores, and just above the maximum.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut uniq: Vec<f64> = scores.to_vec();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    let Some((&lo, &hi)) = uniq.first().zip(uniq.last()) else {
        return vec![0.0];
    };
    let mut out = Vec::with_capacity(uniq.len() + 1);
    out.push(lo.next_down());
    out.extend(uniq.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out.push(hi.next_up());
    out
}

/// Threshold sweep returning the report with the best F1 (ties go to the
/// smallest threshold) and that threshold. With no positives in `truth` the
/// all-normal threshold is returned.
pub fn best_threshold_metrics(scores: &[f64], truth: &[bool]) -> Result<(MetricReport, f64)> {
    check_lengths(scores.len(), truth.len())?;
    let candidates = candidate_thresholds(scores);
    let n_pos = truth.iter().filter(|&&t| t).count();
    let n = truth.len();
    if n_pos == 0 {
        let above = *candidates.last().expect("nonempty");
        return Ok((instance_metrics(scores, truth, above)?, above));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // descending sweep; `tp`/`fp` count points with score >= threshold
    let mut best: Option<(MetricReport, f64)> = None;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut idx = 0;
    for &thr in candidates.iter().rev() {
        while idx < n && scores[order[idx]] >= thr {
            if truth[order[idx]] {
                tp += 1;
            } else {
                fp += 1;
            }
            idx += 1;
        }
        let report = MetricReport::from_counts(tp, fp, n_pos - tp, n - n_pos - fp);
        // `>=` keeps the later, i.e. smaller, threshold on ties
        if best.as_ref().is_none_or(|(b, _)| report.f1 >= b.f1) {
            best = Some((report, thr));
        }
    }
    Ok(best.expect("at least one candidate"))
}

/// Rank-based (Mann–Whitney) AUROC with tied scores counted as one half.
pub fn auroc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), truth.len())?;
    let n_pos = truth.iter().filter(|&&t| t).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid("AUROC needs both classes in the ground truth".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // average 1-based rank of the tie group
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| truth[k]).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&x| x == 1).collect()
    }

    #[test]
    fn hand_computed_point_metrics() {
        let r = point_metrics(&b(&[1, 1, 0, 0]), &b(&[1, 0, 1, 0])).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_, r.tn), (1, 1, 1, 1));
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
        assert_eq!(r.iou, 1.0 / 3.0);
        assert!(!r.degenerate);

        let r = point_metrics(&b(&[0, 1, 1]), &b(&[0, 1, 1])).unwrap();
        assert_eq!((r.f1, r.iou), (1.0, 1.0));

        let r = point_metrics(&b(&[0, 0]), &b(&[0, 0])).unwrap();
        assert_eq!(r.f1, 0.0);
        assert!(r.degenerate);

        assert!(point_metrics(&b(&[0]), &b(&[0, 1])).is_err());
    }

    #[test]
    fn best_threshold_examples() {
        let (r, thr) = best_threshold_metrics(&[0.1, 0.9, 0.8, 0.2], &b(&[0, 1, 1, 0])).unwrap();
        assert_eq!((r.f1, r.iou), (1.0, 1.0));
        assert_eq!(thr, 0.5);

        let (r, thr) = best_threshold_metrics(&[0.1, 0.9, 0.8, 0.2], &b(&[0, 0, 0, 0])).unwrap();
        assert_eq!(r.f1, 0.0);
        assert!(thr > 0.9);
        assert_eq!(r.tp + r.fp, 0);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.9, 0.8, 0.2], &b(&[0, 1, 1, 0])).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &b(&[0, 1, 1, 0])).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.1, 0.2, 0.8], &b(&[0, 1, 1, 0])).unwrap(), 0.0);
        assert!(auroc(&[0.1, 0.2], &b(&[1, 1])).is_err());
    }

    #[test]
    fn instance_metric_examples() {
        assert_eq!(instance_metrics(&[0.2, 0.8], &b(&[0, 1]), 0.5).unwrap().f1, 1.0);
        assert_eq!(instance_metrics(&[0.2, 0.8], &b(&[0, 1]), 0.9).unwrap().f1, 0.0);
    }

    /// Brute-force sweep over every candidate threshold.
    fn oracle(scores: &[f64], truth: &[bool]) -> (f64, f64) {
        let mut best = (-1.0, f64::NAN);
        for thr in candidate_thresholds(scores) {
            let f1 = instance_metrics(scores, truth, thr).unwrap().f1;
            if f1 > best.0 {
                best = (f1, thr);
            }
        }
        best
    }

    proptest! {
        #[test]
        fn sweep_matches_oracle(data in prop::collection::vec((0u8..20, any::<bool>()), 1..60)) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 20.0).collect();
            let truth: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(truth.iter().any(|&t| t));
            let (report, thr) = best_threshold_metrics(&scores, &truth).unwrap();
            let (f1, othr) = oracle(&scores, &truth);
            prop_assert_eq!(report.f1, f1);
            prop_assert_eq!(thr, othr);
            prop_assert_eq!(&report, &instance_metrics(&scores, &truth, thr).unwrap());
        }

        #[test]
        fn best_dominates_fixed(data in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..60), thr in 0.0f64..1.0) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let truth: Vec<bool> = data.iter().map(|d| d.1).collect();
            let best = best_threshold_metrics(&scores, &truth).unwrap().0.f1;
            prop_assert!(best >= instance_metrics(&scores, &truth, thr).unwrap().f1);
        }

        #[test]
        fn counts_sum_to_length(pred in prop::collection::vec(any::<bool>(), 0..50), seed in any::<u64>()) {
            let truth: Vec<bool> = pred.iter().enumerate().map(|(i, _)| (seed >> (i % 64)) & 1 == 1).collect();
            prop_assert_eq!(point_metrics(&pred, &truth).unwrap().total(), pred.len());
        }

        #[test]
        fn auroc_invariant_under_monotone_maps(data in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..60)) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let truth: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(truth.iter().any(|&t| t) && truth.iter().any(|&t| !t));
            let moved: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auroc(&scores, &truth).unwrap(), auroc(&moved, &truth).unwrap());
        }
    }
}
