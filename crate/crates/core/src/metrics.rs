//! Multilabel evaluation: mAP, thresholded overall and per-class
//! precision/recall/F1, their top-k variant, and per-class AUC.

use crate::error::{KmclError, Result};
use crate::losses::LabelVector;

/// Scores `N×K` (the `π` outputs) with their ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    scores: Vec<Vec<f64>>,
    truths: Vec<LabelVector>,
}

impl PredictionSet {
    pub fn new(scores: Vec<Vec<f64>>, truths: Vec<LabelVector>) -> Result<Self> {
        if scores.len() != truths.len() {
            return Err(KmclError::DimensionMismatch {
                what: "prediction rows",
                expected: truths.len(),
                found: scores.len(),
            });
        }
        let k = truths.first().map_or(0, LabelVector::len);
        for (row, y) in scores.iter().zip(&truths) {
            if row.len() != k || y.len() != k {
                return Err(KmclError::DimensionMismatch {
                    what: "prediction columns",
                    expected: k,
                    found: row.len().min(y.len()),
                });
            }
            if row.iter().any(|s| !s.is_finite()) {
                return Err(KmclError::invalid("scores", "must be finite"));
            }
        }
        Ok(PredictionSet { scores, truths })
    }

    pub fn samples(&self) -> usize {
        self.scores.len()
    }

    pub fn classes(&self) -> usize {
        self.truths.first().map_or(0, LabelVector::len)
    }

    pub fn scores(&self) -> &[Vec<f64>] {
        &self.scores
    }

    pub fn truths(&self) -> &[LabelVector] {
        &self.truths
    }

    pub fn score_column(&self, k: usize) -> Vec<f64> {
        self.scores.iter().map(|r| r[k]).collect()
    }

    pub fn truth_column(&self, k: usize) -> Vec<bool> {
        self.truths.iter().map(|y| y.get(k)).collect()
    }
}

/// Indices sorted by descending score; equal scores keep their original order.
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Non-interpolated average precision: mean over positives of the precision
/// at each positive's rank. `None` when the column has no positives.
pub fn average_precision(scores: &[f64], truths: &[bool]) -> Option<f64> {
    let positives = truths.iter().filter(|&&t| t).count();
    if positives == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in descending_order(scores).iter().enumerate() {
        if truths[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

/// `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)` from average ranks. `None` unless the column
/// has both classes.
pub fn auc(scores: &[f64], truths: &[bool]) -> Option<f64> {
    let pos = truths.iter().filter(|&&t| t).count();
    let neg = truths.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Ranks start..end (1-based start+1..=end) share their mean.
        let mean_rank = (start + 1 + end) as f64 / 2.0;
        rank_sum += mean_rank * order[start..end].iter().filter(|&&i| truths[i]).count() as f64;
        start = end;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

/// Per-class values with degenerate classes left out of the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAverage {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl ClassAverage {
    fn from_columns(pred: &PredictionSet, f: fn(&[f64], &[bool]) -> Option<f64>) -> Self {
        let per_class: Vec<Option<f64>> = (0..pred.classes())
            .map(|k| f(&pred.score_column(k), &pred.truth_column(k)))
            .collect();
        let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if valid.is_empty() {
            0.0
        } else {
            valid.iter().sum::<f64>() / valid.len() as f64
        };
        ClassAverage { per_class, mean }
    }

    /// Classes without a defined value.
    pub fn excluded(&self) -> Vec<usize> {
        (0..self.per_class.len())
            .filter(|&k| self.per_class[k].is_none())
            .collect()
    }
}

pub fn mean_average_precision(pred: &PredictionSet) -> ClassAverage {
    ClassAverage::from_columns(pred, average_precision)
}

pub fn mean_auc(pred: &PredictionSet) -> ClassAverage {
    ClassAverage::from_columns(pred, auc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdMetrics {
    pub op: f64,
    pub or: f64,
    pub of1: f64,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
}

impl ThresholdMetrics {
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("OP", self.op),
            ("OR", self.or),
            ("OF1", self.of1),
            ("CP", self.cp),
            ("CR", self.cr),
            ("CF1", self.cf1),
        ]
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Pooled and per-class-averaged precision/recall/F1 of binary decisions.
/// Per-class F1 is the harmonic mean of the averaged CP and CR.
pub fn decision_metrics(decisions: &[Vec<bool>], truths: &[LabelVector]) -> ThresholdMetrics {
    let k = truths.first().map_or(0, LabelVector::len);
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fnn = vec![0usize; k];
    for (row, y) in decisions.iter().zip(truths) {
        for c in 0..k {
            match (row[c], y.get(c)) {
                (true, true) => tp[c] += 1,
                (true, false) => fp[c] += 1,
                (false, true) => fnn[c] += 1,
                (false, false) => {}
            }
        }
    }
    let (stp, sfp, sfn) = (
        tp.iter().sum::<usize>(),
        fp.iter().sum::<usize>(),
        fnn.iter().sum::<usize>(),
    );
    let op = ratio(stp, stp + sfp);
    let or = ratio(stp, stp + sfn);
    let (cp, cr) = if k == 0 {
        (0.0, 0.0)
    } else {
        (
            (0..k).map(|c| ratio(tp[c], tp[c] + fp[c])).sum::<f64>() / k as f64,
            (0..k).map(|c| ratio(tp[c], tp[c] + fnn[c])).sum::<f64>() / k as f64,
        )
    };
    ThresholdMetrics {
        op,
        or,
        of1: harmonic(op, or),
        cp,
        cr,
        cf1: harmonic(cp, cr),
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(KmclError::invalid("threshold", "must lie in (0, 1)"));
    }
    Ok(())
}

/// Metrics of the decisions `score ≥ threshold`.
pub fn overall_and_perclass(pred: &PredictionSet, threshold: f64) -> Result<ThresholdMetrics> {
    check_threshold(threshold)?;
    let decisions: Vec<Vec<bool>> = pred
        .scores
        .iter()
        .map(|r| r.iter().map(|&s| s >= threshold).collect())
        .collect();
    Ok(decision_metrics(&decisions, &pred.truths))
}

/// Metrics when each sample predicts only its `k` highest scores, and only
/// those that also reach `threshold`.
pub fn topk_metrics(pred: &PredictionSet, k: usize, threshold: f64) -> Result<ThresholdMetrics> {
    check_threshold(threshold)?;
    if k == 0 || k > pred.classes() {
        return Err(KmclError::invalid(
            "top_k",
            format!("must lie in 1..={}, got {k}", pred.classes()),
        ));
    }
    let decisions: Vec<Vec<bool>> = pred
        .scores
        .iter()
        .map(|r| {
            let mut keep = vec![false; r.len()];
            for &c in descending_order(r).iter().take(k) {
                keep[c] = r[c] >= threshold;
            }
            keep
        })
        .collect();
    Ok(decision_metrics(&decisions, &pred.truths))
}

/// Everything reported for one evaluated split.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub map: ClassAverage,
    pub auc: ClassAverage,
    pub thresholded: ThresholdMetrics,
    pub top_k: ThresholdMetrics,
    pub k: usize,
    pub threshold: f64,
}

impl MetricReport {
    pub fn compute(pred: &PredictionSet, threshold: f64, k: usize) -> Result<Self> {
        Ok(MetricReport {
            map: mean_average_precision(pred),
            auc: mean_auc(pred),
            thresholded: overall_and_perclass(pred, threshold)?,
            top_k: topk_metrics(pred, k.min(pred.classes()), threshold)?,
            k: k.min(pred.classes()),
            threshold,
        })
    }

    /// `(metric, class, value)` rows; `class` is `overall` for aggregates.
    /// Undefined per-class values are written as `nan`.
    pub fn rows(&self) -> Vec<(String, String, f64)> {
        let mut rows = vec![("mAP".to_string(), "overall".to_string(), self.map.mean)];
        rows.push(("mean_AUC".into(), "overall".into(), self.auc.mean));
        for (name, v) in self.thresholded.named() {
            rows.push((name.to_string(), "overall".into(), v));
        }
        for (name, v) in self.top_k.named() {
            rows.push((format!("top{}_{name}", self.k), "overall".into(), v));
        }
        for (k, ap) in self.map.per_class.iter().enumerate() {
            rows.push(("AP".into(), k.to_string(), ap.unwrap_or(f64::NAN)));
        }
        for (k, a) in self.auc.per_class.iter().enumerate() {
            rows.push(("AUC".into(), k.to_string(), a.unwrap_or(f64::NAN)));
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,class,value\n");
        for (m, c, v) in self.rows() {
            out.push_str(&format!("{m},{c},{v:?}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(rows: &[&[u8]]) -> Vec<LabelVector> {
        rows.iter().map(|r| LabelVector::new(r.to_vec()).unwrap()).collect()
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.2, 0.8], &[true, false, true]), Some(1.0));
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        let last = average_precision(&[0.9, 0.8, 0.1], &[false, false, true]).unwrap();
        assert!((last - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.1, 0.2], &[false, false]), None);
    }

    #[test]
    fn ties_keep_original_order() {
        // Equal scores: the earlier sample ranks first.
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]), Some(1.0));
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]), Some(0.5));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(auc(&[0.3; 4], &[false, true, false, true]), Some(0.5));
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]), Some(0.75));
        assert_eq!(auc(&[0.1, 0.4], &[true, true]), None);
    }

    #[test]
    fn threshold_examples() {
        let truths = labels(&[&[1, 0], &[1, 1]]);
        let perfect = PredictionSet::new(vec![vec![0.9, 0.1], vec![0.8, 0.7]], truths.clone()).unwrap();
        let m = overall_and_perclass(&perfect, 0.5).unwrap();
        assert_eq!([m.op, m.or, m.of1, m.cp, m.cr, m.cf1], [1.0; 6]);

        let silent = PredictionSet::new(vec![vec![0.1, 0.1], vec![0.2, 0.3]], truths.clone()).unwrap();
        let m = overall_and_perclass(&silent, 0.5).unwrap();
        assert_eq!((m.op, m.or, m.of1), (0.0, 0.0, 0.0));

        let hand = PredictionSet::new(vec![vec![0.9, 0.6], vec![0.7, 0.2]], truths).unwrap();
        let m = overall_and_perclass(&hand, 0.5).unwrap();
        for v in [m.op, m.or, m.of1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
        // Class 0: P=1, R=1. Class 1: P=0 (one false positive), R=0.
        assert_eq!((m.cp, m.cr), (0.5, 0.5));
        assert!(overall_and_perclass(&hand, 1.0).is_err());
    }

    #[test]
    fn topk_examples() {
        let truths = labels(&[&[1, 0, 1, 1]]);
        let pred = PredictionSet::new(vec![vec![0.9, 0.8, 0.7, 0.1]], truths).unwrap();
        let m = topk_metrics(&pred, 3, 0.05).unwrap();
        // TP=2, FP=1, FN=1.
        assert!((m.op - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.or - 2.0 / 3.0).abs() < 1e-15);
        let all = topk_metrics(&pred, 4, 0.5).unwrap();
        assert_eq!(all, overall_and_perclass(&pred, 0.5).unwrap());
        assert!(topk_metrics(&pred, 5, 0.5).is_err());

        let five = PredictionSet::new(vec![vec![0.9; 5]], labels(&[&[1, 1, 1, 1, 1]])).unwrap();
        let m = topk_metrics(&five, 3, 0.5).unwrap();
        assert!((m.or - 3.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn map_excludes_columns_without_positives() {
        let truths = labels(&[&[1, 0], &[0, 0]]);
        let pred = PredictionSet::new(vec![vec![0.9, 0.3], vec![0.1, 0.2]], truths).unwrap();
        let m = mean_average_precision(&pred);
        assert_eq!(m.mean, 1.0);
        assert_eq!(m.excluded(), vec![1]);
    }

    #[test]
    fn shuffled_labels_stay_near_positive_rate() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let (n, k) = (2000, 5);
        let truths: Vec<LabelVector> = (0..n)
            .map(|_| LabelVector::new((0..k).map(|_| rng.random_bool(0.3) as u8).collect()).unwrap())
            .collect();
        let scores = (0..n).map(|_| (0..k).map(|_| rng.random::<f64>()).collect()).collect();
        let pred = PredictionSet::new(scores, truths).unwrap();
        let m = mean_average_precision(&pred).mean;
        assert!((m - 0.3).abs() < 0.05, "{m}");
        assert!((mean_auc(&pred).mean - 0.5).abs() < 0.05);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let truths = labels(&[&[1, 0], &[0, 1]]);
        let pred = PredictionSet::new(vec![vec![0.9, 0.3], vec![0.1, 0.7]], truths).unwrap();
        let report = MetricReport::compute(&pred, 0.5, 3).unwrap();
        let csv = report.to_csv();
        assert!(csv.starts_with("metric,class,value\nmAP,overall,1.0\n"));
        assert!(csv.contains("top2_OP,overall,"));
        assert_eq!(csv.lines().count(), 1 + 2 + 6 + 6 + 2 + 2);
    }

    fn column() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                proptest::collection::vec(-5.0f64..5.0, n),
                proptest::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance((scores, truths) in column()) {
            let squashed: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect();
            let shifted: Vec<f64> = scores.iter().map(|s| s * 3.0 + 1.0).collect();
            prop_assert_eq!(average_precision(&scores, &truths), average_precision(&shifted, &truths));
            prop_assert_eq!(auc(&scores, &truths), auc(&shifted, &truths));
            prop_assert_eq!(auc(&scores, &truths), auc(&squashed, &truths));
        }

        #[test]
        fn permutation_invariance_without_ties((scores, truths) in column(), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut idx: Vec<usize> = (0..scores.len()).collect();
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let s2: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let t2: Vec<bool> = idx.iter().map(|&i| truths[i]).collect();
            let a = average_precision(&scores, &truths);
            let b = average_precision(&s2, &t2);
            match (a, b) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
            let (a, b) = (auc(&scores, &truths), auc(&s2, &t2));
            match (a, b) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }
    }
}
