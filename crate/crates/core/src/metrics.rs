//! Rank-based binary classification metrics.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::io;

/// Positive-class scores with their binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredLabels {
    scores: Vec<f64>,
    labels: Vec<bool>,
    n_pos: usize,
}

/// One point of the precision/recall sweep: predict positive iff `score >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub bep: f64,
    pub dep: f64,
    pub r_m: f64,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(contract(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(contract(format!("non-finite score {bad}")));
        }
        let n_pos = labels.iter().filter(|&&l| l).count();
        if n_pos == 0 || n_pos == labels.len() {
            return Err(Error::UndefinedMetric(format!(
                "{n_pos} positives among {} samples; need both classes",
                labels.len()
            )));
        }
        Ok(Self {
            scores,
            labels,
            n_pos,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_pos(&self) -> usize {
        self.n_pos
    }

    pub fn n_neg(&self) -> usize {
        self.len() - self.n_pos
    }

    fn order_desc(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            self.scores[b]
                .partial_cmp(&self.scores[a])
                .unwrap_or(Ordering::Equal)
        });
        idx
    }
}

/// Mann-Whitney statistic with tie-averaged ranks.
pub fn auc(sl: &ScoredLabels) -> f64 {
    let mut idx: Vec<usize> = (0..sl.len()).collect();
    idx.sort_by(|&a, &b| {
        sl.scores[a]
            .partial_cmp(&sl.scores[b])
            .unwrap_or(Ordering::Equal)
    });
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && sl.scores[idx[j + 1]] == sl.scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if sl.labels[k] {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let np = sl.n_pos() as f64;
    let nn = sl.n_neg() as f64;
    (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Sweep over distinct scores, highest threshold first.
pub fn pr_curve(sl: &ScoredLabels) -> Vec<PrPoint> {
    let idx = sl.order_desc();
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let thr = sl.scores[idx[i]];
        while i < idx.len() && sl.scores[idx[i]] == thr {
            if sl.labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(PrPoint {
            threshold: thr,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / sl.n_pos as f64,
            tp,
            fp,
        });
    }
    out
}

fn f1_of(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Best F1 and best accuracy over all thresholds (each maximized on its own).
pub fn max_f1_acc(sl: &ScoredLabels) -> (f64, f64) {
    let n = sl.len();
    let mut best_f1 = 0.0f64;
    // Predicting nobody positive is also a threshold.
    let mut best_acc = sl.n_neg() as f64 / n as f64;
    for p in pr_curve(sl) {
        let fn_ = sl.n_pos - p.tp;
        let tn = sl.n_neg() - p.fp;
        best_f1 = best_f1.max(f1_of(p.tp, p.fp, fn_));
        best_acc = best_acc.max((p.tp + tn) as f64 / n as f64);
    }
    (best_f1, best_acc)
}

/// F1 at a fixed threshold (`score >= threshold` is positive).
pub fn f1_at(sl: &ScoredLabels, threshold: f64) -> f64 {
    let mut tp = 0;
    let mut fp = 0;
    for (s, &l) in sl.scores.iter().zip(&sl.labels) {
        if *s >= threshold {
            if l {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    f1_of(tp, fp, sl.n_pos - tp)
}

/// Precision where the curve crosses precision = recall.
pub fn bep(sl: &ScoredLabels) -> f64 {
    bep_from_curve(&pr_curve(sl))
}

fn bep_from_curve(curve: &[PrPoint]) -> f64 {
    // Walk from the high-recall end so ties resolve toward higher recall.
    let mut best: Option<(f64, f64)> = None; // (gap, value)
    let mut consider = |gap: f64, value: f64| {
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, value));
        }
    };
    for k in (0..curve.len()).rev() {
        let a = curve[k];
        let da = a.precision - a.recall;
        consider(da.abs(), a.precision);
        if k > 0 {
            let b = curve[k - 1];
            let db = b.precision - b.recall;
            if da * db < 0.0 {
                let lambda = db / (db - da);
                consider(0.0, b.precision + lambda * (a.precision - b.precision));
            }
        }
    }
    best.map_or(0.0, |(_, v)| v)
}

/// Minimum recall needed to drive the epidemic extinct.
pub fn r_m(r0: f64) -> f64 {
    1.0 - 1.0 / r0
}

/// Highest precision among thresholds whose recall reaches `1 - 1/r0`.
pub fn dep(sl: &ScoredLabels, r0: f64) -> Result<f64> {
    if !(r0 > 1.0) {
        return Err(contract(format!("r0 must exceed 1, got {r0}")));
    }
    let need = r_m(r0);
    Ok(pr_curve(sl)
        .iter()
        .filter(|p| p.recall >= need)
        .map(|p| p.precision)
        .fold(0.0, f64::max))
}

pub fn evaluate(sl: &ScoredLabels, r0: f64) -> Result<Metrics> {
    let (f1, accuracy) = max_f1_acc(sl);
    Ok(Metrics {
        auc: auc(sl),
        f1,
        accuracy,
        bep: bep(sl),
        dep: dep(sl, r0)?,
        r_m: r_m(r0),
    })
}

pub fn export_pr_curve(curve: &[PrPoint], path: &Path) -> Result<()> {
    io::write_csv(
        path,
        &["threshold", "precision", "recall"],
        curve.iter().map(|p| {
            [
                format!("{}", p.threshold),
                format!("{}", p.precision),
                format!("{}", p.recall),
            ]
        }),
    )
}

pub fn export_predictions(scores: &[f64], path: &Path) -> Result<()> {
    io::write_csv(
        path,
        &["user_id", "score"],
        scores
            .iter()
            .enumerate()
            .map(|(u, s)| [u.to_string(), format!("{s}")]),
    )
}

pub fn read_predictions(path: &Path) -> Result<Vec<f64>> {
    let rows = io::read_csv_rows(path, &["user_id", "score"], "train")?;
    let mut out = Vec::with_capacity(rows.len());
    for (i, (line, f)) in rows.iter().enumerate() {
        let u: usize = io::parse_field(path, *line, "user_id", &f[0])?;
        if u != i {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                msg: "predictions must list users 0..N in order".into(),
            });
        }
        out.push(io::parse_field(path, *line, "score", &f[1])?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sl(scores: &[f64], labels: &[u8]) -> ScoredLabels {
        ScoredLabels::new(scores.to_vec(), labels.iter().map(|&l| l == 1).collect()).unwrap()
    }

    #[test]
    fn perfect_separation() {
        let s = sl(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]);
        assert_eq!(auc(&s), 1.0);
        assert_eq!(max_f1_acc(&s), (1.0, 1.0));
        assert_eq!(bep(&s), 1.0);
    }

    #[test]
    fn constant_scores_give_half() {
        let s = sl(&[0.4; 6], &[1, 0, 0, 1, 1, 0]);
        assert_eq!(auc(&s), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        let err = ScoredLabels::new(vec![0.1, 0.2], vec![true, true]).unwrap_err();
        assert!(matches!(err, Error::UndefinedMetric(_)));
    }

    #[test]
    fn bep_hand_example() {
        let s = sl(&[0.9, 0.8, 0.7, 0.1], &[1, 0, 1, 0]);
        assert_eq!(bep(&s), 0.5);
    }

    #[test]
    fn bep_interpolates_across_crossing() {
        let curve = [
            PrPoint {
                threshold: 0.9,
                precision: 1.0,
                recall: 0.2,
                tp: 1,
                fp: 0,
            },
            PrPoint {
                threshold: 0.5,
                precision: 0.4,
                recall: 0.8,
                tp: 4,
                fp: 6,
            },
        ];
        // p - r goes 0.8 -> -0.4; crossing at lambda = 2/3, p = 1 - 0.6*2/3 = 0.6
        assert!((bep_from_curve(&curve) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn max_f1_dominates_fixed_threshold() {
        let s = sl(
            &[0.9, 0.2, 0.7, 0.6, 0.55, 0.1, 0.45],
            &[1, 0, 0, 1, 1, 0, 1],
        );
        assert!(max_f1_acc(&s).0 >= f1_at(&s, 0.5));
    }

    #[test]
    fn r_m_matches_extinction_recall() {
        assert!((r_m(5.7) - 0.824561).abs() < 1e-6);
        assert!((r_m(10.78) - 0.907236).abs() < 1e-6);
        assert_eq!(format!("{:.4}", r_m(5.7)), "0.8246");
        assert_eq!(format!("{:.4}", r_m(10.78)), "0.9072");
    }

    #[test]
    fn dep_hand_example_and_errors() {
        let s = sl(&[0.9, 0.8, 0.7, 0.6, 0.1], &[1, 1, 1, 0, 0]);
        assert_eq!(dep(&s, 5.7).unwrap(), 1.0);
        assert!(dep(&s, 1.0).is_err());
        assert!(dep(&s, 0.5).is_err());
    }

    #[test]
    fn pr_recall_non_increasing_with_threshold() {
        let s = sl(&[0.3, 0.1, 0.9, 0.3, 0.5, 0.7], &[1, 0, 1, 0, 0, 1]);
        let c = pr_curve(&s);
        for w in c.windows(2) {
            assert!(w[0].threshold > w[1].threshold);
            assert!(w[0].recall <= w[1].recall);
        }
        assert_eq!(c.last().unwrap().recall, 1.0);
    }

    #[test]
    fn predictions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("predictions.csv");
        let scores = vec![0.25, 0.1 + 0.2, 1.0 / 3.0];
        export_predictions(&scores, &p).unwrap();
        assert_eq!(read_predictions(&p).unwrap(), scores);
    }
}
