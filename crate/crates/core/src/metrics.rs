//! Binary classification metrics, grade accuracies and report tables.
//!
//! All rates are percentages. A sample is predicted positive when its score
//! is `>= cutoff`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::SyntheticDataset;
use crate::train::{TrainError, TrainedModel};

pub const DEFAULT_CUTOFF: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no samples")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("score {value} at index {index} is outside [0, 1]")]
    Score { index: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::Add for Confusion {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

/// Metrics of a single evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Absent when the labels contain a single class.
    pub auc: Option<f64>,
    pub precision: f64,
    pub f_score: f64,
    pub confusion: Confusion,
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

pub fn compute_metrics(scores: &[f64], labels: &[bool], cutoff: f64) -> Result<BinaryMetrics, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Length(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(index) = scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
        return Err(MetricsError::Score {
            index,
            value: scores[index],
        });
    }
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= cutoff, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let precision = pct(c.tp, c.tp + c.fp);
    let sensitivity = pct(c.tp, c.tp + c.fn_);
    let f_score = if precision + sensitivity > 0.0 {
        2.0 * precision * sensitivity / (precision + sensitivity)
    } else {
        0.0
    };
    Ok(BinaryMetrics {
        accuracy: pct(c.tp + c.tn, c.total()),
        sensitivity,
        specificity: pct(c.tn, c.tn + c.fp),
        auc: auc(scores, labels),
        precision,
        f_score,
        confusion: c,
    })
}

/// Area under the ROC curve as a percentage: the probability that a random
/// positive outscores a random negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mann-Whitney U with midranks.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(100.0 * u / (pos as f64 * neg as f64))
}

/// Share of predictions within one grade of the truth.
pub fn off_by_one_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64, MetricsError> {
    if predicted.len() != truth.len() {
        return Err(MetricsError::Length(predicted.len(), truth.len()));
    }
    if predicted.is_empty() {
        return Err(MetricsError::Empty);
    }
    let ok = predicted.iter().zip(truth).filter(|(p, t)| p.abs_diff(**t) <= 1).count();
    Ok(pct(ok, predicted.len()))
}

pub fn exact_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64, MetricsError> {
    if predicted.len() != truth.len() {
        return Err(MetricsError::Length(predicted.len(), truth.len()));
    }
    if predicted.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(pct(predicted.iter().zip(truth).filter(|(p, t)| p == t).count(), predicted.len()))
}

/// Everything measured in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub binary: BinaryMetrics,
    pub off_by_one: Option<f64>,
    /// Exact grade accuracy of each attribute (nodes 1..).
    pub attribute_accuracy: Vec<f64>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (g, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = g;
        }
    }
    best + 1
}

/// Scores a trained model on a labelled dataset. Attribute grades are read
/// from the fused outputs, the disease grade from the final BN.
pub fn evaluate(trained: &TrainedModel, data: &SyntheticDataset, cutoff: f64) -> Result<RunMetrics, TrainError> {
    let m = &trained.model;
    if data.nodes != m.shape.nodes || data.grades_per_node != m.shape.grades {
        return Err(TrainError::Data(format!(
            "dataset has {} nodes × {} grades, model expects {} × {}",
            data.nodes, data.grades_per_node, m.shape.nodes, m.shape.grades
        )));
    }
    let pred = m.predict(data.features.view())?;
    let scores: Vec<f64> = pred.disease_scores().into_iter().map(|s| s.clamp(0.0, 1.0)).collect();
    let binary = compute_metrics(&scores, &data.binary_labels(), cutoff)
        .map_err(|e| TrainError::Data(e.to_string()))?;
    let n = data.nodes;
    let disease_pred: Vec<usize> = pred
        .final_disease
        .outer_iter()
        .map(|r| argmax(r.as_slice().expect("row")))
        .collect();
    let disease_true: Vec<usize> = data.grades.iter().map(|g| g[0]).collect();
    let off_by_one = off_by_one_accuracy(&disease_pred, &disease_true).ok();
    let attribute_accuracy = (1..n)
        .map(|a| {
            let p: Vec<usize> = (0..data.len())
                .map(|i| argmax(pred.fused.row(i * n + a).as_slice().expect("row")))
                .collect();
            let t: Vec<usize> = data.grades.iter().map(|g| g[a]).collect();
            exact_accuracy(&p, &t).unwrap_or(0.0)
        })
        .collect();
    Ok(RunMetrics {
        binary,
        off_by_one,
        attribute_accuracy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

/// Metrics aggregated over repeats. Each entry is the mean and sd of the
/// per-run values; confusion counts are summed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub runs: usize,
    pub accuracy: MeanSd,
    pub sensitivity: MeanSd,
    pub specificity: MeanSd,
    /// Over the runs where it was defined; absent if it never was.
    pub auc: Option<MeanSd>,
    pub precision: MeanSd,
    pub f_score: MeanSd,
    pub off_by_one: Option<MeanSd>,
    pub attribute_accuracy: Vec<MeanSd>,
    pub confusion: Confusion,
}

impl MetricsReport {
    /// Panics on an empty slice.
    pub fn aggregate(runs: &[RunMetrics]) -> Self {
        assert!(!runs.is_empty(), "no runs to aggregate");
        let col = |f: &dyn Fn(&RunMetrics) -> f64| MeanSd::of(&runs.iter().map(f).collect::<Vec<_>>());
        let aucs: Vec<f64> = runs.iter().filter_map(|r| r.binary.auc).collect();
        let obo: Vec<f64> = runs.iter().filter_map(|r| r.off_by_one).collect();
        let attrs = runs.iter().map(|r| r.attribute_accuracy.len()).min().unwrap_or(0);
        Self {
            runs: runs.len(),
            accuracy: col(&|r| r.binary.accuracy),
            sensitivity: col(&|r| r.binary.sensitivity),
            specificity: col(&|r| r.binary.specificity),
            auc: (!aucs.is_empty()).then(|| MeanSd::of(&aucs)),
            precision: col(&|r| r.binary.precision),
            f_score: col(&|r| r.binary.f_score),
            off_by_one: (!obo.is_empty()).then(|| MeanSd::of(&obo)),
            attribute_accuracy: (0..attrs).map(|a| col(&|r| r.attribute_accuracy[a])).collect(),
            confusion: runs.iter().fold(Confusion::default(), |acc, r| acc + r.binary.confusion),
        }
    }

    /// Fixed-width text rendering.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let mut line = |name: &str, v: Option<MeanSd>| {
            let cell = match v {
                Some(m) => format!("{:>8.2} ± {:<6.2}", m.mean, m.sd),
                None => format!("{:>8} {:<8}", "n/a", ""),
            };
            let _ = writeln!(out, "{name:<16}{cell}");
        };
        line("accuracy", Some(self.accuracy));
        line("sensitivity", Some(self.sensitivity));
        line("specificity", Some(self.specificity));
        line("auc", self.auc);
        line("precision", Some(self.precision));
        line("f-score", Some(self.f_score));
        line("off-by-one", self.off_by_one);
        for (a, m) in self.attribute_accuracy.iter().enumerate() {
            line(&format!("attribute {}", a + 1), Some(*m));
        }
        let c = self.confusion;
        let _ = writeln!(
            out,
            "{:<16}tp {} fp {} tn {} fn {} (runs {})",
            "confusion", c.tp, c.fp, c.tn, c.fn_, self.runs
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn perfect_scores() {
        let m = compute_metrics(&[1.0, 1.0, 0.0, 0.0], &[true, true, false, false], 0.5).unwrap();
        for v in [m.accuracy, m.sensitivity, m.specificity, m.precision, m.f_score, m.auc.unwrap()] {
            assert_eq!(v, 100.0);
        }
    }

    #[test]
    fn constant_scores_use_ge_rule() {
        let m = compute_metrics(&[0.5; 4], &[true, false, true, false], 0.5).unwrap();
        assert_eq!(m.accuracy, 50.0);
        assert_eq!(m.sensitivity, 100.0);
        assert_eq!(m.specificity, 0.0);
        assert_eq!(m.auc, Some(50.0));
    }

    #[test]
    fn ranked_scores() {
        let m = compute_metrics(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false], 0.5).unwrap();
        assert_eq!(m.auc, Some(100.0));
        assert_eq!(m.accuracy, 100.0);
        // one inverted pair out of four
        let a = auc(&[0.9, 0.2, 0.3, 0.1], &[true, true, false, false]).unwrap();
        assert_abs_diff_eq!(a, 75.0, epsilon = 1e-12);
    }

    #[test]
    fn single_class_has_no_auc() {
        let m = compute_metrics(&[0.2, 0.7], &[true, true], 0.5).unwrap();
        assert_eq!(m.auc, None);
        assert_eq!(m.specificity, 0.0);
        assert_eq!(m.precision, 100.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(compute_metrics(&[], &[], 0.5), Err(MetricsError::Empty));
        assert_eq!(compute_metrics(&[0.1], &[], 0.5), Err(MetricsError::Length(1, 0)));
        assert!(matches!(compute_metrics(&[1.5], &[true], 0.5), Err(MetricsError::Score { index: 0, .. })));
        assert!(off_by_one_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn off_by_one() {
        assert_eq!(off_by_one_accuracy(&[1, 3, 5], &[1, 3, 5]).unwrap(), 100.0);
        assert_eq!(off_by_one_accuracy(&[2, 4, 5], &[1, 3, 5]).unwrap(), 100.0);
        assert_eq!(off_by_one_accuracy(&[4, 5], &[2, 3]).unwrap(), 0.0);
    }

    #[test]
    fn aggregate_and_table() {
        let run = |acc: f64| RunMetrics {
            binary: BinaryMetrics {
                accuracy: acc,
                sensitivity: 50.0,
                specificity: 50.0,
                auc: None,
                precision: 50.0,
                f_score: 50.0,
                confusion: Confusion { tp: 1, fp: 1, tn: 1, fn_: 1 },
            },
            off_by_one: Some(90.0),
            attribute_accuracy: vec![60.0, 70.0],
        };
        let r = MetricsReport::aggregate(&[run(40.0), run(60.0)]);
        assert_eq!(r.accuracy.mean, 50.0);
        assert_abs_diff_eq!(r.accuracy.sd, 200f64.sqrt(), epsilon = 1e-12);
        assert_eq!(r.auc, None);
        assert_eq!(r.confusion.total(), 8);
        let t = r.to_table();
        assert!(t.contains("attribute 2"));
        assert!(t.lines().any(|l| l.starts_with("auc") && l.contains("n/a")));
    }
}
