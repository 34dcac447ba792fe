//! Binary classification metrics with poisonous (class 1) as the positive
//! class, and the comparison table CSV.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::softmax;
use crate::tensor::Tensor;

/// True labels, positive-class scores and predicted labels for a set of instances.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    labels: Vec<usize>,
    scores: Vec<f64>,
    predicted: Vec<usize>,
}

impl PredictionSet {
    /// Predicted labels are `score ≥ 0.5`, so an exact tie goes to the
    /// positive class.
    pub fn from_scores(labels: Vec<usize>, scores: Vec<f64>) -> Result<Self> {
        let predicted = scores.iter().map(|&s| usize::from(s >= 0.5)).collect();
        PredictionSet::new(labels, scores, predicted)
    }

    pub fn new(labels: Vec<usize>, scores: Vec<f64>, predicted: Vec<usize>) -> Result<Self> {
        if labels.len() != scores.len() || labels.len() != predicted.len() {
            return Err(Error::Metrics(format!(
                "{} labels, {} scores and {} predictions do not line up",
                labels.len(),
                scores.len(),
                predicted.len()
            )));
        }
        if let Some(bad) = labels.iter().chain(&predicted).find(|&&l| l > 1) {
            return Err(Error::Metrics(format!("label {bad} is not 0 or 1")));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score of instance {i}")));
        }
        Ok(PredictionSet { labels, scores, predicted })
    }

    /// Scores from `(N, 2)` logits: the softmax probability of class 1;
    /// predictions are the argmax, ties going to class 1.
    pub fn from_logits(labels: Vec<usize>, logits: &Tensor<f32>) -> Result<Self> {
        if logits.rank() != 2 || logits.shape()[1] != 2 {
            return Err(Error::Shape(format!("expected (N, 2) logits, got {}", crate::error::fmt_shape(logits.shape()))));
        }
        let probs = softmax(logits.data(), 2);
        let scores: Vec<f64> = probs.chunks_exact(2).map(|p| p[1] as f64).collect();
        let predicted = probs.chunks_exact(2).map(|p| usize::from(p[1] >= p[0])).collect();
        PredictionSet::new(labels, scores, predicted)
    }

    pub fn extend(&mut self, other: PredictionSet) {
        self.labels.extend(other.labels);
        self.scores.extend(other.scores);
        self.predicted.extend(other.predicted);
    }

    pub fn empty() -> Self {
        PredictionSet { labels: Vec::new(), scores: Vec::new(), predicted: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn predicted(&self) -> &[usize] {
        &self.predicted
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(p: &PredictionSet) -> Result<ConfusionCounts> {
    if p.is_empty() {
        return Err(Error::Metrics("confusion counts of an empty prediction set".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&y, &yhat) in p.labels.iter().zip(&p.predicted) {
        match (y, yhat) {
            (1, 1) => c.tp += 1,
            (0, 1) => c.fp += 1,
            (0, 0) => c.tn += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Accuracy, precision, recall and F1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Classification {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Any zero denominator yields 0 for that metric.
pub fn classification_metrics(c: &ConfusionCounts) -> Classification {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Classification { accuracy: ratio(c.tp + c.tn, c.total()), precision, recall, f1 }
}

/// Area under the ROC curve as the tie-aware Mann–Whitney statistic,
/// computed from midranks in `O(n log n)`.
pub fn auc(p: &PredictionSet) -> Result<f64> {
    let n_pos = p.labels.iter().filter(|&&y| y == 1).count();
    let n_neg = p.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClassAuc);
    }
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p.scores[a].total_cmp(&p.scores[b]));
    // twice the rank sum of positives keeps midranks integral
    let mut pos_rank_sum2: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && p.scores[order[end]] == p.scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end share the midrank (start+1+end)/2
        let midrank2 = (start + 1 + end) as u128;
        let positives = order[start..end].iter().filter(|&&i| p.labels[i] == 1).count() as u128;
        pos_rank_sum2 += midrank2 * positives;
        start = end;
    }
    let (np, nn) = (n_pos as u128, n_neg as u128);
    let u2 = pos_rank_sum2 - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

/// Metrics for one model on one evaluation set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub count: usize,
    pub confusion: ConfusionCounts,
}

impl MetricsReport {
    pub fn compute(p: &PredictionSet) -> Result<Self> {
        let confusion = confusion(p)?;
        let c = classification_metrics(&confusion);
        Ok(MetricsReport {
            accuracy: c.accuracy,
            auc: auc(p)?,
            precision: c.precision,
            recall: c.recall,
            f1: c.f1,
            count: p.len(),
            confusion,
        })
    }

    /// Elementwise mean of the five metrics; counts are summed.
    pub fn mean(reports: &[MetricsReport]) -> Result<MetricsReport> {
        if reports.is_empty() {
            return Err(Error::Metrics("mean of no reports".into()));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let mut confusion = ConfusionCounts::default();
        for r in reports {
            confusion.tp += r.confusion.tp;
            confusion.fp += r.confusion.fp;
            confusion.tn += r.confusion.tn;
            confusion.fn_ += r.confusion.fn_;
        }
        Ok(MetricsReport {
            accuracy: avg(|r| r.accuracy),
            auc: avg(|r| r.auc),
            precision: avg(|r| r.precision),
            recall: avg(|r| r.recall),
            f1: avg(|r| r.f1),
            count: reports.iter().map(|r| r.count).sum(),
            confusion,
        })
    }
}

/// Column header of report tables.
pub const REPORT_HEADER: [&str; 6] = ["Model", "Accuracy", "AUC", "Precision", "Recall", "F1"];

/// One row per model, in the order given, values to three decimals.
/// Metrics with a zero denominator are written as 0.
pub fn emit_report<S: AsRef<str>>(reports: &[(S, MetricsReport)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER)?;
    for (name, r) in reports {
        let cells = [r.accuracy, r.auc, r.precision, r.recall, r.f1].map(|v| format!("{v:.3}"));
        w.write_record(std::iter::once(name.as_ref().to_string()).chain(cells))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Parses a table written by [`emit_report`]. Counts are not stored in the
/// table and come back as zero.
pub fn parse_report(text: &str) -> Result<Vec<(String, MetricsReport)>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != REPORT_HEADER {
        return Err(Error::Metrics(format!("report header must be `{}`, got `{}`", REPORT_HEADER.join(","), header.join(","))));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| Error::Metrics(format!("`{}` in column {} is not a number", &rec[i], REPORT_HEADER[i])))
        };
        let report = MetricsReport {
            accuracy: num(1)?,
            auc: num(2)?,
            precision: num(3)?,
            recall: num(4)?,
            f1: num(5)?,
            count: 0,
            confusion: ConfusionCounts::default(),
        };
        rows.push((rec[0].to_string(), report));
    }
    Ok(rows)
}
