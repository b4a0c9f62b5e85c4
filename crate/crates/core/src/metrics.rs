//! Distribution comparison measures.
//!
//! Six measures are computed per instance between a true label distribution
//! `d` and a predicted one `d_hat`: Chebyshev, Clark, Canberra and KL
//! distances (smaller is better) plus cosine similarity and intersection
//! (larger is better). Zero-vs-zero cells contribute nothing to Clark and
//! Canberra, and the KL logarithm clamps predictions at `1e-12` so zero
//! predictions stay finite.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor for predicted probabilities inside the KL logarithm.
const KL_CLAMP: f64 = 1e-12;

/// Metric names in report order.
pub const METRIC_NAMES: [&str; 6] = [
    "chebyshev",
    "clark",
    "canberra",
    "kl",
    "cosine",
    "intersection",
];

/// Whether a larger value is better, aligned with [`METRIC_NAMES`].
pub const METRIC_HIGHER_IS_BETTER: [bool; 6] = [false, false, false, false, true, true];

/// All six measures for one instance or averaged over a split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub chebyshev: f64,
    pub clark: f64,
    pub canberra: f64,
    pub kl: f64,
    pub cosine: f64,
    pub intersection: f64,
}

impl MetricsReport {
    /// Values in [`METRIC_NAMES`] order.
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.chebyshev,
            self.clark,
            self.canberra,
            self.kl,
            self.cosine,
            self.intersection,
        ]
    }
}

/// Mean and sample standard deviation of one measure across folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn from_values(values: &[f64]) -> Self {
        let k = values.len();
        let mean = values.iter().sum::<f64>() / k as f64;
        let std = if k < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1) as f64;
            var.sqrt()
        };
        MeanStd { mean, std }
    }
}

/// Per-measure mean and standard deviation over a set of fold reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub chebyshev: MeanStd,
    pub clark: MeanStd,
    pub canberra: MeanStd,
    pub kl: MeanStd,
    pub cosine: MeanStd,
    pub intersection: MeanStd,
    pub fold_count: usize,
}

impl AggregateReport {
    /// `(name, stats)` pairs in [`METRIC_NAMES`] order.
    pub fn fields(&self) -> [(&'static str, MeanStd); 6] {
        [
            (METRIC_NAMES[0], self.chebyshev),
            (METRIC_NAMES[1], self.clark),
            (METRIC_NAMES[2], self.canberra),
            (METRIC_NAMES[3], self.kl),
            (METRIC_NAMES[4], self.cosine),
            (METRIC_NAMES[5], self.intersection),
        ]
    }
}

/// Compares one true distribution against one prediction.
pub fn evaluate_pair(d: &[f64], d_hat: &[f64]) -> MetricsReport {
    assert_eq!(d.len(), d_hat.len(), "distribution lengths differ");
    assert!(!d.is_empty(), "empty distributions");
    let mut chebyshev: f64 = 0.0;
    let mut clark_sq = 0.0;
    let mut canberra = 0.0;
    let mut kl = 0.0;
    let mut dot = 0.0;
    let mut norm_d = 0.0;
    let mut norm_hat = 0.0;
    let mut intersection = 0.0;
    for (&a, &b) in d.iter().zip(d_hat.iter()) {
        let diff = a - b;
        chebyshev = chebyshev.max(diff.abs());
        let sum = a + b;
        if sum > 0.0 {
            clark_sq += (diff / sum) * (diff / sum);
            canberra += diff.abs() / sum;
        }
        if a > 0.0 {
            kl += a * (a / b.max(KL_CLAMP)).ln();
        }
        dot += a * b;
        norm_d += a * a;
        norm_hat += b * b;
        intersection += a.min(b);
    }
    MetricsReport {
        chebyshev,
        clark: clark_sq.sqrt(),
        canberra,
        kl,
        // single square root of the norm product, so comparing a
        // distribution with itself yields exactly 1
        cosine: dot / (norm_d * norm_hat).sqrt(),
        intersection,
    }
}

/// Averages [`evaluate_pair`] over all rows of a split.
pub fn evaluate_dataset(truth: &Array2<f64>, pred: &Array2<f64>) -> MetricsReport {
    assert_eq!(truth.dim(), pred.dim(), "matrix shapes differ");
    assert!(truth.nrows() > 0, "empty evaluation split");
    let m = truth.nrows() as f64;
    let mut acc = [0.0f64; 6];
    for (t_row, p_row) in truth.rows().into_iter().zip(pred.rows()) {
        let report = evaluate_pair(
            t_row.as_slice().expect("row is contiguous"),
            p_row.as_slice().expect("row is contiguous"),
        );
        for (slot, v) in acc.iter_mut().zip(report.as_array()) {
            *slot += v;
        }
    }
    MetricsReport {
        chebyshev: acc[0] / m,
        clark: acc[1] / m,
        canberra: acc[2] / m,
        kl: acc[3] / m,
        cosine: acc[4] / m,
        intersection: acc[5] / m,
    }
}

/// Mean and sample standard deviation (denominator `k - 1`; zero when only
/// one report is given) per measure.
pub fn aggregate(reports: &[MetricsReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::Config("cannot aggregate zero reports".into()));
    }
    let columns: Vec<Vec<f64>> = (0..6)
        .map(|i| reports.iter().map(|r| r.as_array()[i]).collect())
        .collect();
    Ok(AggregateReport {
        chebyshev: MeanStd::from_values(&columns[0]),
        clark: MeanStd::from_values(&columns[1]),
        canberra: MeanStd::from_values(&columns[2]),
        kl: MeanStd::from_values(&columns[3]),
        cosine: MeanStd::from_values(&columns[4]),
        intersection: MeanStd::from_values(&columns[5]),
        fold_count: reports.len(),
    })
}
