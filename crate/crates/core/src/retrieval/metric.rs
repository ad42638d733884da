use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Similarity measures usable for support retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum SimilarityMetric {
    /// Cosine similarity on flattened embeddings.
    #[default]
    CS,
    /// Mean squared error on resized images.
    MSE,
    /// Zero-mean normalised cross-correlation on resized images.
    NCC,
    /// Manhattan distance on flattened embeddings.
    MD,
    /// Euclidean distance on flattened embeddings.
    ED,
    /// Pearson correlation on flattened embeddings.
    PCC,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricLevel {
    Image,
    Feature,
}

impl SimilarityMetric {
    pub const ALL: [SimilarityMetric; 6] = [
        SimilarityMetric::CS,
        SimilarityMetric::MSE,
        SimilarityMetric::NCC,
        SimilarityMetric::MD,
        SimilarityMetric::ED,
        SimilarityMetric::PCC,
    ];

    pub fn level(self) -> MetricLevel {
        match self {
            SimilarityMetric::MSE | SimilarityMetric::NCC => MetricLevel::Image,
            _ => MetricLevel::Feature,
        }
    }

    /// True for similarities (CS, NCC, PCC), false for distances.
    pub fn larger_is_better(self) -> bool {
        matches!(self, SimilarityMetric::CS | SimilarityMetric::NCC | SimilarityMetric::PCC)
    }

    pub fn name(self) -> &'static str {
        match self {
            SimilarityMetric::CS => "CS",
            SimilarityMetric::MSE => "MSE",
            SimilarityMetric::NCC => "NCC",
            SimilarityMetric::MD => "MD",
            SimilarityMetric::ED => "ED",
            SimilarityMetric::PCC => "PCC",
        }
    }
}

impl fmt::Display for SimilarityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SimilarityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SimilarityMetric::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Input(format!("unknown similarity metric {s:?}")))
    }
}

/// Score two equal-length vectors.
pub fn similarity(metric: SimilarityMetric, a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::ZeroVector);
    }
    let n = a.len() as f64;
    Ok(match metric {
        SimilarityMetric::CS => cosine(a, b)?,
        SimilarityMetric::NCC | SimilarityMetric::PCC => {
            let ma = a.iter().sum::<f64>() / n;
            let mb = b.iter().sum::<f64>() / n;
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for (x, y) in a.iter().zip(b) {
                let (dx, dy) = (x - ma, y - mb);
                ab += dx * dy;
                aa += dx * dx;
                bb += dy * dy;
            }
            if aa == 0.0 || bb == 0.0 {
                return Err(Error::ZeroVector);
            }
            ab / (aa.sqrt() * bb.sqrt())
        }
        SimilarityMetric::MSE => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n,
        SimilarityMetric::MD => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        SimilarityMetric::ED => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
    })
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(ab / (aa.sqrt() * bb.sqrt()))
}

/// Is `a` strictly more similar than `b` under `metric`?
pub fn better(metric: SimilarityMetric, a: f64, b: f64) -> bool {
    if metric.larger_is_better() {
        a > b
    } else {
        a < b
    }
}

/// Validity of a query vector under a metric (zero norm / zero variance are undefined).
pub(crate) fn check_query(metric: SimilarityMetric, v: &[f64]) -> Result<()> {
    match metric {
        SimilarityMetric::CS if v.iter().all(|&x| x == 0.0) => Err(Error::ZeroVector),
        SimilarityMetric::NCC | SimilarityMetric::PCC => {
            let first = v.first().copied().unwrap_or(0.0);
            if v.iter().all(|&x| x == first) {
                Err(Error::ZeroVector)
            } else {
                Ok(())
            }
        }
        _ => Ok(()),
    }
}
