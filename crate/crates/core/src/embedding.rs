//! Fixed-dimension feature vectors and the metrics used to compare them.
//!
//! Embeddings are stored as `f32` (the on-disk and in-bank precision) but
//! every reduction below runs in `f64`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finite, non-empty feature vector produced by a backbone.
#[derive(Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Validates `values` once; all later metric calls assume finiteness.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("embedding must have dim >= 1".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value {} at index {pos}",
                values[pos]
            )));
        }
        Ok(Embedding(values))
    }

    /// Rounds `values` to `f32` and validates the result.
    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::Dimension {
                expected,
                actual: self.dim(),
            });
        }
        Ok(())
    }
}

impl fmt::Debug for Embedding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Embedding").field(&self.0).finish()
    }
}

impl TryFrom<Vec<f32>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Embedding::new(values)
    }
}

impl<'de> Deserialize<'de> for Embedding {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f32>::deserialize(de)?;
        Embedding::new(values).map_err(serde::de::Error::custom)
    }
}

/// How a query is matched against prototypes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Euclidean distance; smaller is closer.
    #[default]
    L2,
    /// Cosine similarity; larger is closer.
    Cosine,
}

impl Metric {
    /// Distance for `L2`, similarity for `Cosine`.
    pub fn score(self, a: &Embedding, b: &Embedding) -> Result<f64> {
        match self {
            Metric::L2 => l2_distance(a, b),
            Metric::Cosine => cosine_similarity(a, b),
        }
    }

    /// True when `candidate` is strictly better than `incumbent`.
    pub fn better(self, candidate: f64, incumbent: f64) -> bool {
        match self {
            Metric::L2 => candidate < incumbent,
            Metric::Cosine => candidate > incumbent,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::L2 => "l2",
            Metric::Cosine => "cosine",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" | "euclidean" => Ok(Metric::L2),
            "cosine" | "cos" => Ok(Metric::Cosine),
            other => Err(Error::Validation(format!("unknown metric '{other}'"))),
        }
    }
}

fn check_same_dim(a: &Embedding, b: &Embedding) -> Result<()> {
    b.check_dim(a.dim())
}

pub fn l2_distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    check_same_dim(a, b)?;
    let sq: f64 =
        a.0.iter()
            .zip(&b.0)
            .map(|(&x, &y)| {
                let d = f64::from(x) - f64::from(y);
                d * d
            })
            .sum();
    Ok(sq.sqrt())
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    check_same_dim(a, b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector(
            "cosine similarity of a zero vector",
        ));
    }
    let dot: f64 =
        a.0.iter()
            .zip(&b.0)
            .map(|(&x, &y)| f64::from(x) * f64::from(y))
            .sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn unit_normalize(a: &Embedding) -> Result<Embedding> {
    let n = a.norm();
    if n == 0.0 {
        return Err(Error::DegenerateVector("cannot normalize a zero vector"));
    }
    Ok(Embedding(
        a.0.iter().map(|&v| (f64::from(v) / n) as f32).collect(),
    ))
}
