use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBED_DIM: usize = 128;

/// A point on the unit hypersphere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// l2-normalizes `v`. Norms below 1e-12 are rejected rather than divided.
    pub fn normalize(v: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&v);
        if !(norm >= 1e-12) {
            return Err(Error::DegenerateEmbedding(norm));
        }
        Ok(Self(v.into_iter().map(|x| x / norm).collect()))
    }

    /// Wraps values that are already unit-norm (within 1e-4).
    pub fn from_unit(v: Vec<f64>) -> Result<Self> {
        check_unit(&v)?;
        Ok(Self(v))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn check_unit(v: &[f64]) -> Result<()> {
    let n = l2_norm(v);
    if !((n - 1.0).abs() <= 1e-4) {
        return Err(Error::invalid(format!(
            "embedding is not unit-norm (norm {n})"
        )));
    }
    Ok(())
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}
