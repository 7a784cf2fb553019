//! Contrastive alignment of student embeddings to the radiomic teacher.

mod train;

pub use train::{train, StepMetrics, TrainConfig, TrainOutput, TrainSetup};

use serde::{Deserialize, Serialize};

use crate::embedding::{check_unit, dot};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// When false the contrastive term is never added.
    pub enabled: bool,
    /// When false, lambda sits at `lambda_max` from step 0.
    pub warmup: bool,
    pub tau: f64,
    pub kappa: f64,
    pub t_w: u64,
    pub t_ramp: u64,
    pub lambda_max: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            warmup: true,
            tau: 0.5,
            kappa: 0.07,
            t_w: 5000,
            t_ramp: 5000,
            lambda_max: 0.5,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0)
            || self.t_ramp < 1
            || !(self.lambda_max >= 0.0)
            || !(self.tau > -1.0 && self.tau < 1.0)
        {
            return Err(Error::invalid(format!(
                "distill config needs kappa > 0, t_ramp >= 1, lambda_max >= 0, tau in (-1, 1); got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Symmetric cosine-similarity matrix with unit diagonal, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

pub fn radiomic_similarity<E: AsRef<[f64]>>(z: &[E]) -> Result<SimilarityMatrix> {
    for e in z {
        check_unit(e.as_ref())?;
    }
    let n = z.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let s = dot(z[i].as_ref(), z[j].as_ref()).clamp(-1.0, 1.0);
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    Ok(SimilarityMatrix { n, values })
}

/// Fraction of off-diagonal pairs counted as positives.
pub fn positive_fraction(s: &SimilarityMatrix, tau: f64) -> f64 {
    let n = s.n;
    if n < 2 {
        return 0.0;
    }
    let pos = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && s.get(i, j) > tau)
        .count();
    pos as f64 / (n * (n - 1)) as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NceValue {
    pub loss: f64,
    /// Anchors with at least one positive.
    pub anchors: usize,
    /// Set when no anchor had a positive, so the batch carried no signal.
    pub positive_free: bool,
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Contrastive loss over the batch with anchors lacking positives excluded.
pub fn info_nce<E: AsRef<[f64]>>(
    z: &[E],
    s: &SimilarityMatrix,
    cfg: &DistillConfig,
) -> Result<NceValue> {
    for e in z {
        check_unit(e.as_ref())?;
    }
    let raw: Vec<&[f64]> = z.iter().map(|e| e.as_ref()).collect();
    Ok(info_nce_raw(&raw, s, cfg)?.0)
}

/// Loss and its gradient with respect to each (unconstrained) embedding
/// vector; the positive indicator is a constant.
pub fn info_nce_raw(
    z: &[&[f64]],
    s: &SimilarityMatrix,
    cfg: &DistillConfig,
) -> Result<(NceValue, Vec<Vec<f64>>)> {
    let b = z.len();
    if b < 2 {
        return Err(Error::invalid(format!(
            "InfoNCE needs a batch of at least 2, got {b}"
        )));
    }
    if s.n != b {
        return Err(Error::shape(format!(
            "similarity matrix is {0}x{0} for a batch of {b}",
            s.n
        )));
    }
    let dim = z[0].len();
    if z.iter().any(|v| v.len() != dim) {
        return Err(Error::shape("embeddings differ in dimension"));
    }
    let k = cfg.kappa;
    let mut grads = vec![vec![0.0; dim]; b];
    let mut total = 0.0;
    let mut anchors = 0usize;
    let mut coef = vec![vec![0.0; b]; b];
    for i in 0..b {
        let pos: Vec<usize> = (0..b)
            .filter(|&j| j != i && s.get(i, j) > cfg.tau)
            .collect();
        if pos.is_empty() {
            continue;
        }
        let logits: Vec<f64> = (0..b).map(|j| dot(z[i], z[j]) / k).collect();
        let lse_all = log_sum_exp((0..b).filter(|&j| j != i).map(|j| logits[j]));
        let lse_pos = log_sum_exp(pos.iter().map(|&j| logits[j]));
        total += lse_all - lse_pos;
        anchors += 1;
        for j in (0..b).filter(|&j| j != i) {
            coef[i][j] += (logits[j] - lse_all).exp();
        }
        for &j in &pos {
            coef[i][j] -= (logits[j] - lse_pos).exp();
        }
    }
    if anchors == 0 {
        return Ok((
            NceValue {
                loss: 0.0,
                anchors: 0,
                positive_free: true,
            },
            grads,
        ));
    }
    let scale = 1.0 / (anchors as f64 * k);
    for i in 0..b {
        for j in 0..b {
            let c = coef[i][j] * scale;
            if c == 0.0 {
                continue;
            }
            for d in 0..dim {
                grads[i][d] += c * z[j][d];
                grads[j][d] += c * z[i][d];
            }
        }
    }
    Ok((
        NceValue {
            loss: (total / anchors as f64).max(0.0),
            anchors,
            positive_free: false,
        },
        grads,
    ))
}

/// `lambda_max * clamp((step - t_w) / t_ramp, 0, 1)`.
pub fn warmup_lambda(step: u64, cfg: &DistillConfig) -> f64 {
    if !cfg.warmup {
        return cfg.lambda_max;
    }
    let r = (step as f64 - cfg.t_w as f64) / cfg.t_ramp as f64;
    cfg.lambda_max * r.clamp(0.0, 1.0)
}

pub fn total_loss(l_diff: f64, l_nce: f64, step: u64, cfg: &DistillConfig) -> Result<f64> {
    if !l_diff.is_finite() || !l_nce.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss terms l_diff={l_diff}, l_nce={l_nce}"
        )));
    }
    let lambda = if cfg.enabled {
        warmup_lambda(step, cfg)
    } else {
        0.0
    };
    Ok(l_diff + lambda * l_nce)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(i: usize, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn similarity_basis_vectors() {
        let s = radiomic_similarity(&[e(0, 3), e(0, 3)]).unwrap();
        assert_eq!(s.values, vec![1.0; 4]);
        let s = radiomic_similarity(&[e(0, 3), e(1, 3)]).unwrap();
        assert_eq!(s.values, vec![1.0, 0.0, 0.0, 1.0]);
        assert!(radiomic_similarity(&[vec![0.5, 0.0]]).is_err());
    }

    #[test]
    fn nce_two_element_cases() {
        let cfg = DistillConfig::default();
        let z = [e(0, 2), vec![0.6, 0.8]];
        let pos = SimilarityMatrix {
            n: 2,
            values: vec![1.0, 0.9, 0.9, 1.0],
        };
        assert!(info_nce(&z, &pos, &cfg).unwrap().loss.abs() < 1e-9);
        let neg = SimilarityMatrix {
            n: 2,
            values: vec![1.0, 0.1, 0.1, 1.0],
        };
        let v = info_nce(&z, &neg, &cfg).unwrap();
        assert!(v.positive_free && v.loss == 0.0);
        assert!(info_nce(
            &z[..1],
            &SimilarityMatrix {
                n: 1,
                values: vec![1.0]
            },
            &cfg
        )
        .is_err());
    }

    #[test]
    fn warmup_and_total() {
        let cfg = DistillConfig::default();
        assert_eq!(warmup_lambda(0, &cfg), 0.0);
        assert_eq!(warmup_lambda(5000, &cfg), 0.0);
        assert_eq!(warmup_lambda(7500, &cfg), 0.25);
        assert_eq!(warmup_lambda(10000, &cfg), 0.5);
        assert_eq!(warmup_lambda(20000, &cfg), 0.5);
        assert_eq!(total_loss(1.0, 2.0, 10000, &cfg).unwrap(), 2.0);
        assert_eq!(total_loss(0.5, 0.0, 123, &cfg).unwrap(), 0.5);
        assert_eq!(total_loss(0.7, 3.0, 4000, &cfg).unwrap(), 0.7);
        assert!(total_loss(f64::NAN, 0.0, 0, &cfg).is_err());
        let nw = DistillConfig {
            warmup: false,
            ..cfg
        };
        assert_eq!(warmup_lambda(0, &nw), 0.5);
    }
}
