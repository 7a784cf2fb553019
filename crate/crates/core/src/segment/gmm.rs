//! Full-covariance Gaussian mixture fitted by EM.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::kmeans::kmeans;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Stop when the relative objective improvement falls below this.
    pub tol: f64,
    pub seed: u64,
    pub ridge: f64,
    pub kmeans_iter: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            k: 5,
            max_iter: 200,
            tol: 1e-6,
            seed: 0,
            ridge: 1e-6,
            kmeans_iter: 50,
        }
    }
}

/// Weights below this count as a collapsed component.
pub const COLLAPSE_WEIGHT: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    /// Ridge-penalized log-likelihood after every M-step; EM ascends exactly
    /// this objective, so the trace is nondecreasing.
    pub ll_trace: Vec<f64>,
    pub converged: bool,
    factors: Vec<Factor>,
}

#[derive(Clone, Debug)]
struct Factor {
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
    /// `-(ridge / 2) tr(cov^-1)`, added to every point's log density.
    penalty: f64,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn final_log_likelihood(&self) -> f64 {
        *self.ll_trace.last().unwrap_or(&f64::NAN)
    }
}

fn to_matrix(data: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = data.first().map_or(0, |r| r.len());
    if d == 0 || data.iter().any(|r| r.len() != d) {
        return Err(Error::shape(
            "descriptor rows must be non-empty and share one dimension",
        ));
    }
    if data.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "descriptor matrix contains non-finite values".into(),
        ));
    }
    Ok(DMatrix::from_fn(data.len(), d, |i, j| data[i][j]))
}

fn factor(cov: &DMatrix<f64>, ridge: f64) -> Factor {
    let d = cov.nrows();
    let mut jitter = 0.0;
    loop {
        let m = if jitter > 0.0 {
            cov + DMatrix::identity(d, d) * jitter
        } else {
            cov.clone()
        };
        if let Some(chol) = Cholesky::new(m) {
            let log_det = 2.0
                * chol
                    .l_dirty()
                    .diagonal()
                    .iter()
                    .map(|v| v.ln())
                    .sum::<f64>();
            if jitter > 0.0 {
                log::warn!("covariance needed extra jitter {jitter:e} to factor");
            }
            return Factor {
                chol,
                log_det,
                penalty: 0.0,
            };
        }
        jitter = if jitter == 0.0 {
            ridge.max(1e-12)
        } else {
            jitter * 10.0
        };
    }
}

/// Log of `w_k N(x_i | k) exp(-(ridge / 2) tr(cov_k^-1))` for every point and component (N x K).
fn log_weighted_densities(
    x: &DMatrix<f64>,
    weights: &[f64],
    means: &[DVector<f64>],
    factors: &[Factor],
) -> DMatrix<f64> {
    let (n, d) = x.shape();
    let c = d as f64 * (2.0 * std::f64::consts::PI).ln();
    let mut out = DMatrix::zeros(n, weights.len());
    for k in 0..weights.len() {
        let mut centered = x.transpose();
        for mut col in centered.column_iter_mut() {
            col -= &means[k];
        }
        let y = factors[k]
            .chol
            .l_dirty()
            .solve_lower_triangular(&centered)
            .expect("triangular factor is non-singular");
        let lw = weights[k].ln() + factors[k].penalty;
        for i in 0..n {
            out[(i, k)] = lw - 0.5 * (c + factors[k].log_det + y.column(i).norm_squared());
        }
    }
    out
}

/// Row-wise log-sum-exp normalization; returns (responsibilities, sum of row log-normalizers).
fn normalize_rows(logp: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let (n, k) = logp.shape();
    let mut resp = DMatrix::zeros(n, k);
    let mut ll = 0.0;
    for i in 0..n {
        let row = logp.row(i);
        let m = row.max();
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        ll += lse;
        for j in 0..k {
            resp[(i, j)] = (logp[(i, j)] - lse).exp();
        }
    }
    (resp, ll)
}

struct MStep {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    factors: Vec<Factor>,
}

/// M-step for the objective `sum_i log sum_k w_k N(x_i | k) exp(-(ridge / 2) tr(cov_k^-1))`,
/// whose maximizer is `cov_k = S_k + ridge I`. The extra factor is the
/// expected log-density loss under isotropic noise of variance `ridge`.
fn m_step(x: &DMatrix<f64>, resp: &DMatrix<f64>, ridge: f64) -> std::result::Result<MStep, usize> {
    let (n, d) = x.shape();
    let k = resp.ncols();
    let mut out = MStep {
        weights: vec![],
        means: vec![],
        covariances: vec![],
        factors: vec![],
    };
    for j in 0..k {
        let r = resp.column(j);
        let nk: f64 = r.sum();
        if nk / (n as f64) < COLLAPSE_WEIGHT {
            return Err(j);
        }
        let mean = x.tr_mul(&r) / nk;
        let mut xw = x.clone();
        for (i, mut row) in xw.row_iter_mut().enumerate() {
            let s = r[i].sqrt();
            for (v, m) in row.iter_mut().zip(mean.iter()) {
                *v = (*v - m) * s;
            }
        }
        let mut cov = xw.tr_mul(&xw) / nk;
        for i in 0..d {
            cov[(i, i)] += ridge;
        }
        let mut f = factor(&cov, ridge);
        let inv_l = f
            .chol
            .l_dirty()
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .expect("non-singular factor");
        f.penalty = -0.5 * ridge * inv_l.norm_squared();
        out.weights.push(nk / n as f64);
        out.means.push(mean);
        out.covariances.push(cov);
        out.factors.push(f);
    }
    Ok(out)
}

fn one_hot(labels: &[usize], k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(
        labels.len(),
        k,
        |i, j| if labels[i] == j { 1.0 } else { 0.0 },
    )
}

/// EM from k-means++/Lloyd initialization.
pub fn fit_gmm(data: &[Vec<f64>], cfg: &GmmConfig) -> Result<GmmModel> {
    if cfg.k == 0 || data.len() <= cfg.k {
        return Err(Error::invalid(format!(
            "GMM needs more points than components (N={}, K={})",
            data.len(),
            cfg.k
        )));
    }
    to_matrix(data)?;
    let init = kmeans(data, cfg.k, cfg.seed, cfg.kmeans_iter)?;
    fit_gmm_from_labels(data, &init.labels, cfg)
}

/// EM starting from a hard partition.
pub fn fit_gmm_from_labels(
    data: &[Vec<f64>],
    labels: &[usize],
    cfg: &GmmConfig,
) -> Result<GmmModel> {
    let x = to_matrix(data)?;
    let n = x.nrows();
    if labels.len() != n || labels.iter().any(|&l| l >= cfg.k) {
        return Err(Error::shape(
            "initial labels must cover every row with values < K",
        ));
    }
    let mut resp = one_hot(labels, cfg.k);
    let mut reinit_used = false;
    let mut trace = Vec::new();
    let mut last_point_ll: Option<Vec<f64>> = None;
    let mut iter = 0;
    loop {
        let m = match m_step(&x, &resp, cfg.ridge) {
            Ok(m) => m,
            Err(j) => {
                if reinit_used {
                    return Err(Error::EmCollapse(j));
                }
                reinit_used = true;
                // Seed the collapsed component with the worst-explained point.
                let worst = match &last_point_ll {
                    Some(ll) => (0..n).min_by(|&a, &b| ll[a].total_cmp(&ll[b])).unwrap(),
                    None => (0..n)
                        .max_by(|&a, &b| resp[(a, j)].total_cmp(&resp[(b, j)]))
                        .unwrap(),
                };
                log::warn!("GMM component {j} collapsed; re-initializing around point {worst}");
                // A lone point would collapse again, so hand the component
                // the worst point's nearest N/K neighbours.
                let mut near: Vec<(f64, usize)> = (0..n)
                    .map(|i| ((x.row(i) - x.row(worst)).norm_squared(), i))
                    .collect();
                near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                for &(_, i) in near.iter().take(n.div_ceil(cfg.k)) {
                    for c in 0..cfg.k {
                        resp[(i, c)] = if c == j { 1.0 } else { 0.0 };
                    }
                }
                trace.clear();
                continue;
            }
        };
        let logp = log_weighted_densities(&x, &m.weights, &m.means, &m.factors);
        let (new_resp, objective) = normalize_rows(&logp);
        last_point_ll = Some((0..n).map(|i| logp.row(i).max()).collect());
        let prev = trace.last().copied();
        trace.push(objective);
        resp = new_resp;
        iter += 1;
        let done = prev.is_some_and(|p: f64| (objective - p).abs() <= cfg.tol * p.abs().max(1.0));
        if done || iter >= cfg.max_iter {
            if !done {
                log::warn!("EM stopped at max_iter={} before converging", cfg.max_iter);
            }
            return Ok(GmmModel {
                weights: m.weights,
                means: m.means,
                covariances: m.covariances,
                ll_trace: trace,
                converged: done,
                factors: m.factors,
            });
        }
    }
}

/// Posterior responsibilities (rows sum to 1) and their argmax.
pub fn assign_clusters(model: &GmmModel, data: &[Vec<f64>]) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let x = to_matrix(data)?;
    if x.ncols() != model.dim() {
        return Err(Error::shape(format!(
            "descriptors have dimension {}, model expects {}",
            x.ncols(),
            model.dim()
        )));
    }
    let logp = log_weighted_densities(&x, &model.weights, &model.means, &model.factors);
    let (resp, _) = normalize_rows(&logp);
    let rows: Vec<Vec<f64>> = (0..x.nrows())
        .map(|i| resp.row(i).iter().copied().collect())
        .collect();
    let labels = rows
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > r[b] { j } else { b })
        })
        .collect();
    Ok((labels, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn blobs(seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..60)
            .map(|i| {
                let c = if i < 30 {
                    [0.0, 0.0, 0.0]
                } else {
                    [6.0, -4.0, 2.0]
                };
                c.iter()
                    .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_component_is_sample_statistics() {
        let data = blobs(1);
        let m = fit_gmm(
            &data,
            &GmmConfig {
                k: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let n = data.len() as f64;
        for j in 0..3 {
            let mean: f64 = data.iter().map(|r| r[j]).sum::<f64>() / n;
            assert!((m.means[0][j] - mean).abs() < 1e-12);
        }
        let (mu0, mu1) = (m.means[0][0], m.means[0][1]);
        let c01: f64 = data
            .iter()
            .map(|r| (r[0] - mu0) * (r[1] - mu1))
            .sum::<f64>()
            / n;
        assert!((m.covariances[0][(0, 1)] - c01).abs() < 1e-12);
        let c00: f64 = data.iter().map(|r| (r[0] - mu0).powi(2)).sum::<f64>() / n;
        assert!((m.covariances[0][(0, 0)] - c00 - 1e-6).abs() < 1e-12);
    }

    #[test]
    fn separates_blobs_with_monotone_trace() {
        let data = blobs(2);
        let m = fit_gmm(
            &data,
            &GmmConfig {
                k: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(m
            .ll_trace
            .windows(2)
            .all(|w| w[1] >= w[0] - 1e-8 * w[0].abs().max(1.0)));
        let (labels, resp) = assign_clusters(&m, &data).unwrap();
        assert!(labels[..30].iter().all(|&l| l == labels[0]));
        assert!(labels[30..].iter().all(|&l| l == labels[30]));
        assert_ne!(labels[0], labels[30]);
        for r in &resp {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(assign_clusters(&m, &[vec![0.0; 2]]).is_err());
    }

    #[test]
    fn rejects_too_few_points() {
        let data = blobs(3);
        assert!(fit_gmm(
            &data[..5],
            &GmmConfig {
                k: 5,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn deterministic() {
        let data = blobs(4);
        let cfg = GmmConfig {
            k: 3,
            seed: 9,
            ..Default::default()
        };
        let a = fit_gmm(&data, &cfg).unwrap();
        let b = fit_gmm(&data, &cfg).unwrap();
        assert_eq!(a.ll_trace, b.ll_trace);
        assert_eq!(a.means, b.means);
    }

    #[test]
    fn empty_component_is_reseeded_once() {
        let data = blobs(5);
        let labels: Vec<usize> = (0..data.len()).map(|i| usize::from(i >= 30)).collect();
        let m = fit_gmm_from_labels(
            &data,
            &labels,
            &GmmConfig {
                k: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(m.weights.iter().all(|&w| w > COLLAPSE_WEIGHT));
    }
}
