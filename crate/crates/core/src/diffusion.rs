//! Noise schedule, forward process and the denoiser wrapper.

use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::nn::head::{student_project as head_project, StudentHeadParams};
use crate::nn::{Fmap, UNet, UNetConfig};

/// Constants from which the schedule is rebuilt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Linear betas from `beta_start` to `beta_end` over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 || !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "invalid schedule: T={steps}, beta in [{beta_start}, {beta_end}] (need T >= 1, 0 < start <= end < 1)"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut acc = 1.0;
    let alpha_bars = betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect();
    Ok(NoiseSchedule { betas, alpha_bars })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} outside [0, {})", self.steps())))
    }
}

/// `sqrt(ab) x0 + sqrt(1 - ab) eps`.
pub fn q_sample_with(x0: &[f64], eps: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::shape(format!(
            "x0 has {} elements, noise has {}",
            x0.len(),
            eps.len()
        )));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], s: &NoiseSchedule) -> Result<Vec<f64>> {
    q_sample_with(x0, eps, s.alpha_bar(t)?)
}

/// Mean squared error over all elements.
pub fn diffusion_loss(eps_pred: &[f64], eps: &[f64]) -> Result<f64> {
    if eps_pred.len() != eps.len() || eps.is_empty() {
        return Err(Error::shape(format!(
            "prediction has {} elements, target {}",
            eps_pred.len(),
            eps.len()
        )));
    }
    Ok(eps_pred
        .iter()
        .zip(eps)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / eps.len() as f64)
}

/// Architecture plus flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub config: UNetConfig,
    pub values: Vec<f64>,
}

impl DenoiserParams {
    pub fn init(config: &UNetConfig, seed: u64) -> Result<(UNet, Self)> {
        let net = UNet::new(config, seed)?;
        let values = net.init_params();
        Ok((
            net,
            Self {
                config: config.clone(),
                values,
            },
        ))
    }

    pub fn network(&self) -> Result<UNet> {
        let net = UNet::new(&self.config, 0)?;
        if net.num_params() != self.values.len() {
            return Err(Error::shape(format!(
                "denoiser config needs {} parameters, found {}",
                net.num_params(),
                self.values.len()
            )));
        }
        Ok(net)
    }
}

/// Batched forward: returns per-sample noise predictions and bottleneck maps.
pub fn denoiser_forward(
    x_t: &[Fmap],
    t: &[usize],
    params: &DenoiserParams,
) -> Result<(Vec<Fmap>, Vec<Fmap>)> {
    if x_t.len() != t.len() {
        return Err(Error::shape("one timestep per batch element is required"));
    }
    let net = params.network()?;
    let mut eps = Vec::with_capacity(x_t.len());
    let mut f = Vec::with_capacity(x_t.len());
    for (x, &ti) in x_t.iter().zip(t) {
        let out = net.forward(&params.values, x, ti as f64)?;
        eps.push(out.eps);
        f.push(out.bottleneck);
    }
    Ok((eps, f))
}

pub fn student_project(f: &Fmap, head: &StudentHeadParams) -> Result<Embedding> {
    head_project(f, head)
}
