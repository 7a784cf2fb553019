//! Student projection head on the pooled bottleneck.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Fmap;
use super::unet::BOTTLENECK_CHANNELS;
use crate::embedding::{dot, l2_norm, Embedding, EMBED_DIM};
use crate::error::{Error, Result};

const IN: usize = BOTTLENECK_CHANNELS;
const OUT: usize = EMBED_DIM;

/// Flat layout: `V1 (128x256) | b1 | V2 (128x128) | b2`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentHeadParams {
    pub values: Vec<f64>,
}

const V1: usize = 0;
const B1: usize = V1 + OUT * IN;
const V2: usize = B1 + OUT;
const B2: usize = V2 + OUT * OUT;
pub const STUDENT_PARAMS: usize = B2 + OUT;

impl StudentHeadParams {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; STUDENT_PARAMS];
        let a1 = 1.0 / (IN as f64).sqrt();
        let a2 = 1.0 / (OUT as f64).sqrt();
        values[V1..B1]
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-a1..a1));
        values[V2..B2]
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-a2..a2));
        Self { values }
    }

    pub fn v1(&self) -> &[f64] {
        &self.values[V1..B1]
    }
    pub fn b1(&self) -> &[f64] {
        &self.values[B1..V2]
    }
    pub fn v2(&self) -> &[f64] {
        &self.values[V2..B2]
    }
    pub fn b2(&self) -> &[f64] {
        &self.values[B2..]
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != STUDENT_PARAMS {
            return Err(Error::shape("student head parameters have the wrong shape"));
        }
        Ok(())
    }
}

/// Intermediate values of one head evaluation.
pub struct HeadTape {
    pub u: Vec<f64>,
    pub h: Vec<f64>,
    pub a: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

/// Evaluates the head on a pooled 256-vector.
pub fn student_forward(u: &[f64], head: &StudentHeadParams) -> Result<HeadTape> {
    head.validate()?;
    if u.len() != IN {
        return Err(Error::shape(format!(
            "student head expects {IN} channels, got {}",
            u.len()
        )));
    }
    let p = &head.values;
    let h: Vec<f64> = (0..OUT)
        .map(|i| dot(&p[V1 + i * IN..V1 + (i + 1) * IN], u) + p[B1 + i])
        .collect();
    let a: Vec<f64> = h.iter().map(|&v| v.max(0.0)).collect();
    let y: Vec<f64> = (0..OUT)
        .map(|i| dot(&p[V2 + i * OUT..V2 + (i + 1) * OUT], &a) + p[B2 + i])
        .collect();
    let z = Embedding::normalize(y.clone())?.values().to_vec();
    Ok(HeadTape {
        u: u.to_vec(),
        h,
        a,
        y,
        z,
    })
}

/// Pools the bottleneck map and projects it onto the sphere.
pub fn student_project(f: &Fmap, head: &StudentHeadParams) -> Result<Embedding> {
    if f.c != IN {
        return Err(Error::shape(format!(
            "bottleneck has {} channels, expected {IN}",
            f.c
        )));
    }
    Embedding::from_unit(student_forward(&f.pooled(), head)?.z)
}

/// Back-propagates `dz` (gradient w.r.t. the unit embedding) through the
/// normalization and both layers; returns the gradient w.r.t. the pooled input.
pub fn student_backward(
    head: &StudentHeadParams,
    g: &mut [f64],
    t: &HeadTape,
    dz: &[f64],
) -> Vec<f64> {
    let p = &head.values;
    let n = l2_norm(&t.y);
    let zdz = dot(&t.z, dz);
    let dy: Vec<f64> = (0..OUT).map(|i| (dz[i] - t.z[i] * zdz) / n).collect();
    let mut da = vec![0.0; OUT];
    for i in 0..OUT {
        g[B2 + i] += dy[i];
        for j in 0..OUT {
            g[V2 + i * OUT + j] += dy[i] * t.a[j];
            da[j] += dy[i] * p[V2 + i * OUT + j];
        }
    }
    let mut du = vec![0.0; IN];
    for i in 0..OUT {
        if t.h[i] <= 0.0 {
            continue;
        }
        let dh = da[i];
        g[B1 + i] += dh;
        for j in 0..IN {
            g[V1 + i * IN + j] += dh * t.u[j];
            du[j] += dh * p[V1 + i * IN + j];
        }
    }
    du
}
