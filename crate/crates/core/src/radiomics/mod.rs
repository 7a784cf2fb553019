//! The 34-d handcrafted texture descriptor and its frozen projection head.

pub mod firstorder;
pub mod gabor;
pub mod glcm;
pub mod lbp;

use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use firstorder::firstorder_features;
pub use gabor::gabor_features;
pub use glcm::{glcm_features, AXIS_OFFSETS, GLCM_LEVELS};
pub use lbp::lbp_histogram;

use crate::embedding::{Embedding, EMBED_DIM};
use crate::error::{Error, Result};
use crate::volume::Patch;

pub const RADIOMIC_DIM: usize = 34;
pub const GLCM_RANGE: std::ops::Range<usize> = 0..14;
pub const LBP_RANGE: std::ops::Range<usize> = 14..22;
pub const GABOR_RANGE: std::ops::Range<usize> = 22..30;
pub const FIRSTORDER_RANGE: std::ops::Range<usize> = 30..34;

/// Raw (unscaled) descriptor: GLCM 0..14, LBP 14..22, Gabor 22..30,
/// first-order 30..34.
#[derive(Clone, Debug, PartialEq)]
pub struct RadiomicVector {
    pub values: [f64; RADIOMIC_DIM],
}

impl RadiomicVector {
    pub fn glcm(&self) -> &[f64] {
        &self.values[GLCM_RANGE]
    }
    pub fn lbp(&self) -> &[f64] {
        &self.values[LBP_RANGE]
    }
    pub fn gabor(&self) -> &[f64] {
        &self.values[GABOR_RANGE]
    }
    pub fn firstorder(&self) -> &[f64] {
        &self.values[FIRSTORDER_RANGE]
    }
}

pub fn feature_names() -> Vec<String> {
    let mut names: Vec<String> = glcm::HARALICK_NAMES
        .iter()
        .map(|n| format!("glcm_{n}"))
        .collect();
    names.extend((0..8).map(|i| format!("lbp_{i}")));
    for f in gabor::GABOR_FREQUENCIES {
        for t in gabor::GABOR_ORIENTATIONS_DEG {
            names.push(format!("gabor_f{f}_t{t}"));
        }
    }
    names.extend(["mean", "std", "skewness", "kurtosis"].map(|n| format!("fo_{n}")));
    names
}

fn bank() -> &'static [gabor::GaborKernel] {
    static BANK: OnceLock<Vec<gabor::GaborKernel>> = OnceLock::new();
    BANK.get_or_init(gabor::gabor_bank)
}

pub fn radiomic_vector(p: &Patch) -> Result<RadiomicVector> {
    let v = p.voxels();
    let mut values = [0.0; RADIOMIC_DIM];
    let families: [(&'static str, std::ops::Range<usize>, Vec<f64>); 4] = [
        (
            "glcm",
            GLCM_RANGE,
            glcm_features(v, GLCM_LEVELS, &AXIS_OFFSETS).to_vec(),
        ),
        ("lbp", LBP_RANGE, lbp_histogram(v).to_vec()),
        (
            "gabor",
            GABOR_RANGE,
            gabor::gabor_features_with(v, bank()).to_vec(),
        ),
        (
            "firstorder",
            FIRSTORDER_RANGE,
            firstorder_features(v).to_vec(),
        ),
    ];
    for (family, range, feats) in families {
        if feats.iter().any(|f| !f.is_finite()) {
            return Err(Error::NonFiniteFeature { family });
        }
        values[range].copy_from_slice(&feats);
    }
    Ok(RadiomicVector { values })
}

/// Per-feature z-scoring fitted once on a training corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiomicScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl RadiomicScaler {
    /// Zero-variance features get unit scale so they map to 0.
    pub fn fit(corpus: &[RadiomicVector]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid(
                "cannot fit radiomic scaler on an empty corpus",
            ));
        }
        let n = corpus.len() as f64;
        let mut mean = vec![0.0; RADIOMIC_DIM];
        for r in corpus {
            for (m, v) in mean.iter_mut().zip(&r.values) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; RADIOMIC_DIM];
        for r in corpus {
            for ((s, v), m) in var.iter_mut().zip(&r.values).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let std = var
            .into_iter()
            .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, r: &RadiomicVector) -> [f64; RADIOMIC_DIM] {
        let mut out = [0.0; RADIOMIC_DIM];
        for i in 0..RADIOMIC_DIM {
            out[i] = (r.values[i] - self.mean[i]) / self.std[i];
        }
        out
    }
}

/// Two-layer projection `l2(W2 relu(W1 r + b1) + b2)`; row-major weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherHeadParams {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl TeacherHeadParams {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights held at f32
    /// precision so checkpoints store them exactly; zero biases.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let a = 1.0 / (fan_in as f64).sqrt();
            (0..n)
                .map(|_| rng.random_range(-a..a) as f32 as f64)
                .collect()
        };
        let w1 = draw(EMBED_DIM * RADIOMIC_DIM, RADIOMIC_DIM);
        let w2 = draw(EMBED_DIM * EMBED_DIM, EMBED_DIM);
        Self {
            w1,
            b1: vec![0.0; EMBED_DIM],
            w2,
            b2: vec![0.0; EMBED_DIM],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w1.len() != EMBED_DIM * RADIOMIC_DIM
            || self.b1.len() != EMBED_DIM
            || self.w2.len() != EMBED_DIM * EMBED_DIM
            || self.b2.len() != EMBED_DIM
        {
            return Err(Error::shape("teacher head parameters have the wrong shape"));
        }
        Ok(())
    }
}

/// Projects an already z-scored descriptor onto the unit sphere.
pub fn teacher_project(r: &[f64; RADIOMIC_DIM], head: &TeacherHeadParams) -> Result<Embedding> {
    head.validate()?;
    let hidden: Vec<f64> = (0..EMBED_DIM)
        .map(|i| {
            let row = &head.w1[i * RADIOMIC_DIM..(i + 1) * RADIOMIC_DIM];
            (crate::embedding::dot(row, r) + head.b1[i]).max(0.0)
        })
        .collect();
    let out: Vec<f64> = (0..EMBED_DIM)
        .map(|i| {
            crate::embedding::dot(&head.w2[i * EMBED_DIM..(i + 1) * EMBED_DIM], &hidden)
                + head.b2[i]
        })
        .collect();
    Embedding::normalize(out)
}

/// One row per patch: origin z,y,x then the 34 named features.
pub fn write_radiomics_csv(path: &Path, rows: &[([usize; 3], RadiomicVector)]) -> Result<()> {
    let names = feature_names();
    crate::io::write_matrix_csv(
        path,
        &names,
        rows.iter().map(|(o, r)| (*o, r.values.to_vec())),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn patch(f: impl Fn((usize, usize, usize)) -> i16) -> Patch {
        Patch::new(Array3::from_shape_fn((8, 8, 8), f), [0, 0, 0]).unwrap()
    }

    #[test]
    fn layout_and_names() {
        assert_eq!(feature_names().len(), RADIOMIC_DIM);
        assert_eq!(feature_names()[14], "lbp_0");
        let r = radiomic_vector(&patch(|(z, y, x)| {
            ((z * 7 + y * 3 + x * 11) % 13) as i16 * 20 - 900
        }))
        .unwrap();
        assert!((r.lbp().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scaler_zero_variance_is_unit() {
        let a = radiomic_vector(&patch(|_| -900)).unwrap();
        let s = RadiomicScaler::fit(&[a.clone(), a.clone()]).unwrap();
        assert!(s.apply(&a).iter().all(|&v| v == 0.0));
        assert!(RadiomicScaler::fit(&[]).is_err());
    }

    #[test]
    fn teacher_forced_output() {
        let mut h = TeacherHeadParams::seeded(1);
        h.w1.iter_mut().for_each(|w| *w = 0.0);
        h.b2[0] = 1.0;
        let e = teacher_project(&[0.3; RADIOMIC_DIM], &h).unwrap();
        assert_eq!(e.values()[0], 1.0);
        assert!(e.values()[1..].iter().all(|&v| v == 0.0));
        h.b2[0] = 0.0;
        assert!(matches!(
            teacher_project(&[0.3; RADIOMIC_DIM], &h),
            Err(Error::DegenerateEmbedding(_))
        ));
    }
}
