//! Single-file model archive: magic, a JSON manifest, then little-endian
//! f32 tensors.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{DenoiserParams, ScheduleConfig};
use crate::error::{Error, Result};
use crate::nn::head::StudentHeadParams;
use crate::nn::UNetConfig;
use crate::radiomics::{RadiomicScaler, TeacherHeadParams};
use crate::volume::HuWindow;

const MAGIC: &[u8; 8] = b"LDCKPT01";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserParams,
    pub student: StudentHeadParams,
    pub teacher: TeacherHeadParams,
    pub window: HuWindow,
    /// Model input was quantized to 256 window levels.
    pub eight_bit: bool,
    pub scaler: RadiomicScaler,
    /// Hash of the training-relevant configuration.
    pub config_hash: String,
    pub steps_trained: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schedule: ScheduleConfig,
    unet: UNetConfig,
    window: HuWindow,
    eight_bit: bool,
    scaler: RadiomicScaler,
    config_hash: String,
    steps_trained: u64,
    tensors: Vec<TensorEntry>,
}

/// Rounds to the precision the archive stores.
pub fn to_f32_precision(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

impl Checkpoint {
    /// Rounds every trainable tensor to f32 so the in-memory model equals
    /// what a save/load cycle produces.
    pub fn round_to_storage(&mut self) {
        to_f32_precision(&mut self.denoiser.values);
        to_f32_precision(&mut self.student.values);
        to_f32_precision(&mut self.teacher.w1);
        to_f32_precision(&mut self.teacher.b1);
        to_f32_precision(&mut self.teacher.w2);
        to_f32_precision(&mut self.teacher.b2);
    }

    fn tensors(&self) -> [(&'static str, &[f64]); 6] {
        [
            ("denoiser", &self.denoiser.values),
            ("student", &self.student.values),
            ("teacher.w1", &self.teacher.w1),
            ("teacher.b1", &self.teacher.b1),
            ("teacher.w2", &self.teacher.w2),
            ("teacher.b2", &self.teacher.b2),
        ]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let manifest = Manifest {
            schedule: self.schedule.clone(),
            unet: self.denoiser.config.clone(),
            window: self.window,
            eight_bit: self.eight_bit,
            scaler: self.scaler.clone(),
            config_hash: self.config_hash.clone(),
            steps_trained: self.steps_trained,
            tensors: tensors
                .iter()
                .map(|(n, v)| TensorEntry {
                    name: n.to_string(),
                    len: v.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.denoiser.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, v) in tensors {
            for &x in v {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |reason: &str| Error::Unreadable {
            path: origin.to_string(),
            reason: reason.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive (bad magic)"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + mlen)
            .ok_or_else(|| bad("truncated manifest"))?;
        let m: Manifest =
            serde_json::from_slice(body).map_err(|e| bad(&format!("bad manifest: {e}")))?;
        let mut pos = 16 + mlen;
        let mut take = |name: &str| -> Result<Vec<f64>> {
            let e = m
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| bad(&format!("missing tensor {name}")))?;
            let raw = bytes
                .get(pos..pos + 4 * e.len)
                .ok_or_else(|| bad("truncated tensor data"))?;
            pos += 4 * e.len;
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect())
        };
        let denoiser = take("denoiser")?;
        let student = take("student")?;
        let teacher = TeacherHeadParams {
            w1: take("teacher.w1")?,
            b1: take("teacher.b1")?,
            w2: take("teacher.w2")?,
            b2: take("teacher.b2")?,
        };
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensors"));
        }
        let ck = Self {
            schedule: m.schedule,
            denoiser: DenoiserParams {
                config: m.unet,
                values: denoiser,
            },
            student: StudentHeadParams { values: student },
            teacher,
            window: m.window,
            eight_bit: m.eight_bit,
            scaler: m.scaler,
            config_hash: m.config_hash,
            steps_trained: m.steps_trained,
        };
        ck.validate().map_err(|e| bad(&e.to_string()))?;
        Ok(ck)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.denoiser.network()?;
        self.student.validate()?;
        self.teacher.validate()?;
        self.window.validate()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::Unreadable {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Refuses to serve a request whose training hash differs unless
    /// `allow_mismatch` is set.
    pub fn check_hash(&self, request: &str, allow_mismatch: bool) -> Result<()> {
        if self.config_hash != request && !allow_mismatch {
            return Err(Error::HashMismatch {
                checkpoint: self.config_hash.clone(),
                request: request.to_string(),
            });
        }
        Ok(())
    }
}
