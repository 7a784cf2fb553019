//! Experiment configuration: one serializable document for every stage,
//! with content hashes and dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::benchmark::PhantomSuite;
use crate::diffusion::ScheduleConfig;
use crate::distill::DistillConfig;
use crate::distill::{TrainConfig, TrainSetup};
use crate::error::{Error, Result};
use crate::eval::EvalMode;
use crate::inference::InferenceConfig;
use crate::nn::UNetConfig;
use crate::segment::SegmentConfig;
use crate::volume::HuWindow;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Training / segmentation volumes. Empty means the phantom suite.
    pub volumes: Vec<PathBuf>,
    /// Ground-truth label volumes for `evaluate`, paired with predictions.
    pub labels: Vec<PathBuf>,
    pub predictions: Vec<PathBuf>,
    /// Checkpoint path; defaults to `<output_dir>/checkpoint.ldck`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct NormalizationConfig {
    pub window: HuWindow,
    /// Quantize the window to 256 levels before normalization.
    pub eight_bit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub count: usize,
    pub shape: [usize; 3],
    pub solver_steps: usize,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            count: 2,
            shape: [32, 32, 32],
            solver_steps: 25,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub mode: EvalMode,
    /// Reference and synthetic volumes for the fidelity metrics, paired by
    /// position for SSIM and PSNR.
    pub real: Vec<PathBuf>,
    pub generated: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// Each seed reseeds training, the phantom suite and the GMM.
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub phantom: PhantomSuite,
    pub normalization: NormalizationConfig,
    pub model: UNetConfig,
    pub schedule: ScheduleConfig,
    pub distill: DistillConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub segment: SegmentConfig,
    pub generate: GenerateConfig,
    pub evaluate: EvaluateConfig,
    pub ablation: AblationConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            phantom: PhantomSuite::default(),
            normalization: NormalizationConfig::default(),
            model: UNetConfig::default(),
            schedule: ScheduleConfig::default(),
            distill: DistillConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            segment: SegmentConfig::default(),
            generate: GenerateConfig::default(),
            evaluate: EvaluateConfig::default(),
            ablation: AblationConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn digest(v: &Value) -> String {
    // serde_json maps are ordered by key, so this encoding is canonical.
    let bytes = serde_json::to_vec(v).expect("config values serialize");
    let h = Sha256::digest(&bytes);
    h.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl ExperimentConfig {
    /// Reads TOML (`.toml`) or JSON (anything else).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Unreadable {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.normalization.window.validate()?;
        self.model.validate()?;
        self.distill.validate()?;
        self.schedule.build()?;
        self.segment.thresholds.validate()?;
        if self.inference.timesteps.is_empty() {
            return Err(Error::invalid("inference.timesteps must not be empty"));
        }
        if let Some(&t) = self
            .inference
            .timesteps
            .iter()
            .find(|&&t| t >= self.schedule.steps)
        {
            return Err(Error::invalid(format!(
                "timestep {t} exceeds schedule length {}",
                self.schedule.steps
            )));
        }
        self.phantom.validate(self.model.side)?;
        Ok(())
    }

    /// Applies `key.path=value` overrides. Values parse as JSON when they
    /// can and are taken as strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("override `{o}` is not key=value")))?;
            let parsed =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut cur = &mut v;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = cur.as_object_mut().ok_or_else(|| {
                    Error::invalid(format!("override `{key}`: `{part}` is not inside a table"))
                })?;
                if !obj.contains_key(*part) {
                    return Err(Error::invalid(format!(
                        "override `{key}`: unknown key `{part}`"
                    )));
                }
                if i + 1 == parts.len() {
                    obj.insert(part.to_string(), parsed.clone());
                    break;
                }
                cur = obj.get_mut(*part).expect("checked above");
            }
        }
        let cfg: Self = serde_json::from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash of everything that determines a trained checkpoint.
    pub fn training_hash(&self) -> String {
        let v = serde_json::json!({
            "volumes": self.data.volumes,
            "phantom": self.phantom,
            "normalization": self.normalization,
            "model": self.model,
            "schedule": self.schedule,
            "distill": self.distill,
            "train": self.train,
        });
        digest(&v)
    }

    /// Hash of the whole configuration except the output location.
    pub fn full_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
        }
        digest(&v)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.data
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("checkpoint.ldck"))
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            unet: self.model.clone(),
            schedule: self.schedule.clone(),
            distill: self.distill.clone(),
            train: self.train.clone(),
            window: self.normalization.window,
            eight_bit: self.normalization.eight_bit,
            config_hash: self.training_hash(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
