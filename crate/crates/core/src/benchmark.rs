//! Seeded four-region phantom benchmark, a CPU-sized model preset and the
//! component ablation runner.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::distill::{train, StepMetrics};
use crate::error::{Error, Result, StageExt};
use crate::eval::{segmentation_metrics, ClassMetrics};
use crate::hu::HuThresholds;
use crate::nn::UNetConfig;
use crate::phantom::{generate_phantom, Geometry, PhantomSpec, RegionSpec, TextureKind};
use crate::segment::{segment_volume, FeatureSource};
use crate::volume::{CtVolume, LabelVolume, PathologyLabel};

/// Cubic phantoms whose body box is split into four tissue quadrants at
/// seed-jittered positions, with the label-to-quadrant assignment permuted
/// by seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSuite {
    pub size: usize,
    /// Background shell thickness in voxels.
    pub margin: usize,
    /// Maximum split-point offset from the body centre, in voxels.
    pub jitter: usize,
    pub spacing: f64,
    pub train_volumes: usize,
    pub test_volumes: usize,
    pub seed: u64,
}

impl Default for PhantomSuite {
    fn default() -> Self {
        Self {
            size: 64,
            margin: 0,
            jitter: 4,
            spacing: 0.6,
            train_volumes: 4,
            test_volumes: 2,
            seed: 0,
        }
    }
}

/// Intensity model of one tissue class in the benchmark.
pub fn tissue_model(label: PathologyLabel) -> (f64, f64, TextureKind) {
    match label {
        PathologyLabel::Emphysema => (-930.0, 25.0, TextureKind::Speckle),
        PathologyLabel::Healthy => (-800.0, 30.0, TextureKind::Flat),
        PathologyLabel::Ggo => (-500.0, 40.0, TextureKind::Speckle),
        PathologyLabel::Fibrosis => (-150.0, 60.0, TextureKind::Stripes),
        PathologyLabel::Background => (-1000.0, 0.0, TextureKind::Flat),
    }
}

impl PhantomSuite {
    pub fn validate(&self, side: usize) -> Result<()> {
        let body = self.size.saturating_sub(2 * self.margin);
        if self.size < side || body < 4 || 2 * self.jitter + 2 > body || !(self.spacing > 0.0) {
            return Err(Error::invalid(format!(
                "phantom suite {self:?} does not fit patch side {side}"
            )));
        }
        Ok(())
    }

    pub fn spec(&self, phantom_seed: u64) -> PhantomSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(phantom_seed);
        let (lo, hi) = (self.margin, self.size - self.margin);
        let mid = (lo + hi) / 2;
        let j = self.jitter as i64;
        let mut split = || (mid as i64 + rng.random_range(-j..=j)) as usize;
        let (sy, sx) = (split(), split());
        let mut labels = PathologyLabel::TISSUE;
        labels.shuffle(&mut rng);
        let quads = [
            [lo, sy, lo, sx],
            [lo, sy, sx, hi],
            [sy, hi, lo, sx],
            [sy, hi, sx, hi],
        ];
        let regions = quads
            .iter()
            .zip(labels)
            .map(|(q, label)| {
                let (hu_mean, hu_std, texture) = tissue_model(label);
                RegionSpec {
                    label,
                    geometry: Geometry::Box {
                        min: [lo, q[0], q[2]],
                        max: [hi, q[1], q[3]],
                    },
                    hu_mean,
                    hu_std,
                    texture,
                }
            })
            .collect();
        PhantomSpec {
            shape: [self.size; 3],
            spacing: [self.spacing; 3],
            regions,
            seed: phantom_seed,
            background_hu: tissue_model(PathologyLabel::Background).0,
        }
    }

    fn seeds(&self, offset: u64, n: usize) -> Vec<u64> {
        (0..n as u64)
            .map(|i| self.seed.wrapping_mul(1_000_003).wrapping_add(offset + i))
            .collect()
    }

    pub fn train_seeds(&self) -> Vec<u64> {
        self.seeds(0, self.train_volumes)
    }

    pub fn test_seeds(&self) -> Vec<u64> {
        self.seeds(500_000, self.test_volumes)
    }

    pub fn generate(
        &self,
        seeds: &[u64],
        thresholds: &HuThresholds,
    ) -> Result<Vec<(CtVolume, LabelVolume)>> {
        seeds
            .iter()
            .map(|&s| generate_phantom(&self.spec(s), thresholds))
            .collect()
    }
}

/// Model and schedule sized for a few minutes of single-core training.
/// Warmup constants are scaled to the step budget.
pub fn tiny_config(steps: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        model: UNetConfig {
            side: 16,
            widths: vec![8, 16, 32],
            groups: 4,
            time_embed_dim: 16,
            time_dim: 32,
        },
        ..ExperimentConfig::default()
    };
    c.train.steps = steps;
    c.train.batch = 8;
    c.train.lr = 2e-3;
    c.train.patches_per_volume = 48;
    c.distill.t_w = steps / 4;
    c.distill.t_ramp = (steps / 4).max(1);
    c.inference.stride = Some(8);
    c.output_dir = "runs/tiny".into();
    c
}

/// One row of the component ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AblationRow {
    pub name: &'static str,
    pub hu_preserved: bool,
    pub distillation: bool,
    pub warmup: bool,
    pub multi_timestep: bool,
    pub fusion: bool,
}

pub const ABLATION_ROWS: [AblationRow; 6] = [
    AblationRow {
        name: "Baseline (8-bit, no distil.)",
        hu_preserved: false,
        distillation: false,
        warmup: false,
        multi_timestep: false,
        fusion: false,
    },
    AblationRow {
        name: "+ HU preservation",
        hu_preserved: true,
        distillation: false,
        warmup: false,
        multi_timestep: false,
        fusion: false,
    },
    AblationRow {
        name: "+ Distillation (no warmup)",
        hu_preserved: true,
        distillation: true,
        warmup: false,
        multi_timestep: false,
        fusion: false,
    },
    AblationRow {
        name: "+ Warmup schedule",
        hu_preserved: true,
        distillation: true,
        warmup: true,
        multi_timestep: false,
        fusion: false,
    },
    AblationRow {
        name: "+ Multi-timestep aggr.",
        hu_preserved: true,
        distillation: true,
        warmup: true,
        multi_timestep: true,
        fusion: false,
    },
    AblationRow {
        name: "+ Sobel-Diffusion Fusion",
        hu_preserved: true,
        distillation: true,
        warmup: true,
        multi_timestep: true,
        fusion: true,
    },
];

/// Timestep used when multi-timestep aggregation is off.
pub const SINGLE_TIMESTEP: usize = 100;

impl AblationRow {
    /// The base configuration with this row's components switched. The
    /// fusion column toggles both boundary refinement and the HU
    /// compatibility filter.
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        c.normalization.eight_bit = !self.hu_preserved;
        c.distill.enabled = self.distillation;
        c.distill.warmup = self.warmup;
        if !self.multi_timestep {
            c.inference.timesteps = vec![SINGLE_TIMESTEP];
        }
        c.segment.fusion = self.fusion;
        c.segment.hu_filter = self.fusion;
        c
    }
}

/// Per-volume metrics of one pipeline run on the suite's test phantoms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub config_hash: String,
    pub volumes: Vec<Vec<ClassMetrics>>,
}

impl SuiteResult {
    pub fn mean_dice(&self) -> f64 {
        mean(self.volumes.iter().flat_map(|v| v.iter().map(|c| c.dice)))
    }

    pub fn mean_hd95(&self) -> Option<f64> {
        let hs: Vec<f64> = self
            .volumes
            .iter()
            .flat_map(|v| v.iter().filter_map(|c| c.hd95))
            .collect();
        (!hs.is_empty()).then(|| mean(hs))
    }

    /// Tissue class with the lowest DSC averaged over volumes.
    pub fn lowest_class(&self) -> PathologyLabel {
        let per = |l: PathologyLabel| {
            mean(
                self.volumes
                    .iter()
                    .flat_map(|v| v.iter().filter(|c| c.label == l).map(|c| c.dice)),
            )
        };
        PathologyLabel::TISSUE
            .into_iter()
            .min_by(|a, b| per(*a).total_cmp(&per(*b)))
            .expect("four classes")
    }
}

fn mean(it: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = it
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Trains on the suite's training phantoms.
pub fn train_on_suite(
    cfg: &ExperimentConfig,
    on_step: impl FnMut(&StepMetrics),
) -> Result<Checkpoint> {
    let train_set = cfg
        .phantom
        .generate(&cfg.phantom.train_seeds(), &cfg.segment.thresholds)
        .stage("phantom")?;
    let corpus: Vec<CtVolume> = train_set.into_iter().map(|(v, _)| v).collect();
    Ok(train(&corpus, &cfg.train_setup(), on_step)
        .stage("train")?
        .checkpoint)
}

/// Segments and scores the suite's test phantoms with a trained model.
pub fn evaluate_on_suite(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<SuiteResult> {
    let test = cfg
        .phantom
        .generate(&cfg.phantom.test_seeds(), &cfg.segment.thresholds)
        .stage("phantom")?;
    let mut volumes = Vec::new();
    for (vol, gt) in &test {
        let seg = segment_volume(vol, ck, &cfg.inference, &cfg.segment)?;
        volumes.push(
            segmentation_metrics(&seg.labels, gt, vol.spacing(), cfg.evaluate.mode)
                .stage("evaluate")?,
        );
    }
    Ok(SuiteResult {
        config_hash: cfg.full_hash(),
        volumes,
    })
}

/// k-means on raw radiomic vectors; needs no trained model, but the
/// checkpoint still provides the patch side.
pub fn radiomics_baseline(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<SuiteResult> {
    let mut c = cfg.clone();
    c.segment.features = FeatureSource::RadiomicsKmeans;
    evaluate_on_suite(&c, ck)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationResult {
    pub row: AblationRow,
    /// One entry per seed.
    pub runs: Vec<SuiteResult>,
}

impl AblationResult {
    pub fn mean_dice(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.mean_dice()))
    }

    pub fn mean_hd95(&self) -> Option<f64> {
        let hs: Vec<f64> = self.runs.iter().filter_map(|r| r.mean_hd95()).collect();
        (!hs.is_empty()).then(|| mean(hs))
    }
}

/// Reseeds training, phantoms and clustering from one ablation seed.
pub fn seeded(base: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut c = base.clone();
    c.train.seed = seed;
    c.train.teacher_seed = seed.wrapping_add(1);
    c.phantom.seed = seed;
    c.segment.gmm.seed = seed;
    c.inference.noise_seed = seed;
    c
}

/// Runs every ablation row for every seed. Rows that share a training
/// configuration share one trained model.
pub fn run_ablation(
    base: &ExperimentConfig,
    seeds: &[u64],
    mut progress: impl FnMut(&str),
) -> Result<Vec<AblationResult>> {
    let mut results: Vec<AblationResult> = ABLATION_ROWS
        .iter()
        .map(|&row| AblationResult { row, runs: vec![] })
        .collect();
    for &seed in seeds {
        let mut trained: Vec<(String, Checkpoint)> = Vec::new();
        for (i, row) in ABLATION_ROWS.iter().enumerate() {
            let cfg = row.apply(&seeded(base, seed));
            let hash = cfg.training_hash();
            let ck = match trained.iter().find(|(h, _)| *h == hash) {
                Some((_, ck)) => ck.clone(),
                None => {
                    progress(&format!("seed {seed}: training for row {}", row.name));
                    let ck = train_on_suite(&cfg, |_| {})?;
                    trained.push((hash, ck.clone()));
                    ck
                }
            };
            let r = evaluate_on_suite(&cfg, &ck)?;
            progress(&format!(
                "seed {seed}: {} -> DSC {:.4}",
                row.name,
                r.mean_dice()
            ));
            results[i].runs.push(r);
        }
    }
    Ok(results)
}

/// Writes the ablation table: component check marks, then mean DSC (%) and
/// mean HD95 (mm), tagged with the hash of the base configuration.
pub fn write_ablation_csv(
    path: &Path,
    results: &[AblationResult],
    config_hash: &str,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "row",
        "hu_preserved",
        "distillation",
        "warmup",
        "multi_timestep",
        "fusion",
        "dsc",
        "hd95",
        "config_hash",
    ])?;
    let mark = |b: bool| if b { "yes" } else { "no" }.to_string();
    for r in results {
        let row = r.row;
        w.write_record([
            row.name.to_string(),
            mark(row.hu_preserved),
            mark(row.distillation),
            mark(row.warmup),
            mark(row.multi_timestep),
            mark(row.fusion),
            format!("{:.2}", 100.0 * r.mean_dice()),
            r.mean_hd95().map(|h| format!("{h:.3}")).unwrap_or_default(),
            config_hash.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
