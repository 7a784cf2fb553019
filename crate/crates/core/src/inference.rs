//! Frozen-model feature extraction and sample generation.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::head::student_forward;
use crate::nn::{Fmap, UNet, BOTTLENECK_CHANNELS};
use crate::volume::{grid_origins, CtVolume, Patch};
use crate::EMBED_DIM;

pub const DESCRIPTOR_DIM: usize = EMBED_DIM + BOTTLENECK_CHANNELS;

/// Spacing given to generated volumes (mm, isotropic).
pub const GENERATED_SPACING: f64 = 0.6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Noise the patch to each t and run one forward pass.
    #[default]
    Forward,
    /// Noise to the largest t, then record along a solver trajectory.
    Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub timesteps: Vec<usize>,
    pub mode: FeatureMode,
    pub solver_steps: usize,
    pub noise_seed: u64,
    /// Grid stride for corpus extraction; defaults to half the patch side.
    pub stride: Option<usize>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            timesteps: vec![50, 100, 150, 200],
            mode: FeatureMode::Forward,
            solver_steps: 250,
            noise_seed: 0,
            stride: None,
        }
    }
}

/// `[mean student embedding (128) | mean pooled bottleneck (256)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchDescriptor {
    pub values: Vec<f64>,
    pub origin: [usize; 3],
}

impl PatchDescriptor {
    pub fn embedding_part(&self) -> &[f64] {
        &self.values[..EMBED_DIM]
    }
    pub fn bottleneck_part(&self) -> &[f64] {
        &self.values[EMBED_DIM..]
    }
}

/// SplitMix64 finalizer; derives independent sub-seeds from tuples.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243F_6A88_85A3_08D3u64, |h, &p| {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

fn gaussian(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// A loaded checkpoint with its network built once.
pub struct FeatureExtractor<'a> {
    ck: &'a Checkpoint,
    net: UNet,
    schedule: NoiseSchedule,
}

/// One recorded feature: pooled bottleneck and its student embedding.
struct Recorded {
    pooled: Vec<f64>,
    z: Vec<f64>,
}

impl<'a> FeatureExtractor<'a> {
    pub fn new(ck: &'a Checkpoint) -> Result<Self> {
        Ok(Self {
            ck,
            net: ck.denoiser.network()?,
            schedule: ck.schedule.build()?,
        })
    }

    pub fn side(&self) -> usize {
        self.ck.denoiser.config.side
    }

    fn check_timesteps(&self, ts: &[usize]) -> Result<()> {
        if ts.is_empty() {
            return Err(Error::invalid("timestep set is empty"));
        }
        if let Some(&t) = ts.iter().find(|&&t| t >= self.schedule.steps()) {
            return Err(Error::invalid(format!(
                "timestep {t} outside [0, {})",
                self.schedule.steps()
            )));
        }
        Ok(())
    }

    fn input(&self, patch: &Patch) -> Result<Vec<f64>> {
        if patch.side() != self.side() {
            return Err(Error::shape(format!(
                "patch side {} but model expects {}",
                patch.side(),
                self.side()
            )));
        }
        Ok(patch
            .voxels()
            .iter()
            .map(|&h| self.ck.window.model_input(h as f64, self.ck.eight_bit))
            .collect())
    }

    fn record(&self, f: &Fmap) -> Result<Recorded> {
        let pooled = f.pooled();
        let z = student_forward(&pooled, &self.ck.student)?.z;
        Ok(Recorded { pooled, z })
    }

    /// Descriptor for one patch. Noise for each t depends only on
    /// `(noise_seed, origin, t)`, so the order of `timesteps` is irrelevant.
    pub fn extract(
        &self,
        patch: &Patch,
        timesteps: &[usize],
        mode: FeatureMode,
        solver_steps: usize,
        noise_seed: u64,
    ) -> Result<PatchDescriptor> {
        self.check_timesteps(timesteps)?;
        let x0 = self.input(patch)?;
        let o = patch.origin();
        let base = [noise_seed, o[0] as u64, o[1] as u64, o[2] as u64];
        let recs = match mode {
            FeatureMode::Forward => timesteps
                .iter()
                .map(|&t| {
                    let eps = gaussian(
                        x0.len(),
                        mix_seed(&[base[0], base[1], base[2], base[3], t as u64]),
                    );
                    let ab = self.schedule.alpha_bars[t];
                    let x_t: Vec<f64> = x0
                        .iter()
                        .zip(&eps)
                        .map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e)
                        .collect();
                    self.record(&self.net.encode(
                        &self.ck.denoiser.values,
                        &Fmap::from_vec(1, self.side(), x_t),
                        t as f64,
                    )?)
                })
                .collect::<Result<Vec<_>>>()?,
            FeatureMode::Trajectory => {
                self.trajectory(&x0, timesteps, solver_steps, mix_seed(&base))?
            }
        };
        Ok(aggregate(&recs, o))
    }

    /// Noises `x0` to the grid time nearest `max(timesteps)` and runs the
    /// solver toward 0, recording at the grid times nearest each t.
    fn trajectory(
        &self,
        x0: &[f64],
        timesteps: &[usize],
        solver_steps: usize,
        seed: u64,
    ) -> Result<Vec<Recorded>> {
        let full = solver_grid(self.schedule.steps(), solver_steps)?;
        let nearest = |t: usize| {
            *full
                .iter()
                .min_by_key(|&&g| (g as i64 - t as i64).abs())
                .unwrap()
        };
        let start = nearest(*timesteps.iter().max().unwrap());
        let grid: Vec<usize> = full.iter().copied().filter(|&g| g <= start).collect();
        let ab = self.schedule.alpha_bars[start];
        let eps = gaussian(x0.len(), seed);
        let x_t: Vec<f64> = x0
            .iter()
            .zip(&eps)
            .map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e)
            .collect();
        let wanted: Vec<usize> = timesteps.iter().map(|&t| nearest(t)).collect();
        let mut seen: Vec<(usize, Recorded)> = Vec::new();
        let side = self.side();
        let mut model = |x: &[f64], t: usize| -> Result<Vec<f64>> {
            let out = self.net.forward(
                &self.ck.denoiser.values,
                &Fmap::from_vec(1, side, x.to_vec()),
                t as f64,
            )?;
            if wanted.contains(&t) && !seen.iter().any(|(g, _)| *g == t) {
                seen.push((t, self.record(&out.bottleneck)?));
            }
            Ok(out.eps.data)
        };
        dpm_solve(&mut model, &self.schedule, &grid, x_t, 2)?;
        wanted
            .iter()
            .map(|g| {
                seen.iter()
                    .find(|(t, _)| t == g)
                    .map(|(_, r)| Recorded {
                        pooled: r.pooled.clone(),
                        z: r.z.clone(),
                    })
                    .ok_or_else(|| Error::invalid(format!("grid time {g} was never visited")))
            })
            .collect()
    }
}

fn aggregate(recs: &[Recorded], origin: [usize; 3]) -> PatchDescriptor {
    let n = recs.len() as f64;
    let mut values = vec![0.0; DESCRIPTOR_DIM];
    for r in recs {
        for (v, z) in values[..EMBED_DIM].iter_mut().zip(&r.z) {
            *v += z;
        }
        for (v, f) in values[EMBED_DIM..].iter_mut().zip(&r.pooled) {
            *v += f;
        }
    }
    values.iter_mut().for_each(|v| *v /= n);
    PatchDescriptor { values, origin }
}

pub fn extract_features(
    patch: &Patch,
    ck: &Checkpoint,
    timesteps: &[usize],
    noise_seed: u64,
) -> Result<PatchDescriptor> {
    FeatureExtractor::new(ck)?.extract(patch, timesteps, FeatureMode::Forward, 0, noise_seed)
}

/// Descriptors for every grid patch of the volume.
pub fn extract_corpus(
    volume: &CtVolume,
    ck: &Checkpoint,
    cfg: &InferenceConfig,
) -> Result<Vec<PatchDescriptor>> {
    let ex = FeatureExtractor::new(ck)?;
    let side = ex.side();
    let stride = cfg.stride.unwrap_or((side / 2).max(1));
    let origins = grid_origins(volume.shape(), side, stride)?;
    origins
        .into_iter()
        .map(|o| {
            ex.extract(
                &volume.patch(o, side)?,
                &cfg.timesteps,
                cfg.mode,
                cfg.solver_steps,
                cfg.noise_seed,
            )
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct DescriptorIndex {
    rows: usize,
    dim: usize,
    origins: Vec<[usize; 3]>,
    config_hash: String,
}

/// Writes `<stem>.bin` (rows x 384 little-endian f32) and `<stem>.json`.
pub fn save_descriptors(
    stem: &Path,
    descriptors: &[PatchDescriptor],
    config_hash: &str,
) -> Result<()> {
    let mut bytes = Vec::with_capacity(descriptors.len() * DESCRIPTOR_DIM * 4);
    for d in descriptors {
        for &v in &d.values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(stem.with_extension("bin"), bytes)?;
    let index = DescriptorIndex {
        rows: descriptors.len(),
        dim: DESCRIPTOR_DIM,
        origins: descriptors.iter().map(|d| d.origin).collect(),
        config_hash: config_hash.to_string(),
    };
    std::fs::write(
        stem.with_extension("json"),
        serde_json::to_vec_pretty(&index)?,
    )?;
    Ok(())
}

pub fn load_descriptors(stem: &Path) -> Result<Vec<PatchDescriptor>> {
    let jp = stem.with_extension("json");
    let bad = |p: &Path, r: &str| Error::Unreadable {
        path: p.display().to_string(),
        reason: r.to_string(),
    };
    let index: DescriptorIndex =
        serde_json::from_slice(&std::fs::read(&jp).map_err(|e| bad(&jp, &e.to_string()))?)
            .map_err(|e| bad(&jp, &e.to_string()))?;
    let bp = stem.with_extension("bin");
    let bytes = std::fs::read(&bp).map_err(|e| bad(&bp, &e.to_string()))?;
    if bytes.len() != index.rows * index.dim * 4 || index.origins.len() != index.rows {
        return Err(bad(&bp, "size does not match index"));
    }
    Ok(bytes
        .chunks_exact(index.dim * 4)
        .zip(index.origins)
        .map(|(row, origin)| PatchDescriptor {
            values: row
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            origin,
        })
        .collect())
}

/// `steps` evaluation times from `T - 1` down to 0, evenly spaced.
pub fn solver_grid(t_total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_total {
        return Err(Error::invalid(format!(
            "solver steps must be in [1, {t_total}], got {steps}"
        )));
    }
    if steps == 1 {
        return Ok(vec![t_total - 1]);
    }
    Ok((0..steps)
        .map(|k| {
            ((t_total - 1) as f64 * (steps - 1 - k) as f64 / (steps - 1) as f64).round() as usize
        })
        .collect())
}

/// Multistep DPM-Solver over noise predictions. Evaluates `model` once at
/// every grid time (descending), then jumps to the clean sample with the
/// final x0 prediction. `order` 1 is DDIM.
pub fn dpm_solve(
    model: &mut dyn FnMut(&[f64], usize) -> Result<Vec<f64>>,
    schedule: &NoiseSchedule,
    grid: &[usize],
    mut x: Vec<f64>,
    order: usize,
) -> Result<Vec<f64>> {
    if grid.is_empty() || !(1..=2).contains(&order) {
        return Err(Error::invalid(
            "solver needs a non-empty grid and order 1 or 2",
        ));
    }
    let alpha = |t: usize| schedule.alpha_bars[t].sqrt();
    let sigma = |t: usize| (1.0 - schedule.alpha_bars[t]).sqrt();
    let lambda = |t: usize| (alpha(t) / sigma(t)).ln();
    let mut prev: Option<(f64, Vec<f64>)> = None;
    for (k, &s) in grid.iter().enumerate() {
        let eps = model(&x, s)?;
        if k + 1 == grid.len() {
            let (a, sg) = (alpha(s), sigma(s));
            return Ok(x
                .iter()
                .zip(&eps)
                .map(|(xv, e)| (xv - sg * e) / a)
                .collect());
        }
        let t = grid[k + 1];
        let h = lambda(t) - lambda(s);
        let ratio = alpha(t) / alpha(s);
        let c = sigma(t) * h.exp_m1();
        match (&prev, order) {
            (Some((h_prev, eps_prev)), 2) => {
                let r = h_prev / h;
                for ((xv, e), ep) in x.iter_mut().zip(&eps).zip(eps_prev) {
                    let d1 = (e - ep) / r;
                    *xv = ratio * *xv - c * e - 0.5 * c * d1;
                }
            }
            _ => {
                for (xv, e) in x.iter_mut().zip(&eps) {
                    *xv = ratio * *xv - c * e;
                }
            }
        }
        prev = Some((h, eps));
    }
    unreachable!("loop returns on the last grid time")
}

/// Samples a volume from pure noise, tile by tile, and maps it to HU.
pub fn dpm_generate(
    ck: &Checkpoint,
    shape: [usize; 3],
    steps: usize,
    seed: u64,
) -> Result<CtVolume> {
    let net = ck.denoiser.network()?;
    let schedule = ck.schedule.build()?;
    let grid = solver_grid(schedule.steps(), steps)?;
    let side = ck.denoiser.config.side;
    if shape.iter().any(|&d| d == 0 || d % side != 0) {
        return Err(Error::invalid(format!(
            "shape {shape:?} is not a multiple of the patch side {side}"
        )));
    }
    let mut out = Array3::<f64>::zeros((shape[0], shape[1], shape[2]));
    for o in grid_origins(shape, side, side)? {
        let x = gaussian(
            side * side * side,
            mix_seed(&[seed, o[0] as u64, o[1] as u64, o[2] as u64]),
        );
        let mut model = |x: &[f64], t: usize| -> Result<Vec<f64>> {
            Ok(net
                .forward(
                    &ck.denoiser.values,
                    &Fmap::from_vec(1, side, x.to_vec()),
                    t as f64,
                )?
                .eps
                .data)
        };
        let x0 = dpm_solve(&mut model, &schedule, &grid, x, 2)?;
        for (i, v) in x0.into_iter().enumerate() {
            let (z, y, xx) = (i / (side * side), (i / side) % side, i % side);
            out[[o[0] + z, o[1] + y, o[2] + xx]] = ck.window.denormalize(v.clamp(-1.0, 1.0));
        }
    }
    CtVolume::from_real(out, [GENERATED_SPACING; 3], [0.0; 3])
}
