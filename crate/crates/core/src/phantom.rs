//! Synthetic lung phantoms with known per-voxel tissue labels.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hu::HuThresholds;
use crate::volume::{CtVolume, LabelVolume, PathologyLabel, HU_MAX, HU_MIN};

const STRIPE_AMPLITUDE: f64 = 40.0;
const STRIPE_PERIOD: f64 = 4.0;
const SPECKLE_AMPLITUDE: f64 = 40.0;
const SPECKLE_SIGMA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Flat,
    /// Reticular stripes along the in-plane diagonal.
    Stripes,
    /// Smoothed random blobs.
    Speckle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Geometry {
    /// Half-open voxel box `[min, max)`.
    Box {
        min: [usize; 3],
        max: [usize; 3],
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Ellipsoid {
        center: [f64; 3],
        radii: [f64; 3],
    },
}

impl Geometry {
    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z as f64, y as f64, x as f64];
        match self {
            Geometry::Box { min, max } => {
                (min[0]..max[0]).contains(&z)
                    && (min[1]..max[1]).contains(&y)
                    && (min[2]..max[2]).contains(&x)
            }
            Geometry::Sphere { center, radius } => {
                (0..3).map(|a| (p[a] - center[a]).powi(2)).sum::<f64>() <= radius * radius
            }
            Geometry::Ellipsoid { center, radii } => {
                (0..3)
                    .map(|a| ((p[a] - center[a]) / radii[a]).powi(2))
                    .sum::<f64>()
                    <= 1.0
            }
        }
    }

    fn fits(&self, shape: [usize; 3]) -> bool {
        match self {
            Geometry::Box { min, max } => (0..3).all(|a| min[a] < max[a] && max[a] <= shape[a]),
            Geometry::Sphere { center, radius } => {
                *radius > 0.0
                    && (0..3).all(|a| {
                        center[a] - radius >= -0.5 && center[a] + radius <= shape[a] as f64 - 0.5
                    })
            }
            Geometry::Ellipsoid { center, radii } => (0..3).all(|a| {
                radii[a] > 0.0
                    && center[a] - radii[a] >= -0.5
                    && center[a] + radii[a] <= shape[a] as f64 - 0.5
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub label: PathologyLabel,
    pub geometry: Geometry,
    pub hu_mean: f64,
    pub hu_std: f64,
    pub texture: TextureKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    #[serde(default = "default_spacing")]
    pub spacing: [f64; 3],
    pub regions: Vec<RegionSpec>,
    pub seed: u64,
    #[serde(default = "default_background")]
    pub background_hu: f64,
}

fn default_spacing() -> [f64; 3] {
    [0.6; 3]
}

fn default_background() -> f64 {
    -1000.0
}

impl PhantomSpec {
    pub fn validate(&self, thresholds: &HuThresholds) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::invalid("phantom shape must be non-empty"));
        }
        for (i, r) in self.regions.iter().enumerate() {
            if !r.geometry.fits(self.shape) {
                return Err(Error::invalid(format!(
                    "region {i} geometry exceeds shape {:?}",
                    self.shape
                )));
            }
            if !thresholds.contains(r.label, r.hu_mean, 0.0) {
                let b = thresholds.band(r.label);
                return Err(Error::invalid(format!(
                    "region {i}: hu_mean {} outside the {} band ({}, {}]",
                    r.hu_mean, r.label, b.lo, b.hi
                )));
            }
            if !(r.hu_std >= 0.0) {
                return Err(Error::invalid(format!("region {i}: hu_std must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Paints the phantom. Regions may overlap only when they share a label;
/// later regions overwrite earlier intensities.
pub fn generate_phantom(
    spec: &PhantomSpec,
    thresholds: &HuThresholds,
) -> Result<(CtVolume, LabelVolume)> {
    spec.validate(thresholds)?;
    let [d, h, w] = spec.shape;
    let mut hu = Array3::from_elem((d, h, w), spec.background_hu);
    let mut labels: LabelVolume = Array3::from_elem((d, h, w), PathologyLabel::Background);
    let mut painted: Array3<Option<PathologyLabel>> = Array3::from_elem((d, h, w), None);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    for (i, region) in spec.regions.iter().enumerate() {
        let members: Vec<(usize, usize, usize)> = ndarray::indices((d, h, w))
            .into_iter()
            .filter(|&(z, y, x)| region.geometry.contains(z, y, x))
            .collect();
        for &(z, y, x) in &members {
            match painted[[z, y, x]] {
                Some(l) if l != region.label => {
                    return Err(Error::invalid(format!(
                        "region {i} ({}) overlaps a {l} region: ambiguous ground truth",
                        region.label
                    )))
                }
                _ => painted[[z, y, x]] = Some(region.label),
            }
        }
        if members.is_empty() {
            continue;
        }
        let noise = Normal::new(region.hu_mean, region.hu_std)
            .map_err(|e| Error::invalid(format!("region {i}: {e}")))?;
        let mut values: Vec<f64> = members.iter().map(|_| noise.sample(&mut rng)).collect();
        let modulation = texture_field(region.texture, &members, spec.shape, &mut rng);
        let mod_mean = modulation.iter().sum::<f64>() / modulation.len() as f64;
        for (v, m) in values.iter_mut().zip(&modulation) {
            *v += m - mod_mean;
        }
        for (&(z, y, x), v) in members.iter().zip(values) {
            hu[[z, y, x]] = v;
            labels[[z, y, x]] = region.label;
        }
    }
    let hu = hu.mapv(|v| v.round().clamp(HU_MIN as f64, HU_MAX as f64));
    let volume = CtVolume::from_real(hu, spec.spacing, [0.0; 3])?;
    Ok((volume, labels))
}

fn texture_field(
    kind: TextureKind,
    members: &[(usize, usize, usize)],
    shape: [usize; 3],
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    match kind {
        TextureKind::Flat => vec![0.0; members.len()],
        TextureKind::Stripes => members
            .iter()
            .map(|&(_, y, x)| {
                STRIPE_AMPLITUDE
                    * (2.0 * std::f64::consts::PI * (y + x) as f64 / STRIPE_PERIOD).sin()
            })
            .collect(),
        TextureKind::Speckle => {
            let (mut lo, mut hi) = ([usize::MAX; 3], [0usize; 3]);
            for &(z, y, x) in members {
                for (a, c) in [z, y, x].into_iter().enumerate() {
                    lo[a] = lo[a].min(c);
                    hi[a] = hi[a].max(c + 1);
                }
            }
            let pad = (3.0 * SPECKLE_SIGMA).ceil() as usize;
            let lo = lo.map(|c| c.saturating_sub(pad));
            let hi = [0, 1, 2].map(|a| (hi[a] + pad).min(shape[a]));
            let dims = (hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]);
            let white = Array3::from_shape_simple_fn(dims, || rng.random::<f64>() * 2.0 - 1.0);
            let smooth = crate::filters::gaussian_smooth(&white, SPECKLE_SIGMA);
            let raw: Vec<f64> = members
                .iter()
                .map(|&(z, y, x)| smooth[[z - lo[0], y - lo[1], x - lo[2]]])
                .collect();
            let n = raw.len() as f64;
            let mean = raw.iter().sum::<f64>() / n;
            let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let scale = if sd > 0.0 {
                SPECKLE_AMPLITUDE / sd
            } else {
                0.0
            };
            raw.into_iter().map(|v| (v - mean) * scale).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(
        label: PathologyLabel,
        geometry: Geometry,
        hu_mean: f64,
        hu_std: f64,
        texture: TextureKind,
    ) -> RegionSpec {
        RegionSpec {
            label,
            geometry,
            hu_mean,
            hu_std,
            texture,
        }
    }

    #[test]
    fn emphysema_region_mean_matches() {
        for texture in [
            TextureKind::Flat,
            TextureKind::Stripes,
            TextureKind::Speckle,
        ] {
            let spec = PhantomSpec {
                shape: [16, 16, 16],
                spacing: [0.6; 3],
                regions: vec![region(
                    PathologyLabel::Emphysema,
                    Geometry::Box {
                        min: [2, 2, 2],
                        max: [14, 14, 14],
                    },
                    -960.0,
                    20.0,
                    texture,
                )],
                seed: 5,
                background_hu: -1000.0,
            };
            let (v, labels) = generate_phantom(&spec, &HuThresholds::default()).unwrap();
            let vals: Vec<f64> = v
                .voxels()
                .iter()
                .zip(labels.iter())
                .filter(|(_, l)| **l == PathologyLabel::Emphysema)
                .map(|(h, _)| *h as f64)
                .collect();
            assert_eq!(vals.len(), 12 * 12 * 12);
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((mean + 960.0).abs() <= 5.0, "{texture:?}: mean {mean}");
        }
    }

    #[test]
    fn empty_phantom_is_background() {
        let spec = PhantomSpec {
            shape: [4, 5, 6],
            spacing: [1.0; 3],
            regions: vec![],
            seed: 0,
            background_hu: -1000.0,
        };
        let (v, labels) = generate_phantom(&spec, &HuThresholds::default()).unwrap();
        assert!(labels.iter().all(|&l| l == PathologyLabel::Background));
        assert!(v.voxels().iter().all(|&h| h == -1000));
        assert_eq!(v.shape(), [4, 5, 6]);
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = PhantomSpec {
            shape: [12, 12, 12],
            spacing: [0.6; 3],
            regions: vec![region(
                PathologyLabel::Ggo,
                Geometry::Sphere {
                    center: [6.0, 6.0, 6.0],
                    radius: 4.0,
                },
                -500.0,
                40.0,
                TextureKind::Speckle,
            )],
            seed: 11,
            background_hu: -1000.0,
        };
        let a = generate_phantom(&spec, &HuThresholds::default()).unwrap();
        let b = generate_phantom(&spec, &HuThresholds::default()).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn rejects_conflicting_overlap_and_bad_bands() {
        let t = HuThresholds::default();
        let mut spec = PhantomSpec {
            shape: [8, 8, 8],
            spacing: [0.6; 3],
            regions: vec![
                region(
                    PathologyLabel::Healthy,
                    Geometry::Box {
                        min: [0, 0, 0],
                        max: [5, 5, 5],
                    },
                    -800.0,
                    10.0,
                    TextureKind::Flat,
                ),
                region(
                    PathologyLabel::Ggo,
                    Geometry::Box {
                        min: [4, 4, 4],
                        max: [8, 8, 8],
                    },
                    -500.0,
                    10.0,
                    TextureKind::Flat,
                ),
            ],
            seed: 0,
            background_hu: -1000.0,
        };
        assert!(generate_phantom(&spec, &t).is_err());
        spec.regions[1].label = PathologyLabel::Healthy;
        spec.regions[1].hu_mean = -750.0;
        assert!(generate_phantom(&spec, &t).is_ok());
        spec.regions[1].hu_mean = -500.0;
        assert!(generate_phantom(&spec, &t).is_err());
        spec.regions[1].geometry = Geometry::Box {
            min: [4, 4, 4],
            max: [9, 8, 8],
        };
        assert!(spec.validate(&t).is_err());
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = PhantomSpec {
            shape: [8, 8, 8],
            spacing: [0.6; 3],
            regions: vec![region(
                PathologyLabel::Fibrosis,
                Geometry::Ellipsoid {
                    center: [4.0, 4.0, 4.0],
                    radii: [2.0, 3.0, 3.0],
                },
                -150.0,
                50.0,
                TextureKind::Stripes,
            )],
            seed: 3,
            background_hu: -1000.0,
        };
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"ellipsoid\""));
        let back: PhantomSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}
