//! HU volumes, the invertible intensity window, and patch sampling.

use ndarray::{s, Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HU_MIN: i16 = -1024;
pub const HU_MAX: i16 = 3071;

/// A CT volume in Hounsfield units. Axes are (z, y, x).
#[derive(Clone, Debug, PartialEq)]
pub struct CtVolume {
    voxels: Array3<i16>,
    spacing: [f64; 3],
    origin: [f64; 3],
}

impl CtVolume {
    pub fn new(voxels: Array3<i16>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        check_hu_range(voxels.iter().map(|&v| v as f64))?;
        Ok(Self {
            voxels,
            spacing,
            origin,
        })
    }

    /// Builds a volume from real-valued HU, rounding to integers and
    /// rejecting anything outside the representable range.
    pub fn from_real(values: Array3<f64>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        check_hu_range(values.iter().copied())?;
        let voxels = values.mapv(|v| v.round() as i16);
        Self::new(voxels, spacing, origin)
    }

    pub fn voxels(&self) -> &Array3<i16> {
        &self.voxels
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn shape(&self) -> [usize; 3] {
        let d = self.voxels.dim();
        [d.0, d.1, d.2]
    }

    pub fn to_f64(&self) -> Array3<f64> {
        self.voxels.mapv(f64::from)
    }

    pub fn patch(&self, origin: [usize; 3], side: usize) -> Result<Patch> {
        let shape = self.shape();
        for a in 0..3 {
            if origin[a] + side > shape[a] {
                return Err(Error::invalid(format!(
                    "patch at {origin:?} with side {side} crosses volume boundary {shape:?}"
                )));
            }
        }
        let [z, y, x] = origin;
        let voxels = self
            .voxels
            .slice(s![z..z + side, y..y + side, x..x + side])
            .to_owned();
        Patch::new(voxels, origin)
    }
}

fn check_hu_range(values: impl Iterator<Item = f64>) -> Result<()> {
    let (mut count, mut min, mut max) = (0usize, f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        if !(v >= HU_MIN as f64 - 0.5 && v < HU_MAX as f64 + 0.5) {
            count += 1;
        }
        min = min.min(v);
        max = max.max(v);
    }
    if count > 0 {
        return Err(Error::HuOutOfRange { count, min, max });
    }
    Ok(())
}

/// Intensity window for the affine HU <-> [-1, 1] map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HuWindow {
    pub lo: f64,
    pub hi: f64,
}

impl Default for HuWindow {
    fn default() -> Self {
        Self {
            lo: -1024.0,
            hi: 600.0,
        }
    }
}

impl HuWindow {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let w = Self { lo, hi };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::invalid(format!(
                "degenerate window ({}, {})",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    #[inline]
    pub fn normalize(&self, hu: f64) -> f64 {
        let v = 2.0 * (hu - self.lo) / (self.hi - self.lo) - 1.0;
        v.clamp(-1.0, 1.0)
    }

    #[inline]
    /// Snaps `hu` to the nearest of 256 evenly spaced window levels,
    /// rounded to integer HU.
    pub fn quantize_8bit(&self, hu: f64) -> f64 {
        let step = self.width() / 255.0;
        let level = ((hu.clamp(self.lo, self.hi) - self.lo) / step).round();
        (self.lo + level * step)
            .round()
            .clamp(HU_MIN as f64, HU_MAX as f64)
    }

    /// Normalized model input, optionally through the 8-bit quantizer.
    pub fn model_input(&self, hu: f64, eight_bit: bool) -> f64 {
        self.normalize(if eight_bit {
            self.quantize_8bit(hu)
        } else {
            hu
        })
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        self.lo + (v + 1.0) * 0.5 * (self.hi - self.lo)
    }
}

/// A volume mapped into [-1, 1] together with the window that produced it.
#[derive(Clone, Debug)]
pub struct NormalizedVolume {
    pub voxels: Array3<f64>,
    pub window: HuWindow,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

pub fn normalize_hu(v: &CtVolume, window: HuWindow) -> Result<NormalizedVolume> {
    window.validate()?;
    Ok(NormalizedVolume {
        voxels: v.voxels.mapv(|h| window.normalize(h as f64)),
        window,
        spacing: v.spacing,
        origin: v.origin,
    })
}

pub fn denormalize_hu(v: &NormalizedVolume) -> CtVolume {
    let w = v.window;
    let voxels = v.voxels.mapv(|x| {
        w.denormalize(x.clamp(-1.0, 1.0))
            .round()
            .clamp(HU_MIN as f64, HU_MAX as f64) as i16
    });
    CtVolume {
        voxels,
        spacing: v.spacing,
        origin: v.origin,
    }
}

/// Quantizes the window to 256 gray levels and maps back to integer HU,
/// modelling an 8-bit storage pipeline. Values outside the window are clipped.
pub fn quantize_8bit(v: &CtVolume, window: HuWindow) -> Result<CtVolume> {
    window.validate()?;
    let voxels = v.voxels.mapv(|h| window.quantize_8bit(h as f64) as i16);
    Ok(CtVolume {
        voxels,
        spacing: v.spacing,
        origin: v.origin,
    })
}

/// Cubic HU sub-volume with its origin in the parent volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    voxels: Array3<i16>,
    origin: [usize; 3],
}

impl Patch {
    pub fn new(voxels: Array3<i16>, origin: [usize; 3]) -> Result<Self> {
        let (a, b, c) = voxels.dim();
        if a != b || b != c || a == 0 {
            return Err(Error::shape(format!(
                "patch must be a non-empty cube, got {a}x{b}x{c}"
            )));
        }
        Ok(Self { voxels, origin })
    }

    pub fn voxels(&self) -> ArrayView3<'_, i16> {
        self.voxels.view()
    }

    pub fn origin(&self) -> [usize; 3] {
        self.origin
    }

    pub fn side(&self) -> usize {
        self.voxels.dim().0
    }

    pub fn mean_hu(&self) -> f64 {
        self.voxels.iter().map(|&v| v as f64).sum::<f64>() / self.voxels.len() as f64
    }

    /// Voxels in [-1, 1], flattened in (z, y, x) order.
    pub fn normalized(&self, window: HuWindow) -> Vec<f64> {
        self.voxels
            .iter()
            .map(|&h| window.normalize(h as f64))
            .collect()
    }
}

/// Samples `count` patches with uniformly drawn origins. When a mask is
/// given, only origins whose voxel lies inside the mask are eligible.
pub fn sample_patches(
    v: &CtVolume,
    side: usize,
    count: usize,
    seed: u64,
    lung_mask: Option<&Array3<bool>>,
) -> Result<Vec<Patch>> {
    let shape = v.shape();
    if side == 0 || shape.iter().any(|&d| side > d) {
        return Err(Error::invalid(format!(
            "patch side {side} exceeds volume dimensions {shape:?}"
        )));
    }
    let span = [
        shape[0] - side + 1,
        shape[1] - side + 1,
        shape[2] - side + 1,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let origins: Vec<[usize; 3]> = match lung_mask {
        None => (0..count)
            .map(|_| {
                [
                    rng.random_range(0..span[0]),
                    rng.random_range(0..span[1]),
                    rng.random_range(0..span[2]),
                ]
            })
            .collect(),
        Some(mask) => {
            let md = mask.dim();
            if [md.0, md.1, md.2] != shape {
                return Err(Error::shape(format!(
                    "lung mask {md:?} does not match volume {shape:?}"
                )));
            }
            let candidates: Vec<[usize; 3]> = ndarray::indices((span[0], span[1], span[2]))
                .into_iter()
                .map(|(z, y, x)| [z, y, x])
                .filter(|&[z, y, x]| mask[[z, y, x]])
                .collect();
            if candidates.is_empty() && count > 0 {
                return Err(Error::invalid("lung mask admits no patch origin"));
            }
            (0..count)
                .map(|_| candidates[rng.random_range(0..candidates.len())])
                .collect()
        }
    };
    origins.into_iter().map(|o| v.patch(o, side)).collect()
}

/// Origins of every grid-aligned patch that fits inside `shape`.
pub fn grid_origins(shape: [usize; 3], side: usize, stride: usize) -> Result<Vec<[usize; 3]>> {
    if stride == 0 {
        return Err(Error::invalid("grid stride must be >= 1"));
    }
    if side == 0 || shape.iter().any(|&d| d < side) {
        return Err(Error::invalid(format!(
            "volume {shape:?} is smaller than patch side {side}"
        )));
    }
    let axis = |d: usize| (0..=d - side).step_by(stride).collect::<Vec<_>>();
    let (zs, ys, xs) = (axis(shape[0]), axis(shape[1]), axis(shape[2]));
    let mut out = Vec::with_capacity(zs.len() * ys.len() * xs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                out.push([z, y, x]);
            }
        }
    }
    Ok(out)
}

/// Tissue classes. The discriminants are the on-disk label values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
#[derive(Default)]
pub enum PathologyLabel {
    #[default]
    Background = 0,
    Healthy = 1,
    #[serde(rename = "GGO")]
    Ggo = 2,
    Fibrosis = 3,
    Emphysema = 4,
}

impl PathologyLabel {
    pub const ALL: [PathologyLabel; 5] = [
        PathologyLabel::Background,
        PathologyLabel::Healthy,
        PathologyLabel::Ggo,
        PathologyLabel::Fibrosis,
        PathologyLabel::Emphysema,
    ];

    /// The four parenchymal classes that are scored.
    pub const TISSUE: [PathologyLabel; 4] = [
        PathologyLabel::Healthy,
        PathologyLabel::Ggo,
        PathologyLabel::Fibrosis,
        PathologyLabel::Emphysema,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            PathologyLabel::Background => "Background",
            PathologyLabel::Healthy => "Healthy",
            PathologyLabel::Ggo => "GGO",
            PathologyLabel::Fibrosis => "Fibrosis",
            PathologyLabel::Emphysema => "Emphysema",
        }
    }
}

impl std::fmt::Display for PathologyLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub type LabelVolume = Array3<PathologyLabel>;

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_volume(n: usize) -> CtVolume {
        let vox = Array3::from_shape_fn((n, n, n), |(z, y, x)| {
            (-1000 + (z * 7 + y * 3 + x) as i32) as i16
        });
        CtVolume::new(vox, [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn rejects_out_of_range_hu() {
        let vox = Array3::from_elem((2, 2, 2), -1100i16);
        assert!(matches!(
            CtVolume::new(vox, [1.0; 3], [0.0; 3]),
            Err(Error::HuOutOfRange { count: 8, .. })
        ));
        let vox = Array3::from_elem((2, 2, 2), 0i16);
        assert!(CtVolume::new(vox, [1.0, 0.0, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn window_endpoints_and_midpoint() {
        let w = HuWindow::default();
        assert_eq!(w.normalize(-1024.0), -1.0);
        assert_eq!(w.normalize(600.0), 1.0);
        assert_eq!(w.normalize(-212.0), 0.0);
        assert_eq!(w.denormalize(-1.0), -1024.0);
        assert_eq!(w.denormalize(1.0), 600.0);
        assert_eq!(w.denormalize(0.0), -212.0);
        assert!(HuWindow::new(10.0, 10.0).is_err());
        assert!(HuWindow::new(20.0, 10.0).is_err());
    }

    #[test]
    fn normalize_clips_and_roundtrips() {
        let vox = Array3::from_shape_vec((1, 1, 4), vec![-950i16, 1000, -1024, 600]).unwrap();
        let v = CtVolume::new(vox, [1.0; 3], [0.0; 3]).unwrap();
        let n = normalize_hu(&v, HuWindow::default()).unwrap();
        assert_eq!(n.voxels[[0, 0, 1]], 1.0);
        let back = denormalize_hu(&n);
        assert_eq!(back.voxels()[[0, 0, 0]], -950);
        assert_eq!(back.voxels()[[0, 0, 1]], 600);
    }

    #[test]
    fn roundtrip_every_integer_in_window() {
        let w = HuWindow::default();
        for h in -1024..=600 {
            assert_eq!(w.denormalize(w.normalize(h as f64)).round() as i32, h);
        }
    }

    #[test]
    fn eight_bit_quantization_uses_256_levels() {
        let vox = Array3::from_shape_fn((1, 1, 1625), |(_, _, x)| (x as i32 - 1024) as i16);
        let v = CtVolume::new(vox, [1.0; 3], [0.0; 3]).unwrap();
        let q = quantize_8bit(&v, HuWindow::default()).unwrap();
        let mut levels: Vec<i16> = q.voxels().iter().copied().collect();
        levels.dedup();
        assert_eq!(levels.len(), 256);
        assert!(q
            .voxels()
            .iter()
            .zip(v.voxels().iter())
            .all(|(a, b)| (a - b).abs() <= 4));
    }

    #[test]
    fn sampling_is_deterministic_and_in_bounds() {
        let v = ramp_volume(12);
        let a = sample_patches(&v, 5, 20, 7, None).unwrap();
        let b = sample_patches(&v, 5, 20, 7, None).unwrap();
        assert_eq!(
            a.iter().map(|p| p.origin()).collect::<Vec<_>>(),
            b.iter().map(|p| p.origin()).collect::<Vec<_>>()
        );
        for p in &a {
            assert!(p.origin().iter().all(|&o| o + 5 <= 12));
            assert_eq!(p.side(), 5);
        }
        assert!(sample_patches(&v, 5, 0, 7, None).unwrap().is_empty());
        assert!(sample_patches(&v, 13, 1, 7, None).is_err());
    }

    #[test]
    fn mask_restricts_origins_to_octant() {
        let v = ramp_volume(12);
        let mask = Array3::from_shape_fn((12, 12, 12), |(z, y, x)| z < 6 && y < 6 && x < 6);
        let patches = sample_patches(&v, 4, 200, 3, Some(&mask)).unwrap();
        assert_eq!(patches.len(), 200);
        for p in &patches {
            let o = p.origin();
            assert!(mask[[o[0], o[1], o[2]]], "origin {o:?} outside mask");
        }
    }

    #[test]
    fn grid_counts() {
        assert_eq!(grid_origins([64; 3], 32, 32).unwrap().len(), 8);
        assert_eq!(grid_origins([64; 3], 32, 16).unwrap().len(), 27);
        assert!(grid_origins([16; 3], 32, 16).is_err());
        assert!(grid_origins([64; 3], 32, 0).is_err());
    }

    #[test]
    fn label_layout() {
        assert_eq!(PathologyLabel::ALL.len(), 5);
        for (i, l) in PathologyLabel::ALL.iter().enumerate() {
            assert_eq!(l.index(), i);
            assert_eq!(PathologyLabel::from_index(i), Some(*l));
        }
    }
}
