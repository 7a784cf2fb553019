//! A small Gabor bank evaluated on the central axial slice.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView3};

pub const GABOR_FREQUENCIES: [f64; 2] = [0.1, 0.2];
pub const GABOR_ORIENTATIONS_DEG: [f64; 4] = [0.0, 45.0, 90.0, 135.0];

/// Complex Gabor kernel with zero-mean real and imaginary parts, scaled by
/// the envelope sum. Sigma gives roughly a one-octave bandwidth.
#[derive(Clone, Debug)]
pub struct GaborKernel {
    pub re: Array2<f64>,
    pub im: Array2<f64>,
}

impl GaborKernel {
    pub fn new(frequency: f64, theta_deg: f64) -> Self {
        let sigma = 0.562 / frequency;
        let r = (3.0 * sigma).ceil() as isize;
        let side = (2 * r + 1) as usize;
        let (s, c) = theta_deg.to_radians().sin_cos();
        let mut env = Array2::zeros((side, side));
        let mut re = Array2::zeros((side, side));
        let mut im = Array2::zeros((side, side));
        for iy in 0..side {
            for ix in 0..side {
                let (y, x) = (iy as f64 - r as f64, ix as f64 - r as f64);
                let g = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
                let phase = 2.0 * PI * frequency * (x * c + y * s);
                env[[iy, ix]] = g;
                re[[iy, ix]] = g * phase.cos();
                im[[iy, ix]] = g * phase.sin();
            }
        }
        let norm = env.sum();
        let n = (side * side) as f64;
        let (mr, mi) = (re.sum() / n, im.sum() / n);
        re.mapv_inplace(|v| (v - mr) / norm);
        im.mapv_inplace(|v| (v - mi) / norm);
        Self { re, im }
    }

    /// Mean response magnitude over `img`, replicating border pixels.
    pub fn mean_magnitude(&self, img: &Array2<f64>) -> f64 {
        let (h, w) = img.dim();
        let r = (self.re.nrows() / 2) as isize;
        let mut total = 0.0;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (mut a, mut b) = (0.0, 0.0);
                for ky in -r..=r {
                    let yy = (y + ky).clamp(0, h as isize - 1) as usize;
                    for kx in -r..=r {
                        let xx = (x + kx).clamp(0, w as isize - 1) as usize;
                        let v = img[[yy, xx]];
                        let k = [(ky + r) as usize, (kx + r) as usize];
                        a += v * self.re[k];
                        b += v * self.im[k];
                    }
                }
                total += a.hypot(b);
            }
        }
        total / (h * w) as f64
    }
}

/// The 8-filter bank, frequency-major.
pub fn gabor_bank() -> Vec<GaborKernel> {
    GABOR_FREQUENCIES
        .iter()
        .flat_map(|&f| {
            GABOR_ORIENTATIONS_DEG
                .iter()
                .map(move |&t| GaborKernel::new(f, t))
        })
        .collect()
}

pub fn central_slice(voxels: ArrayView3<'_, i16>) -> Array2<f64> {
    let z = voxels.dim().0 / 2;
    voxels.index_axis(ndarray::Axis(0), z).mapv(|v| v as f64)
}

pub fn gabor_features_with(voxels: ArrayView3<'_, i16>, bank: &[GaborKernel]) -> [f64; 8] {
    let img = central_slice(voxels);
    let mut out = [0.0; 8];
    for (o, k) in out.iter_mut().zip(bank) {
        *o = k.mean_magnitude(&img);
    }
    out
}

pub fn gabor_features(voxels: ArrayView3<'_, i16>) -> [f64; 8] {
    gabor_features_with(voxels, &gabor_bank())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn kernels_are_zero_mean() {
        for k in gabor_bank() {
            assert!(k.re.sum().abs() < 1e-12);
            assert!(k.im.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn constant_patch_has_no_response() {
        let v = Array3::from_elem((8, 8, 8), -700i16);
        assert!(gabor_features(v.view()).iter().all(|r| r.abs() < 1e-6));
    }
}
