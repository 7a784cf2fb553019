//! Separable 3D filters with replicated borders.

use ndarray::{Array3, Axis};

/// Normalized 1D Gaussian taps truncated at 3 sigma.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Correlates `a` with centred `taps` along one axis, clamping indices at
/// the borders.
pub fn convolve_axis(a: &Array3<f64>, taps: &[f64], axis: usize) -> Array3<f64> {
    let n = a.len_of(Axis(axis)) as isize;
    let r = (taps.len() / 2) as isize;
    let mut out = Array3::zeros(a.raw_dim());
    for (mut o, i) in out
        .lanes_mut(Axis(axis))
        .into_iter()
        .zip(a.lanes(Axis(axis)))
    {
        for k in 0..n {
            let mut acc = 0.0;
            for (t, &w) in taps.iter().enumerate() {
                let j = (k + t as isize - r).clamp(0, n - 1);
                acc += w * i[j as usize];
            }
            o[k as usize] = acc;
        }
    }
    out
}

pub fn gaussian_smooth(a: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let taps = gaussian_kernel(sigma);
    let mut out = a.clone();
    for axis in 0..3 {
        out = convolve_axis(&out, &taps, axis);
    }
    out
}

/// 3D Sobel gradient magnitude in voxel units.
pub fn sobel_magnitude(a: &Array3<f64>) -> Array3<f64> {
    const DERIV: [f64; 3] = [-1.0, 0.0, 1.0];
    const SMOOTH: [f64; 3] = [1.0, 2.0, 1.0];
    let mut mag = Array3::<f64>::zeros(a.raw_dim());
    for d in 0..3 {
        let mut g = a.clone();
        for axis in 0..3 {
            let taps = if axis == d { &DERIV } else { &SMOOTH };
            g = convolve_axis(&g, taps, axis);
        }
        mag.zip_mut_with(&g, |m, v| *m += v * v);
    }
    mag.mapv_inplace(f64::sqrt);
    mag
}

/// Rescales to [0, 1]; a constant input maps to all zeros.
pub fn min_max_normalize(a: &Array3<f64>) -> Array3<f64> {
    let (lo, hi) = a
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    if !(hi > lo) {
        return Array3::zeros(a.raw_dim());
    }
    a.mapv(|v| (v - lo) / (hi - lo))
}
