//! Gray-level co-occurrence matrices and the 14 Haralick descriptors.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array3, ArrayView3};

pub const GLCM_LEVELS: usize = 32;

/// Unit offsets along x, y and z.
pub const AXIS_OFFSETS: [[isize; 3]; 3] = [[0, 0, 1], [0, 1, 0], [1, 0, 0]];

pub const HARALICK_NAMES: [&str; 14] = [
    "asm",
    "contrast",
    "correlation",
    "sum_squares_variance",
    "inverse_difference_moment",
    "sum_average",
    "sum_variance",
    "sum_entropy",
    "entropy",
    "difference_variance",
    "difference_entropy",
    "info_correlation_1",
    "info_correlation_2",
    "max_correlation_coefficient",
];

/// Quantizes to `levels` bins spanning the patch's own min..max. Integer
/// arithmetic keeps this exactly invariant to a global HU shift.
pub fn quantize(voxels: ArrayView3<'_, i16>, levels: usize) -> Array3<usize> {
    let (min, max) = voxels.iter().fold((i64::MAX, i64::MIN), |(lo, hi), &v| {
        (lo.min(v as i64), hi.max(v as i64))
    });
    let range = max - min;
    if range <= 0 {
        return Array3::zeros(voxels.raw_dim());
    }
    voxels.mapv(|v| (((v as i64 - min) * levels as i64 / range) as usize).min(levels - 1))
}

/// Symmetrized, normalized co-occurrence matrix (row-major `levels x levels`)
/// for one offset. `None` when the offset admits no voxel pair.
pub fn cooccurrence(q: &Array3<usize>, levels: usize, offset: [isize; 3]) -> Option<Vec<f64>> {
    let (d, h, w) = q.dim();
    let dims = [d as isize, h as isize, w as isize];
    let mut counts = vec![0u64; levels * levels];
    let mut pairs = 0u64;
    for ((z, y, x), &a) in q.indexed_iter() {
        let p = [
            z as isize + offset[0],
            y as isize + offset[1],
            x as isize + offset[2],
        ];
        if (0..3).any(|k| p[k] < 0 || p[k] >= dims[k]) {
            continue;
        }
        let b = q[[p[0] as usize, p[1] as usize, p[2] as usize]];
        counts[a * levels + b] += 1;
        counts[b * levels + a] += 1;
        pairs += 2;
    }
    if pairs == 0 {
        return None;
    }
    Some(
        counts
            .into_iter()
            .map(|c| c as f64 / pairs as f64)
            .collect(),
    )
}

fn entropy(p: impl IntoIterator<Item = f64>) -> f64 {
    p.into_iter()
        .filter(|&v| v > 0.0)
        .map(|v| -v * v.ln())
        .sum()
}

/// Haralick descriptors of a normalized symmetric co-occurrence matrix.
/// Undefined correlation-type terms (zero marginal variance) are 0.
pub fn haralick(p: &[f64], levels: usize) -> [f64; 14] {
    let n = levels;
    let at = |i: usize, j: usize| p[i * n + j];
    let px: Vec<f64> = (0..n).map(|i| (0..n).map(|j| at(i, j)).sum()).collect();
    let py: Vec<f64> = (0..n).map(|j| (0..n).map(|i| at(i, j)).sum()).collect();
    let mu_x: f64 = (0..n).map(|i| i as f64 * px[i]).sum();
    let mu_y: f64 = (0..n).map(|j| j as f64 * py[j]).sum();
    let var_x: f64 = (0..n).map(|i| (i as f64 - mu_x).powi(2) * px[i]).sum();
    let var_y: f64 = (0..n).map(|j| (j as f64 - mu_y).powi(2) * py[j]).sum();

    let mut p_sum = vec![0.0; 2 * n - 1];
    let mut p_diff = vec![0.0; n];
    let (mut asm, mut contrast, mut cov, mut idm) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let v = at(i, j);
            if v == 0.0 {
                continue;
            }
            let d = i as f64 - j as f64;
            asm += v * v;
            contrast += d * d * v;
            cov += (i as f64 - mu_x) * (j as f64 - mu_y) * v;
            idm += v / (1.0 + d * d);
            p_sum[i + j] += v;
            p_diff[i.abs_diff(j)] += v;
        }
    }
    let correlation = if var_x * var_y > 1e-30 {
        cov / (var_x * var_y).sqrt()
    } else {
        0.0
    };
    let sum_average: f64 = p_sum.iter().enumerate().map(|(k, &v)| k as f64 * v).sum();
    let sum_variance: f64 = p_sum
        .iter()
        .enumerate()
        .map(|(k, &v)| (k as f64 - sum_average).powi(2) * v)
        .sum();
    let sum_entropy = entropy(p_sum.iter().copied());
    let hxy = entropy(p.iter().copied());
    let diff_mean: f64 = p_diff.iter().enumerate().map(|(k, &v)| k as f64 * v).sum();
    let diff_variance: f64 = p_diff
        .iter()
        .enumerate()
        .map(|(k, &v)| (k as f64 - diff_mean).powi(2) * v)
        .sum();
    let diff_entropy = entropy(p_diff.iter().copied());

    let hx = entropy(px.iter().copied());
    let hy = entropy(py.iter().copied());
    let (mut hxy1, mut hxy2) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let m = px[i] * py[j];
            if m > 0.0 {
                hxy1 -= at(i, j) * m.ln();
                hxy2 -= m * m.ln();
            }
        }
    }
    let hmax = hx.max(hy);
    let imc1 = if hmax > 0.0 { (hxy - hxy1) / hmax } else { 0.0 };
    let imc2 = (1.0 - (-2.0 * (hxy2 - hxy)).exp()).max(0.0).sqrt();
    let mcc = max_correlation_coefficient(p, &px, n);

    [
        asm,
        contrast,
        correlation,
        var_x,
        idm,
        sum_average,
        sum_variance,
        sum_entropy,
        hxy,
        diff_variance,
        diff_entropy,
        imc1,
        imc2,
        mcc,
    ]
}

/// Square root of the second-largest eigenvalue of
/// `Q(i,j) = sum_k p(i,k) p(j,k) / (px(i) px(k))`. For a symmetric matrix
/// `Q = A^2` with `A = D^-1/2 P D^-1/2`, so this is the second-largest
/// `|eigenvalue|` of `A`.
fn max_correlation_coefficient(p: &[f64], px: &[f64], n: usize) -> f64 {
    let support: Vec<usize> = (0..n).filter(|&i| px[i] > 0.0).collect();
    let m = support.len();
    if m < 2 {
        return 0.0;
    }
    let a = DMatrix::from_fn(m, m, |r, c| {
        let (i, j) = (support[r], support[c]);
        p[i * n + j] / (px[i] * px[j]).sqrt()
    });
    let mut ev: Vec<f64> = SymmetricEigen::new(a)
        .eigenvalues
        .iter()
        .map(|v| v.abs())
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev[1].min(1.0)
}

/// Haralick features averaged over the offsets that admit at least one pair.
pub fn glcm_features(
    voxels: ArrayView3<'_, i16>,
    levels: usize,
    offsets: &[[isize; 3]],
) -> [f64; 14] {
    let q = quantize(voxels, levels);
    let mut acc = [0.0; 14];
    let mut used = 0usize;
    for &off in offsets {
        if let Some(p) = cooccurrence(&q, levels, off) {
            for (a, f) in acc.iter_mut().zip(haralick(&p, levels)) {
                *a += f;
            }
            used += 1;
        }
    }
    if used > 0 {
        acc.iter_mut().for_each(|a| *a /= used as f64);
    }
    acc
}
