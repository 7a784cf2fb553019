//! Segmentation overlap/boundary metrics and generation fidelity metrics.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{HuWindow, LabelVolume, PathologyLabel};

fn same_shape<A, B>(a: ArrayView3<'_, A>, b: ArrayView3<'_, B>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Dice overlap `2|P∩G| / (|P|+|G|)`; two empty masks score 1.
pub fn dice(pred: ArrayView3<'_, bool>, gt: ArrayView3<'_, bool>) -> Result<f64> {
    same_shape(pred, gt)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Voxels of `mask` with at least one background face neighbour. Positions
/// outside the array count as background. `planar` restricts the
/// neighbourhood to the (y, x) plane.
pub fn surface(mask: ArrayView3<'_, bool>, planar: bool) -> Array3<bool> {
    let (d, h, w) = mask.dim();
    let dims = [d as isize, h as isize, w as isize];
    let offsets: &[[isize; 3]] = if planar {
        &[[0, 0, 1], [0, 0, -1], [0, 1, 0], [0, -1, 0]]
    } else {
        &[
            [0, 0, 1],
            [0, 0, -1],
            [0, 1, 0],
            [0, -1, 0],
            [1, 0, 0],
            [-1, 0, 0],
        ]
    };
    Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        if !mask[[z, y, x]] {
            return false;
        }
        offsets.iter().any(|o| {
            let p = [z as isize + o[0], y as isize + o[1], x as isize + o[2]];
            if (0..3).any(|k| p[k] < 0 || p[k] >= dims[k]) {
                return true;
            }
            !mask[[p[0] as usize, p[1] as usize, p[2] as usize]]
        })
    })
}

/// Physical length of a voxel displacement.
#[inline]
pub fn voxel_distance(d: [isize; 3], spacing: [f64; 3]) -> f64 {
    let a = d[0] as f64 * spacing[0];
    let b = d[1] as f64 * spacing[1];
    let c = d[2] as f64 * spacing[2];
    (a * a + b * b + c * c).sqrt()
}

/// Lower-envelope pass over one line. `f[q]` is the cost so far (infinite
/// where no site is reachable); writes the minimizing `q` per position.
fn envelope_1d(f: &[f64], weight: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, arg: &mut [usize]) {
    v.clear();
    z.clear();
    let n = f.len();
    let key = |q: usize| f[q] + weight * (q * q) as f64;
    for q in (0..n).filter(|&q| f[q].is_finite()) {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&r) => {
                    let s = (key(q) - key(r)) / (2.0 * weight * (q - r) as f64);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        arg.fill(usize::MAX);
        return;
    }
    let mut k = 0;
    for (p, a) in arg.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        *a = v[k];
    }
}

/// Nearest-site transform: for each voxel, the flat index of the nearest
/// `true` voxel of `sites` under the anisotropic Euclidean metric (or
/// `usize::MAX` when there are no sites). Separable exact algorithm, one
/// lower-envelope pass per axis. `planar` skips the z pass.
pub fn nearest_site(sites: ArrayView3<'_, bool>, spacing: [f64; 3], planar: bool) -> Array3<usize> {
    let (d, h, w) = sites.dim();
    let dims = [d, h, w];
    let strides = [h * w, w, 1];
    // Weights relative to the finest axis so isotropic grids run on exact
    // integer costs.
    let unit = spacing.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let weights = spacing.map(|s| (s / unit) * (s / unit));
    let mut feat = Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        if sites[[z, y, x]] {
            (z * h + y) * w + x
        } else {
            usize::MAX
        }
    });
    let flat = |i: usize| [i / (h * w), (i / w) % h, i % w];
    let cost_of = |fi: usize, pos: [usize; 3], axis_done: usize| -> f64 {
        if fi == usize::MAX {
            return f64::INFINITY;
        }
        let q = flat(fi);
        (0..3)
            .filter(|&a| a != axis_done)
            .map(|a| {
                let dd = q[a] as f64 - pos[a] as f64;
                weights[a] * dd * dd
            })
            .sum()
    };
    let axes: &[usize] = if planar { &[2, 1] } else { &[2, 1, 0] };
    let (mut v, mut zb) = (Vec::new(), Vec::new());
    let data = feat.as_slice_mut().expect("standard layout");
    for &axis in axes {
        let n = dims[axis];
        let mut f = vec![0.0; n];
        let mut arg = vec![0usize; n];
        let mut line_feat = vec![0usize; n];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..dims[others[0]] {
            for j in 0..dims[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for q in 0..n {
                    let idx = base + q * strides[axis];
                    line_feat[q] = data[idx];
                    let mut pos = [0usize; 3];
                    pos[others[0]] = i;
                    pos[others[1]] = j;
                    pos[axis] = q;
                    // Cost of the site already reached at q, excluding the
                    // component along this axis (added by the envelope).
                    f[q] = cost_of(line_feat[q], pos, axis);
                    if line_feat[q] != usize::MAX {
                        let qa = flat(line_feat[q])[axis];
                        debug_assert_eq!(qa, q, "site lies on the current line");
                    }
                }
                envelope_1d(&f, weights[axis], &mut v, &mut zb, &mut arg);
                for p in 0..n {
                    data[base + p * strides[axis]] = if arg[p] == usize::MAX {
                        usize::MAX
                    } else {
                        line_feat[arg[p]]
                    };
                }
            }
        }
    }
    feat
}

/// Linear-interpolation percentile (`q` in [0, 100]) of unsorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let pos = q / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

/// Directed distances from every surface voxel of `from` to the nearest
/// surface voxel of `to`.
fn directed_surface_distances(
    from_surf: ArrayView3<'_, bool>,
    to_surf: ArrayView3<'_, bool>,
    spacing: [f64; 3],
    planar: bool,
) -> Vec<f64> {
    let (_, h, w) = from_surf.dim();
    let near = nearest_site(to_surf, spacing, planar);
    from_surf
        .indexed_iter()
        .filter(|(_, &s)| s)
        .map(|((z, y, x), _)| {
            let t = near[[z, y, x]];
            let (tz, ty, tx) = (t / (h * w), (t / w) % h, t % w);
            voxel_distance(
                [
                    tz as isize - z as isize,
                    ty as isize - y as isize,
                    tx as isize - x as isize,
                ],
                spacing,
            )
        })
        .collect()
}

fn hd95_impl(
    pred: ArrayView3<'_, bool>,
    gt: ArrayView3<'_, bool>,
    spacing: [f64; 3],
    planar: bool,
) -> Result<f64> {
    same_shape(pred, gt)?;
    if !pred.iter().any(|&v| v) {
        return Err(Error::UndefinedHd95("prediction"));
    }
    if !gt.iter().any(|&v| v) {
        return Err(Error::UndefinedHd95("ground-truth"));
    }
    let sp = surface(pred, planar);
    let sg = surface(gt, planar);
    let mut all = directed_surface_distances(sp.view(), sg.view(), spacing, planar);
    all.extend(directed_surface_distances(
        sg.view(),
        sp.view(),
        spacing,
        planar,
    ));
    Ok(percentile(&mut all, 95.0))
}

/// 95th percentile of the symmetric surface-distance set, in the units of
/// `spacing` (z, y, x).
pub fn hd95(
    pred: ArrayView3<'_, bool>,
    gt: ArrayView3<'_, bool>,
    spacing: [f64; 3],
) -> Result<f64> {
    hd95_impl(pred, gt, spacing, false)
}

/// [`hd95`] on a single axial slice with in-plane surfaces and distances.
pub fn hd95_2d(
    pred: ArrayView2<'_, bool>,
    gt: ArrayView2<'_, bool>,
    spacing_yx: [f64; 2],
) -> Result<f64> {
    hd95_impl(
        pred.insert_axis(Axis(0)),
        gt.insert_axis(Axis(0)),
        [1.0, spacing_yx[0], spacing_yx[1]],
        true,
    )
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window(len: usize, sigma: f64) -> Vec<f64> {
    let c = (len as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..len)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of a 2D image.
fn filter_valid(img: &Array2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = g.len();
    let rows = Array2::from_shape_fn((h, w + 1 - k), |(y, x)| {
        (0..k).map(|i| g[i] * img[[y, x + i]]).sum::<f64>()
    });
    Array2::from_shape_fn((h + 1 - k, w + 1 - k), |(y, x)| {
        (0..k).map(|i| g[i] * rows[[y + i, x]]).sum::<f64>()
    })
}

/// Mean SSIM of one 2D slice pair. The Gaussian window shrinks to the
/// largest odd size that fits slices smaller than 11 pixels.
pub fn ssim_2d(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, data_range: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let (h, w) = a.dim();
    let mut k = SSIM_WINDOW.min(h).min(w);
    if k % 2 == 0 {
        k -= 1;
    }
    if k == 0 {
        return Err(Error::invalid("empty slice"));
    }
    let g = gaussian_window(k, SSIM_SIGMA);
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let (a, b) = (a.to_owned(), b.to_owned());
    let mu_a = filter_valid(&a, &g);
    let mu_b = filter_valid(&b, &g);
    let aa = filter_valid(&(&a * &a), &g);
    let bb = filter_valid(&(&b * &b), &g);
    let ab = filter_valid(&(&a * &b), &g);
    let mut total = 0.0;
    for (((&ma, &mb), (&saa, &sbb)), &sab) in
        mu_a.iter().zip(&mu_b).zip(aa.iter().zip(&bb)).zip(&ab)
    {
        let var_a = saa - ma * ma;
        let var_b = sbb - mb * mb;
        let cov = sab - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// SSIM averaged over axial slices.
pub fn ssim(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>, data_range: f64) -> Result<f64> {
    same_shape(a, b)?;
    let d = a.dim().0;
    if d == 0 {
        return Err(Error::invalid("empty volume"));
    }
    let mut total = 0.0;
    for z in 0..d {
        total += ssim_2d(
            a.index_axis(Axis(0), z),
            b.index_axis(Axis(0), z),
            data_range,
        )?;
    }
    Ok(total / d as f64)
}

/// Peak signal-to-noise ratio in dB; identical inputs give `+inf`.
pub fn psnr(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>, data_range: f64) -> Result<f64> {
    same_shape(a, b)?;
    if a.is_empty() {
        return Err(Error::invalid("empty volume"));
    }
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Shrinkage weight toward a scaled identity, applied when a feature set has
/// no more rows than columns.
pub const FRECHET_SHRINKAGE: f64 = 0.1;

/// Sample mean and unbiased covariance of the rows of `f`.
pub fn feature_stats(f: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = f.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 feature rows, got {n}"
        )));
    }
    let d = f[0].len();
    if d == 0 || f.iter().any(|r| r.len() != d) {
        return Err(Error::shape("ragged or empty feature rows"));
    }
    let mut mean = DVector::zeros(d);
    for r in f {
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in f {
        let c = DVector::from_column_slice(r) - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (n - 1) as f64;
    if n <= d {
        let scale = cov.trace() / d as f64;
        cov *= 1.0 - FRECHET_SHRINKAGE;
        for i in 0..d {
            cov[(i, i)] += FRECHET_SHRINKAGE * scale;
        }
    }
    Ok((mean, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians. The cross term is computed as
/// `tr((A S2 A)^1/2)` with `A = S1^1/2`, which keeps the square root on a
/// symmetric matrix. Clamped at zero.
pub fn frechet_from_stats(
    mu1: &DVector<f64>,
    s1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    s2: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(Error::shape(format!("feature dims {} vs {}", d, mu2.len())));
    }
    let a = psd_sqrt(s1);
    let m = &a * s2 * &a;
    let m = (&m + m.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let diff = mu1 - mu2;
    Ok((diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * cross).max(0.0))
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn frechet_proxy(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64> {
    let (m1, s1) = feature_stats(real)?;
    let (m2, s2) = feature_stats(generated)?;
    if m1.len() != m2.len() {
        return Err(Error::shape(format!(
            "feature dims {} vs {}",
            m1.len(),
            m2.len()
        )));
    }
    frechet_from_stats(&m1, &s1, &m2, &s2)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// 3D overlap and 6-neighbour surfaces over the whole volume.
    #[default]
    Volumetric,
    /// Per axial slice with in-plane surfaces, averaged over slices.
    Slicewise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: PathologyLabel,
    pub dice: f64,
    /// `None` when prediction or ground truth has no voxel of the class.
    pub hd95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: EvalMode,
    pub classes: Vec<ClassMetrics>,
    pub mean_dice: f64,
    pub mean_hd95: Option<f64>,
    pub ssim: Option<f64>,
    #[serde(with = "nonfinite")]
    pub psnr: Option<f64>,
    pub frechet_proxy: Option<f64>,
    /// Intensity range used for SSIM/PSNR (the HU window width).
    pub data_range: f64,
    pub config_hash: String,
}

/// JSON has no infinity, so non-finite values are written as strings.
pub mod nonfinite {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if x.is_finite() => s.serialize_some(&Repr::Num(*x)),
            Some(x) if x.is_nan() => s.serialize_some(&Repr::Text("nan".into())),
            Some(x) => s.serialize_some(&Repr::Text(if *x > 0.0 { "inf" } else { "-inf" }.into())),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(match Option::<Repr>::deserialize(d)? {
            None => None,
            Some(Repr::Num(x)) => Some(x),
            Some(Repr::Text(t)) => Some(match t.as_str() {
                "inf" => f64::INFINITY,
                "-inf" => f64::NEG_INFINITY,
                _ => f64::NAN,
            }),
        })
    }
}

fn class_mask(labels: &LabelVolume, c: PathologyLabel) -> Array3<bool> {
    labels.mapv(|l| l == c)
}

/// Per-class DSC and HD95 over the four tissue classes.
pub fn segmentation_metrics(
    pred: &LabelVolume,
    gt: &LabelVolume,
    spacing: [f64; 3],
    mode: EvalMode,
) -> Result<Vec<ClassMetrics>> {
    same_shape(pred.view(), gt.view())?;
    let mut out = Vec::with_capacity(4);
    for c in PathologyLabel::TISSUE {
        let p = class_mask(pred, c);
        let g = class_mask(gt, c);
        let m = match mode {
            EvalMode::Volumetric => ClassMetrics {
                label: c,
                dice: dice(p.view(), g.view())?,
                hd95: defined(hd95(p.view(), g.view(), spacing))?,
            },
            EvalMode::Slicewise => {
                // Slices where the class appears in either mask.
                let (mut dsum, mut dn, mut hsum, mut hn) = (0.0, 0usize, 0.0, 0usize);
                for z in 0..p.dim().0 {
                    let ps = p.slice(s![z..z + 1, .., ..]);
                    let gs = g.slice(s![z..z + 1, .., ..]);
                    if !ps.iter().chain(gs.iter()).any(|&v| v) {
                        continue;
                    }
                    dsum += dice(ps, gs)?;
                    dn += 1;
                    if let Some(h) = defined(hd95_2d(
                        ps.index_axis(Axis(0), 0),
                        gs.index_axis(Axis(0), 0),
                        [spacing[1], spacing[2]],
                    ))? {
                        hsum += h;
                        hn += 1;
                    }
                }
                ClassMetrics {
                    label: c,
                    dice: if dn == 0 { 1.0 } else { dsum / dn as f64 },
                    hd95: (hn > 0).then(|| hsum / hn as f64),
                }
            }
        };
        out.push(m);
    }
    Ok(out)
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedHd95(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Fidelity inputs for a report; volumes are clamped to the window first.
pub struct Fidelity<'a> {
    pub real: ArrayView3<'a, f64>,
    pub generated: ArrayView3<'a, f64>,
    pub real_features: Option<&'a [Vec<f64>]>,
    pub generated_features: Option<&'a [Vec<f64>]>,
}

pub fn metric_report(
    pred: &LabelVolume,
    gt: &LabelVolume,
    spacing: [f64; 3],
    mode: EvalMode,
    window: HuWindow,
    fidelity: Option<Fidelity<'_>>,
    config_hash: &str,
) -> Result<MetricReport> {
    let classes = segmentation_metrics(pred, gt, spacing, mode)?;
    let mean_dice = classes.iter().map(|c| c.dice).sum::<f64>() / classes.len() as f64;
    let hs: Vec<f64> = classes.iter().filter_map(|c| c.hd95).collect();
    let mean_hd95 = (!hs.is_empty()).then(|| hs.iter().sum::<f64>() / hs.len() as f64);
    let data_range = window.width();
    let (mut ssim_v, mut psnr_v, mut fr) = (None, None, None);
    if let Some(f) = fidelity {
        let clamp = |v: ArrayView3<'_, f64>| v.mapv(|x| x.clamp(window.lo, window.hi));
        let (a, b) = (clamp(f.real), clamp(f.generated));
        ssim_v = Some(ssim(a.view(), b.view(), data_range)?);
        psnr_v = Some(psnr(a.view(), b.view(), data_range)?);
        if let (Some(r), Some(g)) = (f.real_features, f.generated_features) {
            fr = Some(frechet_proxy(r, g)?);
        }
    }
    Ok(MetricReport {
        mode,
        classes,
        mean_dice,
        mean_hd95,
        ssim: ssim_v,
        psnr: psnr_v,
        frechet_proxy: fr,
        data_range,
        config_hash: config_hash.to_string(),
    })
}

pub fn save_report(path: &Path, r: &MetricReport) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(r)?)?;
    Ok(())
}

/// Column order of the per-method segmentation table.
pub const TABLE_COLUMNS: [&str; 7] = [
    "method",
    "Healthy",
    "GGO",
    "Fibrosis",
    "Emph.",
    "HD95",
    "config_hash",
];

/// Writes one row per method: DSC in percent for each tissue class, then
/// the mean HD95 in mm and the report's config hash. Undefined HD95 is
/// left blank.
pub fn write_table_csv(path: &Path, rows: &[(String, MetricReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TABLE_COLUMNS)?;
    for (name, r) in rows {
        let mut rec = vec![name.clone()];
        for c in [
            PathologyLabel::Healthy,
            PathologyLabel::Ggo,
            PathologyLabel::Fibrosis,
            PathologyLabel::Emphysema,
        ] {
            let d = r.classes.iter().find(|m| m.label == c).map(|m| m.dice);
            rec.push(d.map(|d| format!("{:.1}", 100.0 * d)).unwrap_or_default());
        }
        rec.push(r.mean_hd95.map(|h| format!("{h:.2}")).unwrap_or_default());
        rec.push(r.config_hash.clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
