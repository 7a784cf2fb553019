//! Cluster labelling, patch-to-voxel reconstruction and refinement.

use ndarray::{Array3, Zip};

use crate::error::{Error, Result};
use crate::filters::{gaussian_smooth, min_max_normalize, sobel_magnitude};
use crate::hu::HuThresholds;
use crate::volume::{CtVolume, LabelVolume, PathologyLabel};

pub const N_LABELS: usize = PathologyLabel::ALL.len();

/// One real-valued mask per label, indexed by `PathologyLabel::index`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMasks {
    pub masks: Vec<Array3<f64>>,
}

impl SoftMasks {
    pub fn get(&self, l: PathologyLabel) -> &Array3<f64> {
        &self.masks[l.index()]
    }
}

/// Maps each cluster to the label whose HU band holds the mean HU of its
/// member patches. Empty clusters become Background (with a warning) and
/// report `None` as their mean.
pub fn hu_label_assignment(
    k: usize,
    patch_hu_means: &[f64],
    hard_labels: &[usize],
    thresholds: &HuThresholds,
) -> Result<(Vec<PathologyLabel>, Vec<Option<f64>>)> {
    if patch_hu_means.len() != hard_labels.len() {
        return Err(Error::shape("one HU mean per labelled patch is required"));
    }
    let mut sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    for (&h, &l) in patch_hu_means.iter().zip(hard_labels) {
        if l >= k {
            return Err(Error::invalid(format!(
                "cluster index {l} out of range for K={k}"
            )));
        }
        sum[l] += h;
        count[l] += 1;
    }
    let mut labels = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    for c in 0..k {
        if count[c] == 0 {
            log::warn!("cluster {c} has no members; assigning Background");
            labels.push(PathologyLabel::Background);
            means.push(None);
            continue;
        }
        let m = sum[c] / count[c] as f64;
        labels.push(
            thresholds
                .label_for(m)
                .unwrap_or(PathologyLabel::Background),
        );
        means.push(Some(m));
    }
    Ok((labels, means))
}

/// Sums cluster responsibilities into per-label probabilities.
pub fn label_probabilities(
    resp: &[Vec<f64>],
    cluster_to_label: &[PathologyLabel],
) -> Vec<[f64; N_LABELS]> {
    resp.iter()
        .map(|r| {
            let mut p = [0.0; N_LABELS];
            for (c, &v) in r.iter().enumerate() {
                p[cluster_to_label[c].index()] += v;
            }
            p
        })
        .collect()
}

/// Splats each patch's label probabilities over its cubic footprint and
/// averages where footprints overlap. Uncovered voxels are Background.
pub fn build_soft_masks(
    probs: &[[f64; N_LABELS]],
    origins: &[[usize; 3]],
    shape: [usize; 3],
    side: usize,
) -> Result<SoftMasks> {
    if probs.len() != origins.len() {
        return Err(Error::shape("one origin per patch is required"));
    }
    let dim = (shape[0], shape[1], shape[2]);
    let mut acc: Vec<Array3<f64>> = (0..N_LABELS).map(|_| Array3::zeros(dim)).collect();
    let mut count = Array3::<f64>::zeros(dim);
    for (p, o) in probs.iter().zip(origins) {
        if (0..3).any(|a| o[a] + side > shape[a]) {
            return Err(Error::invalid(format!(
                "patch origin {o:?} with side {side} lies outside volume {shape:?}"
            )));
        }
        let sl = ndarray::s![o[0]..o[0] + side, o[1]..o[1] + side, o[2]..o[2] + side];
        count.slice_mut(sl).mapv_inplace(|c| c + 1.0);
        for (l, m) in acc.iter_mut().enumerate() {
            if p[l] != 0.0 {
                m.slice_mut(sl).mapv_inplace(|v| v + p[l]);
            }
        }
    }
    for (l, m) in acc.iter_mut().enumerate() {
        Zip::from(m).and(&count).for_each(|v, &c| {
            *v = if c > 0.0 {
                *v / c
            } else if l == PathologyLabel::Background.index() {
                1.0
            } else {
                0.0
            }
        });
    }
    Ok(SoftMasks { masks: acc })
}

/// `M * (1 + alpha * G_sigma(S(x0) * S(M)))` with both gradient magnitudes
/// rescaled to [0, 1]. `edges` is the normalized `S(x0)`.
pub fn sobel_fusion_with_edges(
    mask: &Array3<f64>,
    edges: &Array3<f64>,
    alpha: f64,
    sigma: f64,
) -> Result<Array3<f64>> {
    if mask.dim() != edges.dim() {
        return Err(Error::shape(format!(
            "mask {:?} vs image {:?}",
            mask.dim(),
            edges.dim()
        )));
    }
    if alpha == 0.0 {
        return Ok(mask.clone());
    }
    let mut prod = min_max_normalize(&sobel_magnitude(mask));
    prod.zip_mut_with(edges, |p, e| *p *= e);
    let g = gaussian_smooth(&prod, sigma);
    let mut out = mask.clone();
    out.zip_mut_with(&g, |m, gv| *m *= 1.0 + alpha * gv);
    Ok(out)
}

pub fn image_edges(x0: &CtVolume) -> Array3<f64> {
    min_max_normalize(&sobel_magnitude(&x0.to_f64()))
}

pub fn sobel_fusion(
    mask: &Array3<f64>,
    x0: &CtVolume,
    alpha: f64,
    sigma: f64,
) -> Result<Array3<f64>> {
    sobel_fusion_with_edges(mask, &image_edges(x0), alpha, sigma)
}

pub fn sobel_fusion_all(
    masks: &SoftMasks,
    x0: &CtVolume,
    alpha: f64,
    sigma: f64,
) -> Result<SoftMasks> {
    let edges = image_edges(x0);
    Ok(SoftMasks {
        masks: masks
            .masks
            .iter()
            .map(|m| sobel_fusion_with_edges(m, &edges, alpha, sigma))
            .collect::<Result<_>>()?,
    })
}

/// Voxelwise argmax; ties go to the earlier label index.
pub fn argmax_labels(masks: &SoftMasks) -> LabelVolume {
    let dim = masks.masks[0].raw_dim();
    let mut out = LabelVolume::from_elem(dim, PathologyLabel::Background);
    let mut best = masks.masks[0].clone();
    for (l, m) in masks.masks.iter().enumerate().skip(1) {
        Zip::from(&mut out)
            .and(&mut best)
            .and(m)
            .for_each(|o, b, &v| {
                if v > *b {
                    *b = v;
                    *o = PathologyLabel::ALL[l];
                }
            });
    }
    out
}

/// Relabels voxels whose HU falls outside their class band widened by
/// `margin` to the class whose band holds their HU (Background if none).
pub fn hu_compatibility_filter(
    labels: &LabelVolume,
    x0: &CtVolume,
    thresholds: &HuThresholds,
    margin: f64,
) -> Result<LabelVolume> {
    if labels.dim() != x0.voxels().dim() {
        return Err(Error::shape(format!(
            "labels {:?} vs volume {:?}",
            labels.dim(),
            x0.voxels().dim()
        )));
    }
    let mut out = labels.clone();
    Zip::from(&mut out).and(x0.voxels()).for_each(|l, &h| {
        let hu = h as f64;
        if !thresholds.contains(*l, hu, margin) {
            *l = thresholds
                .label_for(hu)
                .unwrap_or(PathologyLabel::Background);
        }
    });
    Ok(out)
}
