//! Unsupervised segmentation: clustering, HU labelling and refinement.

pub mod gmm;
pub mod kmeans;
pub mod masks;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use gmm::{assign_clusters, fit_gmm, fit_gmm_from_labels, GmmConfig, GmmModel};
pub use kmeans::{kmeans, KMeansResult};
pub use masks::{
    argmax_labels, build_soft_masks, hu_compatibility_filter, hu_label_assignment,
    label_probabilities, sobel_fusion, sobel_fusion_all, SoftMasks, N_LABELS,
};

use crate::checkpoint::Checkpoint;
use crate::error::{Result, StageExt};
use crate::hu::HuThresholds;
use crate::inference::{extract_corpus, InferenceConfig, PatchDescriptor};
use crate::radiomics::radiomic_vector;
use crate::volume::{grid_origins, CtVolume, LabelVolume, PathologyLabel};
use crate::EMBED_DIM;

/// Which per-patch features are clustered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// The full 384-d multi-timestep descriptor.
    #[default]
    Descriptor,
    /// Only the pooled bottleneck half of the descriptor.
    Bottleneck,
    /// k-means on raw radiomic vectors; no model involved.
    RadiomicsKmeans,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GmmScope {
    #[default]
    PerVolume,
    /// One mixture over the descriptors of every volume.
    Corpus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentConfig {
    pub gmm: GmmConfig,
    pub thresholds: HuThresholds,
    pub alpha_s: f64,
    pub sigma: f64,
    /// HU slack on each side of a band before the compatibility filter acts.
    pub margin: f64,
    pub fusion: bool,
    pub hu_filter: bool,
    pub features: FeatureSource,
    pub scope: GmmScope,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            gmm: GmmConfig::default(),
            thresholds: HuThresholds::default(),
            alpha_s: 2.0,
            sigma: 1.5,
            margin: 50.0,
            fusion: true,
            hu_filter: true,
            features: FeatureSource::Descriptor,
            scope: GmmScope::PerVolume,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult {
    pub labels: LabelVolume,
    pub soft_masks: SoftMasks,
    pub cluster_to_label: Vec<PathologyLabel>,
    pub cluster_mean_hu: Vec<Option<f64>>,
    pub origins: Vec<[usize; 3]>,
    pub ll_trace: Vec<f64>,
}

fn features(descs: &[PatchDescriptor], source: FeatureSource) -> Vec<Vec<f64>> {
    descs
        .iter()
        .map(|d| match source {
            FeatureSource::Bottleneck => d.values[EMBED_DIM..].to_vec(),
            _ => d.values.clone(),
        })
        .collect()
}

struct Clustering {
    resp: Vec<Vec<f64>>,
    hard: Vec<usize>,
    k: usize,
    ll_trace: Vec<f64>,
}

fn cluster(data: &[Vec<f64>], cfg: &SegmentConfig) -> Result<Clustering> {
    if cfg.features == FeatureSource::RadiomicsKmeans {
        let r = kmeans(data, cfg.gmm.k, cfg.gmm.seed, cfg.gmm.kmeans_iter).stage("kmeans")?;
        let resp = r
            .labels
            .iter()
            .map(|&l| {
                (0..cfg.gmm.k)
                    .map(|c| if c == l { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        return Ok(Clustering {
            resp,
            hard: r.labels,
            k: cfg.gmm.k,
            ll_trace: vec![],
        });
    }
    let model = fit_gmm(data, &cfg.gmm).stage("fit_gmm")?;
    let (hard, resp) = assign_clusters(&model, data).stage("assign_clusters")?;
    Ok(Clustering {
        resp,
        hard,
        k: model.k(),
        ll_trace: model.ll_trace,
    })
}

fn patch_means(volume: &CtVolume, origins: &[[usize; 3]], side: usize) -> Result<Vec<f64>> {
    origins
        .iter()
        .map(|&o| Ok(volume.patch(o, side)?.mean_hu()))
        .collect()
}

/// Mask reconstruction, fusion, argmax and the HU filter for one volume
/// whose clusters are already labelled.
fn finish(
    volume: &CtVolume,
    origins: Vec<[usize; 3]>,
    side: usize,
    resp: &[Vec<f64>],
    cluster_to_label: Vec<PathologyLabel>,
    cluster_mean_hu: Vec<Option<f64>>,
    ll_trace: Vec<f64>,
    cfg: &SegmentConfig,
) -> Result<SegmentationResult> {
    let probs = label_probabilities(resp, &cluster_to_label);
    let mut soft =
        build_soft_masks(&probs, &origins, volume.shape(), side).stage("build_soft_masks")?;
    if cfg.fusion {
        soft = sobel_fusion_all(&soft, volume, cfg.alpha_s, cfg.sigma).stage("sobel_fusion")?;
    }
    let mut labels = argmax_labels(&soft);
    if cfg.hu_filter {
        let filtered = hu_compatibility_filter(&labels, volume, &cfg.thresholds, cfg.margin)
            .stage("hu_compatibility_filter")?;
        // Reassigned voxels get one-hot masks so labels stay the argmax.
        for ((idx, new), old) in filtered.indexed_iter().zip(labels.iter()) {
            if new != old {
                for (l, m) in soft.masks.iter_mut().enumerate() {
                    m[idx] = if l == new.index() { 1.0 } else { 0.0 };
                }
            }
        }
        labels = filtered;
    }
    Ok(SegmentationResult {
        labels,
        soft_masks: soft,
        cluster_to_label,
        cluster_mean_hu,
        origins,
        ll_trace,
    })
}

/// Full pipeline on one volume. The radiomics baseline ignores `ck`.
pub fn segment_volume(
    volume: &CtVolume,
    ck: &Checkpoint,
    inf: &InferenceConfig,
    cfg: &SegmentConfig,
) -> Result<SegmentationResult> {
    let side = ck.denoiser.config.side;
    let (origins, data) = if cfg.features == FeatureSource::RadiomicsKmeans {
        radiomic_rows(volume, side, inf.stride.unwrap_or((side / 2).max(1)))?
    } else {
        let descs = extract_corpus(volume, ck, inf).stage("extract_corpus")?;
        (
            descs.iter().map(|d| d.origin).collect(),
            features(&descs, cfg.features),
        )
    };
    let c = cluster(&data, cfg)?;
    let means = patch_means(volume, &origins, side)?;
    let (map, hu) =
        hu_label_assignment(c.k, &means, &c.hard, &cfg.thresholds).stage("hu_label_assignment")?;
    finish(volume, origins, side, &c.resp, map, hu, c.ll_trace, cfg)
}

fn radiomic_rows(
    volume: &CtVolume,
    side: usize,
    stride: usize,
) -> Result<(Vec<[usize; 3]>, Vec<Vec<f64>>)> {
    let origins = grid_origins(volume.shape(), side, stride).stage("radiomics")?;
    let rows = origins
        .iter()
        .map(|&o| Ok(radiomic_vector(&volume.patch(o, side)?)?.values.to_vec()))
        .collect::<Result<Vec<_>>>()
        .stage("radiomics")?;
    Ok((origins, rows))
}

/// Segments several volumes; in corpus scope one mixture and one cluster
/// labelling are shared by all of them.
pub fn segment_volumes(
    volumes: &[CtVolume],
    ck: &Checkpoint,
    inf: &InferenceConfig,
    cfg: &SegmentConfig,
) -> Result<Vec<SegmentationResult>> {
    if cfg.scope == GmmScope::PerVolume || cfg.features == FeatureSource::RadiomicsKmeans {
        return volumes
            .iter()
            .map(|v| segment_volume(v, ck, inf, cfg))
            .collect();
    }
    let side = ck.denoiser.config.side;
    let mut per_volume = Vec::new();
    let mut all = Vec::new();
    let mut all_means = Vec::new();
    for v in volumes {
        let descs = extract_corpus(v, ck, inf).stage("extract_corpus")?;
        let origins: Vec<[usize; 3]> = descs.iter().map(|d| d.origin).collect();
        all_means.extend(patch_means(v, &origins, side)?);
        all.extend(features(&descs, cfg.features));
        per_volume.push(origins);
    }
    let c = cluster(&all, cfg)?;
    let (map, hu) = hu_label_assignment(c.k, &all_means, &c.hard, &cfg.thresholds)
        .stage("hu_label_assignment")?;
    let mut offset = 0;
    let mut out = Vec::new();
    for (v, origins) in volumes.iter().zip(per_volume) {
        let n = origins.len();
        let resp = &c.resp[offset..offset + n];
        offset += n;
        out.push(finish(
            v,
            origins,
            side,
            resp,
            map.clone(),
            hu.clone(),
            c.ll_trace.clone(),
            cfg,
        )?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub cluster_to_label: Vec<PathologyLabel>,
    pub cluster_mean_hu: Vec<Option<f64>>,
    pub config_hash: String,
    pub gmm_seed: u64,
    pub noise_seed: u64,
    pub ll_trace: Vec<f64>,
}

/// Writes `<stem>_labels.nii.gz`, one float mask per class and
/// `<stem>_report.json` into `dir`.
pub fn save_segmentation(
    dir: &Path,
    stem: &str,
    r: &SegmentationResult,
    volume: &CtVolume,
    report: &SegmentReport,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    crate::io::save_labels(
        &dir.join(format!("{stem}_labels.nii.gz")),
        &r.labels,
        volume.spacing(),
        volume.origin(),
    )?;
    for l in PathologyLabel::ALL {
        let p = dir.join(format!("{stem}_mask_{}.nii.gz", l.name().to_lowercase()));
        crate::io::save_real(&p, r.soft_masks.get(l), volume.spacing(), volume.origin())?;
    }
    std::fs::write(
        dir.join(format!("{stem}_report.json")),
        serde_json::to_vec_pretty(report)?,
    )?;
    Ok(())
}
