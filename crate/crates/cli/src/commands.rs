use std::fs;
use std::io::Write;
use std::path::Path;

use log::info;
use lungseg_core::benchmark::{run_ablation, write_ablation_csv};
use lungseg_core::checkpoint::Checkpoint;
use lungseg_core::distill::train;
use lungseg_core::error::StageExt;
use lungseg_core::eval::{frechet_proxy, metric_report, psnr, save_report, ssim, write_table_csv};
use lungseg_core::inference::{dpm_generate, extract_corpus, save_descriptors};
use lungseg_core::io::{load_labels, load_volume, save_labels, save_volume, set_description};
use lungseg_core::segment::{save_segmentation, segment_volumes, SegmentReport};
use lungseg_core::{CtVolume, Error, ExperimentConfig, LabelVolume, PathologyLabel, Result};
use ndarray::Array3;
use serde::Serialize;
use serde_json::{json, Value};

use crate::plot;
use crate::Command;

/// Runs one subcommand against a resolved configuration.
pub fn run(cmd: &Command, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    save_resolved_config(cfg, cmd.name())?;
    match cmd {
        Command::Phantom(_) => phantom(cfg).stage("phantom"),
        Command::Train(_) => cmd_train(cfg).stage("train"),
        Command::Segment {
            hash,
            dump_features,
            ..
        } => segment(cfg, hash.allow_hash_mismatch, *dump_features).stage("segment"),
        Command::Generate { hash, .. } => generate(cfg, hash.allow_hash_mismatch).stage("generate"),
        Command::Evaluate { hash, .. } => evaluate(cfg, hash.allow_hash_mismatch).stage("evaluate"),
        Command::Ablate(_) => ablate(cfg).stage("ablate"),
        Command::Plot { slice, .. } => plot_cmd(cfg, *slice).stage("plot"),
    }
}

fn tag(hash: &str) -> String {
    format!("lungseg config {hash}")
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn save_resolved_config(cfg: &ExperimentConfig, command: &str) -> Result<()> {
    let doc = json!({
        "command": command,
        "config_hash": cfg.full_hash(),
        "training_hash": cfg.training_hash(),
        "config": serde_json::to_value(cfg)?,
    });
    write_json(&cfg.output_dir.join(format!("{command}_config.json")), &doc)
}

fn save_tagged_volume(path: &Path, v: &CtVolume, hash: &str) -> Result<()> {
    save_volume(path, v)?;
    set_description(path, &tag(hash))
}

fn save_tagged_labels(path: &Path, l: &LabelVolume, v: &CtVolume, hash: &str) -> Result<()> {
    save_labels(path, l, v.spacing(), v.origin())?;
    set_description(path, &tag(hash))
}

/// File name without any of the recognised volume extensions.
pub fn volume_stem(path: &Path) -> String {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("volume");
    for ext in [".nii.gz", ".nii", ".raw"] {
        if let Some(s) = name.strip_suffix(ext) {
            return s.to_string();
        }
    }
    name.to_string()
}

/// Named volumes for segmentation: `data.volumes`, or the phantom test
/// split (with ground truth) when none are configured.
pub(crate) fn segmentation_inputs(
    cfg: &ExperimentConfig,
) -> Result<Vec<(String, CtVolume, Option<LabelVolume>)>> {
    if cfg.data.volumes.is_empty() {
        let test = cfg
            .phantom
            .generate(&cfg.phantom.test_seeds(), &cfg.segment.thresholds)?;
        Ok(test
            .into_iter()
            .enumerate()
            .map(|(i, (v, l))| (format!("test_{i:03}"), v, Some(l)))
            .collect())
    } else {
        cfg.data
            .volumes
            .iter()
            .map(|p| Ok((volume_stem(p), load_volume(p)?, None)))
            .collect()
    }
}

fn phantom(cfg: &ExperimentConfig) -> Result<()> {
    let hash = cfg.full_hash();
    let dir = cfg.output_dir.join("phantom");
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    for (split, seeds) in [
        ("train", cfg.phantom.train_seeds()),
        ("test", cfg.phantom.test_seeds()),
    ] {
        let vols = cfg.phantom.generate(&seeds, &cfg.segment.thresholds)?;
        for (i, ((v, l), seed)) in vols.iter().zip(&seeds).enumerate() {
            let ct = format!("{split}_{i:03}_ct.nii.gz");
            let lab = format!("{split}_{i:03}_labels.nii.gz");
            save_tagged_volume(&dir.join(&ct), v, &hash)?;
            save_tagged_labels(&dir.join(&lab), l, v, &hash)?;
            files.push(json!({ "split": split, "seed": seed, "ct": ct, "labels": lab }));
        }
    }
    info!("wrote {} phantom volumes to {}", files.len(), dir.display());
    write_json(
        &dir.join("manifest.json"),
        &json!({ "config_hash": hash, "volumes": files }),
    )
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let corpus: Vec<CtVolume> = if cfg.data.volumes.is_empty() {
        let set = cfg
            .phantom
            .generate(&cfg.phantom.train_seeds(), &cfg.segment.thresholds)?;
        set.into_iter().map(|(v, _)| v).collect()
    } else {
        cfg.data
            .volumes
            .iter()
            .map(|p| load_volume(p))
            .collect::<Result<_>>()?
    };
    let setup = cfg.train_setup();
    let hash = setup.config_hash.clone();
    let metrics_path = cfg.output_dir.join("metrics.ndjson");
    let mut metrics = std::io::BufWriter::new(fs::File::create(&metrics_path)?);
    let mut write_err = None;
    let every = (cfg.train.steps / 10).max(1);
    let out = train(&corpus, &setup, |m| {
        let mut line = serde_json::to_value(m).unwrap_or(Value::Null);
        if let Value::Object(o) = &mut line {
            o.insert("config_hash".into(), Value::String(hash.clone()));
        }
        if let Err(e) = writeln!(metrics, "{line}") {
            write_err.get_or_insert(e);
        }
        if (m.step + 1) % every == 0 {
            info!(
                "step {} l_diff {:.5} l_nce {:.5} lambda {:.3}",
                m.step + 1,
                m.l_diff,
                m.l_nce,
                m.lambda
            );
        }
    });
    metrics.flush()?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let ck_path = cfg.checkpoint_path();
    let out = match out {
        Ok(o) => o,
        Err(Error::TrainingAborted { step, last_good }) => {
            let p = ck_path.with_extension("aborted.ldck");
            last_good.save(&p)?;
            info!("saved last good checkpoint to {}", p.display());
            return Err(Error::TrainingAborted { step, last_good });
        }
        Err(e) => return Err(e),
    };
    out.checkpoint.save(&ck_path)?;
    info!(
        "saved checkpoint {} (training hash {hash})",
        ck_path.display()
    );
    Ok(())
}

fn load_checked(cfg: &ExperimentConfig, allow_mismatch: bool) -> Result<Checkpoint> {
    let ck = Checkpoint::load(&cfg.checkpoint_path())?;
    ck.check_hash(&cfg.training_hash(), allow_mismatch)?;
    if ck.config_hash != cfg.training_hash() {
        log::warn!(
            "checkpoint hash {} differs from request {}",
            ck.config_hash,
            cfg.training_hash()
        );
    }
    Ok(ck)
}

fn segment(cfg: &ExperimentConfig, allow_mismatch: bool, dump_features: bool) -> Result<()> {
    let ck = load_checked(cfg, allow_mismatch)?;
    let hash = cfg.full_hash();
    let dir = cfg.output_dir.join("segment");
    let inputs = segmentation_inputs(cfg)?;
    let volumes: Vec<CtVolume> = inputs.iter().map(|(_, v, _)| v.clone()).collect();
    let results = segment_volumes(&volumes, &ck, &cfg.inference, &cfg.segment)?;
    for ((stem, vol, _), r) in inputs.iter().zip(&results) {
        let report = SegmentReport {
            cluster_to_label: r.cluster_to_label.clone(),
            cluster_mean_hu: r.cluster_mean_hu.clone(),
            config_hash: hash.clone(),
            gmm_seed: cfg.segment.gmm.seed,
            noise_seed: cfg.inference.noise_seed,
            ll_trace: r.ll_trace.clone(),
        };
        save_segmentation(&dir, stem, r, vol, &report)?;
        set_description(&dir.join(format!("{stem}_labels.nii.gz")), &tag(&hash))?;
        for l in PathologyLabel::ALL {
            set_description(
                &dir.join(format!("{stem}_mask_{}.nii.gz", l.name().to_lowercase())),
                &tag(&hash),
            )?;
        }
        if dump_features {
            let descs = extract_corpus(vol, &ck, &cfg.inference)?;
            save_descriptors(&dir.join(format!("{stem}_features")), &descs, &hash)?;
        }
        info!("segmented {stem}");
    }
    Ok(())
}

fn generate(cfg: &ExperimentConfig, allow_mismatch: bool) -> Result<()> {
    let ck = load_checked(cfg, allow_mismatch)?;
    let hash = cfg.full_hash();
    let g = &cfg.generate;
    let dir = cfg.output_dir.join("generate");
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    for i in 0..g.count {
        let seed = g.seed.wrapping_add(i as u64);
        let v = dpm_generate(&ck, g.shape, g.solver_steps, seed)?;
        let name = format!("gen_{i:03}.nii.gz");
        save_tagged_volume(&dir.join(&name), &v, &hash)?;
        files.push(json!({ "file": name, "seed": seed }));
    }
    info!("generated {} volumes in {}", g.count, dir.display());
    write_json(
        &dir.join("manifest.json"),
        &json!({ "config_hash": hash, "volumes": files }),
    )
}

#[derive(Serialize)]
struct FidelityReport {
    pairs: usize,
    ssim: f64,
    #[serde(with = "lungseg_core::eval::nonfinite")]
    psnr: Option<f64>,
    frechet_proxy: Option<f64>,
    data_range: f64,
    config_hash: String,
}

/// Stem, prediction, ground truth and voxel spacing.
type EvalPair = (String, LabelVolume, LabelVolume, [f64; 3]);

/// Prediction / ground-truth pairs: explicit paths from the config, or the
/// segmented phantom test split.
fn evaluation_pairs(cfg: &ExperimentConfig) -> Result<Vec<EvalPair>> {
    let d = &cfg.data;
    if !d.predictions.is_empty() || !d.labels.is_empty() {
        if d.predictions.len() != d.labels.len() {
            return Err(Error::InvalidArgument(format!(
                "data.predictions has {} entries but data.labels has {}",
                d.predictions.len(),
                d.labels.len()
            )));
        }
        return d
            .predictions
            .iter()
            .zip(&d.labels)
            .map(|(p, g)| {
                let (pred, _, _) = load_labels(p)?;
                let (gt, spacing, _) = load_labels(g)?;
                Ok((volume_stem(p), pred, gt, spacing))
            })
            .collect();
    }
    if !d.volumes.is_empty() {
        return Err(Error::InvalidArgument(
            "set data.predictions and data.labels to evaluate real volumes".into(),
        ));
    }
    let seg_dir = cfg.output_dir.join("segment");
    let test = cfg
        .phantom
        .generate(&cfg.phantom.test_seeds(), &cfg.segment.thresholds)?;
    test.into_iter()
        .enumerate()
        .map(|(i, (v, gt))| {
            let stem = format!("test_{i:03}");
            let (pred, _, _) = load_labels(&seg_dir.join(format!("{stem}_labels.nii.gz")))?;
            Ok((stem, pred, gt, v.spacing()))
        })
        .collect()
}

fn fidelity(cfg: &ExperimentConfig, allow_mismatch: bool) -> Result<FidelityReport> {
    let e = &cfg.evaluate;
    if e.real.len() != e.generated.len() {
        return Err(Error::InvalidArgument(format!(
            "evaluate.real has {} entries but evaluate.generated has {}",
            e.real.len(),
            e.generated.len()
        )));
    }
    let w = cfg.normalization.window;
    let clamp = |v: &CtVolume| -> Array3<f64> { v.to_f64().mapv(|x| x.clamp(w.lo, w.hi)) };
    let ck = if cfg.checkpoint_path().exists() {
        Some(load_checked(cfg, allow_mismatch)?)
    } else {
        None
    };
    let (mut ssim_sum, mut psnrs) = (0.0, Vec::new());
    let (mut real_f, mut gen_f) = (Vec::new(), Vec::new());
    for (rp, gp) in e.real.iter().zip(&e.generated) {
        let (r, g) = (load_volume(rp)?, load_volume(gp)?);
        let (a, b) = (clamp(&r), clamp(&g));
        ssim_sum += ssim(a.view(), b.view(), w.width())?;
        psnrs.push(psnr(a.view(), b.view(), w.width())?);
        if let Some(ck) = &ck {
            real_f.extend(
                extract_corpus(&r, ck, &cfg.inference)?
                    .into_iter()
                    .map(|d| d.values),
            );
            gen_f.extend(
                extract_corpus(&g, ck, &cfg.inference)?
                    .into_iter()
                    .map(|d| d.values),
            );
        }
    }
    let n = e.real.len();
    let frechet = if ck.is_some() {
        Some(frechet_proxy(&real_f, &gen_f)?)
    } else {
        None
    };
    Ok(FidelityReport {
        pairs: n,
        ssim: ssim_sum / n as f64,
        psnr: Some(psnrs.iter().sum::<f64>() / n as f64),
        frechet_proxy: frechet,
        data_range: w.width(),
        config_hash: cfg.full_hash(),
    })
}

fn evaluate(cfg: &ExperimentConfig, allow_mismatch: bool) -> Result<()> {
    let hash = cfg.full_hash();
    let dir = cfg.output_dir.join("evaluate");
    fs::create_dir_all(&dir)?;
    let d = &cfg.data;
    let want_fidelity = !(cfg.evaluate.real.is_empty() && cfg.evaluate.generated.is_empty());
    let explicit = !d.predictions.is_empty() || !d.labels.is_empty();
    let phantom_seg = d.volumes.is_empty() && cfg.output_dir.join("segment").exists();
    if !want_fidelity || explicit || phantom_seg {
        let mut rows = Vec::new();
        let mut ndjson = String::new();
        for (stem, pred, gt, spacing) in evaluation_pairs(cfg)? {
            let r = metric_report(
                &pred,
                &gt,
                spacing,
                cfg.evaluate.mode,
                cfg.normalization.window,
                None,
                &hash,
            )?;
            save_report(&dir.join(format!("{stem}_report.json")), &r)?;
            let mut line = serde_json::to_value(&r)?;
            if let Value::Object(o) = &mut line {
                o.insert("volume".into(), Value::String(stem.clone()));
            }
            ndjson.push_str(&format!("{line}\n"));
            info!("{stem}: mean DSC {:.4}", r.mean_dice);
            rows.push((stem, r));
        }
        fs::write(dir.join("metrics.ndjson"), ndjson)?;
        write_table_csv(&dir.join("table.csv"), &rows)?;
    }
    if want_fidelity {
        let f = fidelity(cfg, allow_mismatch)?;
        info!("fidelity: SSIM {:.4} over {} pairs", f.ssim, f.pairs);
        write_json(&dir.join("fidelity.json"), &f)?;
    }
    Ok(())
}

fn ablate(cfg: &ExperimentConfig) -> Result<()> {
    let hash = cfg.full_hash();
    let results = run_ablation(cfg, &cfg.ablation.seeds, |m| info!("{m}"))?;
    let dir = cfg.output_dir.join("ablate");
    fs::create_dir_all(&dir)?;
    write_ablation_csv(&dir.join("ablation.csv"), &results, &hash)?;
    let rows: Vec<Value> = results
        .iter()
        .map(|r| json!({ "row": r.row, "mean_dice": r.mean_dice(), "mean_hd95": r.mean_hd95(), "runs": r.runs }))
        .collect();
    write_json(
        &dir.join("ablation.json"),
        &json!({ "config_hash": hash, "seeds": cfg.ablation.seeds, "rows": rows }),
    )
}

fn plot_cmd(cfg: &ExperimentConfig, slice: Option<usize>) -> Result<()> {
    let hash = cfg.full_hash();
    let dir = cfg.output_dir.join("plots");
    let mut wrote = 0;
    let metrics = cfg.output_dir.join("metrics.ndjson");
    if metrics.exists() {
        let text = fs::read_to_string(&metrics)?;
        let steps: Vec<Value> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        let series = |k: &str| -> Vec<f64> {
            steps
                .iter()
                .map(|s| s[k].as_f64().unwrap_or(f64::NAN))
                .collect()
        };
        fs::create_dir_all(&dir)?;
        plot::loss_curve(
            &dir.join("loss.png"),
            &series("l_diff"),
            &series("l_nce"),
            &series("lambda"),
            &tag(&hash),
        )?;
        wrote += 1;
    }
    let seg_dir = cfg.output_dir.join("segment");
    if seg_dir.exists() {
        let mut rows = Vec::new();
        for (stem, vol, gt) in segmentation_inputs(cfg)? {
            let p = seg_dir.join(format!("{stem}_labels.nii.gz"));
            if !p.exists() {
                continue;
            }
            let (pred, _, _) = load_labels(&p)?;
            rows.push(plot::GridRow {
                volume: vol,
                prediction: pred,
                truth: gt,
            });
        }
        if !rows.is_empty() {
            fs::create_dir_all(&dir)?;
            plot::slice_grid(
                &dir.join("slices.png"),
                &rows,
                slice,
                cfg.normalization.window,
                &tag(&hash),
            )?;
            wrote += 1;
        }
    }
    if wrote == 0 {
        return Err(Error::InvalidArgument(format!(
            "nothing to plot under {} (run train or segment first)",
            cfg.output_dir.display()
        )));
    }
    Ok(())
}
