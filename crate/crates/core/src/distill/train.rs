use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    info_nce_raw, positive_fraction, radiomic_similarity, total_loss, warmup_lambda, DistillConfig,
};
use crate::checkpoint::Checkpoint;
use crate::diffusion::{DenoiserParams, ScheduleConfig};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::nn::head::{student_backward, student_forward, StudentHeadParams, STUDENT_PARAMS};
use crate::nn::{Adam, Fmap, UNetConfig};
use crate::radiomics::{radiomic_vector, teacher_project, RadiomicScaler, TeacherHeadParams};
use crate::volume::{sample_patches, CtVolume, HuWindow, Patch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    /// Drives patch sampling, timesteps, noise and parameter init.
    pub seed: u64,
    pub patches_per_volume: usize,
    pub teacher_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch: 8,
            lr: 1e-4,
            seed: 0,
            patches_per_volume: 64,
            teacher_seed: 1,
        }
    }
}

/// Everything the training loop needs besides the corpus.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    pub distill: DistillConfig,
    pub train: TrainConfig,
    pub window: HuWindow,
    pub eight_bit: bool,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_diff: f64,
    pub l_nce: f64,
    pub lambda: f64,
    pub pos_frac: f64,
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
}

struct Sample {
    input: Vec<f64>,
    teacher: Embedding,
}

fn prepare(
    corpus: &[CtVolume],
    setup: &TrainSetup,
    teacher: &TeacherHeadParams,
) -> Result<(Vec<Sample>, RadiomicScaler)> {
    let side = setup.unet.side;
    let mut patches: Vec<Patch> = Vec::new();
    for (i, v) in corpus.iter().enumerate() {
        let seed = setup
            .train
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(i as u64);
        patches.extend(sample_patches(
            v,
            side,
            setup.train.patches_per_volume,
            seed,
            None,
        )?);
    }
    if patches.len() < 2 {
        return Err(Error::invalid(format!(
            "training corpus yields {} patches; at least 2 are needed",
            patches.len()
        )));
    }
    let raw = patches
        .iter()
        .map(radiomic_vector)
        .collect::<Result<Vec<_>>>()?;
    let scaler = RadiomicScaler::fit(&raw)?;
    let samples = patches
        .iter()
        .zip(&raw)
        .map(|(p, r)| {
            Ok(Sample {
                input: p
                    .voxels()
                    .iter()
                    .map(|&h| setup.window.model_input(h as f64, setup.eight_bit))
                    .collect(),
                teacher: teacher_project(&scaler.apply(r), teacher)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, scaler))
}

/// Trains the denoiser and student head on patches sampled from `corpus`.
/// `on_step` sees each step's metrics as they are produced.
pub fn train(
    corpus: &[CtVolume],
    setup: &TrainSetup,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainOutput> {
    setup.unet.validate()?;
    setup.distill.validate()?;
    setup.window.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    if setup.train.batch < 2 {
        return Err(Error::invalid("training batch must be at least 2"));
    }
    let schedule = setup.schedule.build()?;
    let teacher = TeacherHeadParams::seeded(setup.train.teacher_seed);
    let (samples, scaler) = prepare(corpus, setup, &teacher)?;
    let (net, mut denoiser) = DenoiserParams::init(&setup.unet, setup.train.seed)?;
    let mut student = StudentHeadParams::seeded(setup.train.seed ^ 0x5354_5544);
    let mut opt_net = Adam::new(denoiser.values.len(), setup.train.lr);
    let mut opt_head = Adam::new(STUDENT_PARAMS, setup.train.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(setup.train.seed);
    let side = setup.unet.side;
    let n_vox = side * side * side;
    let batch = setup.train.batch.min(samples.len());
    let dcfg = &setup.distill;
    let snapshot = |denoiser: &DenoiserParams, student: &StudentHeadParams, steps: u64| {
        let mut ck = Checkpoint {
            schedule: setup.schedule.clone(),
            denoiser: denoiser.clone(),
            student: student.clone(),
            teacher: teacher.clone(),
            window: setup.window,
            eight_bit: setup.eight_bit,
            scaler: scaler.clone(),
            config_hash: setup.config_hash.clone(),
            steps_trained: steps,
        };
        ck.round_to_storage();
        ck
    };
    let mut metrics = Vec::new();
    for step in 1..=setup.train.steps {
        let idx = sample(&mut rng, samples.len(), batch).into_vec();
        let ts: Vec<usize> = (0..batch)
            .map(|_| rng.random_range(0..schedule.steps()))
            .collect();
        let mut fwd = Vec::with_capacity(batch);
        let mut l_diff = 0.0;
        let mut deps = Vec::with_capacity(batch);
        for (&i, &t) in idx.iter().zip(&ts) {
            let eps: Vec<f64> = (0..n_vox).map(|_| rng.sample(StandardNormal)).collect();
            let ab = schedule.alpha_bars[t];
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            let x_t: Vec<f64> = samples[i]
                .input
                .iter()
                .zip(&eps)
                .map(|(x, e)| a * x + b * e)
                .collect();
            let out = net.forward(&denoiser.values, &Fmap::from_vec(1, side, x_t), t as f64)?;
            let mut g = Vec::with_capacity(n_vox);
            for (p, e) in out.eps.data.iter().zip(&eps) {
                l_diff += (p - e).powi(2);
                g.push(2.0 * (p - e) / (batch * n_vox) as f64);
            }
            deps.push(Fmap::from_vec(1, side, g));
            fwd.push(out);
        }
        l_diff /= (batch * n_vox) as f64;

        let lambda = if dcfg.enabled {
            warmup_lambda(step, dcfg)
        } else {
            0.0
        };
        let teachers: Vec<&Embedding> = idx.iter().map(|&i| &samples[i].teacher).collect();
        let sim = radiomic_similarity(&teachers)?;
        let heads = fwd
            .iter()
            .map(|f| student_forward(&f.bottleneck.pooled(), &student))
            .collect::<Result<Vec<_>>>()?;
        let zs: Vec<&[f64]> = heads.iter().map(|h| h.z.as_slice()).collect();
        let (nce, dz) = info_nce_raw(&zs, &sim, dcfg)?;
        if nce.positive_free && lambda > 0.0 {
            log::debug!("step {step}: batch has no positive pairs");
        }
        let total = total_loss(l_diff, nce.loss, step, dcfg);
        let total = match total {
            Ok(v) if v.is_finite() => v,
            _ => {
                return Err(Error::TrainingAborted {
                    step: step as usize,
                    last_good: Box::new(snapshot(&denoiser, &student, step - 1)),
                })
            }
        };
        log::trace!("step {step}: total {total:.6}");

        let mut g_net = vec![0.0; denoiser.values.len()];
        let mut g_head = vec![0.0; STUDENT_PARAMS];
        for (k, out) in fwd.into_iter().enumerate() {
            let dbott = if lambda > 0.0 && !nce.positive_free {
                let dzk: Vec<f64> = dz[k].iter().map(|v| v * lambda).collect();
                let du = student_backward(&student, &mut g_head, &heads[k], &dzk);
                let nv = out.bottleneck.voxels() as f64;
                let mut m = Fmap::zeros(out.bottleneck.c, out.bottleneck.d);
                for (c, g) in du.iter().enumerate() {
                    m.data[c * nv as usize..(c + 1) * nv as usize].fill(g / nv);
                }
                Some(m)
            } else {
                None
            };
            net.backward(
                &denoiser.values,
                &mut g_net,
                out.tape,
                &deps[k],
                dbott.as_ref(),
            );
        }
        opt_net.step(&mut denoiser.values, &g_net);
        opt_head.step(&mut student.values, &g_head);

        let m = StepMetrics {
            step,
            l_diff,
            l_nce: nce.loss,
            lambda,
            pos_frac: positive_fraction(&sim, dcfg.tau),
        };
        on_step(&m);
        metrics.push(m);
    }
    Ok(TrainOutput {
        checkpoint: snapshot(&denoiser, &student, setup.train.steps),
        metrics,
    })
}
