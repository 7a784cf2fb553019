use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use lungseg_core::diffusion::{denoiser_forward, DenoiserParams};
use lungseg_core::eval::hd95;
use lungseg_core::nn::layers::Fmap;
use lungseg_core::nn::UNetConfig;
use lungseg_core::radiomics::{glcm::glcm_features, radiomic_vector};
use lungseg_core::segment::{fit_gmm, GmmConfig};
use lungseg_core::Patch;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noisy_patch(side: usize, seed: u64) -> Patch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vox = Array3::from_shape_fn((side, side, side), |_| rng.random_range(-950i16..-400));
    Patch::new(vox, [0, 0, 0]).unwrap()
}

fn radiomics(c: &mut Criterion) {
    let p = noisy_patch(16, 1);
    let offsets = [[0, 0, 1], [0, 1, 0], [1, 0, 0]];
    c.bench_function("glcm_16", |b| {
        b.iter(|| glcm_features(black_box(p.voxels()), 32, &offsets))
    });
    c.bench_function("radiomic_vector_16", |b| {
        b.iter(|| radiomic_vector(black_box(&p)).unwrap())
    });
}

fn denoiser(c: &mut Criterion) {
    let cfg = UNetConfig {
        side: 16,
        widths: vec![8, 16, 32],
        groups: 4,
        time_embed_dim: 16,
        time_dim: 32,
    };
    let (_, params) = DenoiserParams::init(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut x = Fmap::zeros(1, 16);
    x.data
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-1.0..1.0));
    c.bench_function("denoiser_forward_tiny", |b| {
        b.iter(|| denoiser_forward(black_box(std::slice::from_ref(&x)), &[100], &params).unwrap())
    });
}

fn clustering(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<Vec<f64>> = (0..300)
        .map(|i| {
            (0..32)
                .map(|_| (i % 5) as f64 + rng.random_range(-0.3..0.3))
                .collect()
        })
        .collect();
    let cfg = GmmConfig {
        max_iter: 50,
        ..GmmConfig::default()
    };
    c.bench_function("gmm_300x32_k5", |b| {
        b.iter(|| fit_gmm(black_box(&data), &cfg).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let a = Array3::from_shape_fn((48, 48, 48), |(z, y, x)| {
        (z as i32 - 24).pow(2) + (y as i32 - 24).pow(2) + (x as i32 - 24).pow(2) < 300
    });
    let b = Array3::from_shape_fn((48, 48, 48), |(z, y, x)| {
        (z as i32 - 26).pow(2) + (y as i32 - 23).pow(2) + (x as i32 - 24).pow(2) < 280
    });
    c.bench_function("hd95_48", |bch| {
        bch.iter(|| hd95(black_box(a.view()), b.view(), [0.6; 3]).unwrap())
    });
}

criterion_group!(benches, radiomics, denoiser, clustering, metrics);
criterion_main!(benches);
