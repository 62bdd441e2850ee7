//! Rayon pool versus a single worker on the three data-parallel hot loops:
//! per-sample gradients, per-target ridge solves and per-item reconstruction.
//!
//! The single-worker pool runs the same closures one at a time. To time the
//! build without rayon at all, run with `--no-default-features`; both groups
//! then measure the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mindloop_core::decoder::fit_ridge;
use mindloop_core::encoders::{AutoencoderConfig, LatentAutoencoder};
use mindloop_core::nn::batch_gradient;
use mindloop_core::pipeline::{AblationSection, DecoderSet, Experiment, ExperimentConfig, RoiChoice};
use mindloop_core::rng::seeded;
use mindloop_core::Tensor;
use rayon::ThreadPool;

fn pools() -> Vec<(String, ThreadPool)> {
    let wide = rayon::current_num_threads().max(2);
    [("sequential".to_string(), 1), (format!("rayon-{wide}"), wide)]
        .into_iter()
        .map(|(name, n)| (name, rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap()))
        .collect()
}

fn gradients(c: &mut Criterion) {
    let mut rng = seeded(1);
    let ae = LatentAutoencoder::new(AutoencoderConfig::default(), 2);
    let batch: Vec<Tensor> = (0..32)
        .map(|_| Tensor::randn(&[3, 32, 32], 0.3, &mut rng).map(|v| v.clamp(0.0, 1.0)))
        .collect();
    let mut group = c.benchmark_group("batch_gradient");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| {
                pool.install(|| {
                    batch_gradient(ae.params(), &batch, |tape, p, img| {
                        let x = tape.constant(img.clone());
                        let z = ae.encode_var(tape, p, x)?;
                        let y = ae.decode_var(tape, p, z)?;
                        tape.mse(y, x)
                    })
                    .unwrap()
                })
            })
        });
    }
    group.finish();
}

fn ridge(c: &mut Criterion) {
    let mut rng = seeded(3);
    let x = Tensor::randn(&[448, 1024], 1.0, &mut rng);
    let y = Tensor::randn(&[448, 256], 1.0, &mut rng);
    let mut group = c.benchmark_group("fit_ridge");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| pool.install(|| fit_ridge(&x, &y, 1.0, 100).unwrap()))
        });
    }
    group.finish();
}

fn reconstruction(c: &mut Criterion) {
    let mut cfg = ExperimentConfig::default();
    cfg.data.train_stimuli = 96;
    cfg.data.test_stimuli = 8;
    cfg.encoders.ae_training.epochs = 1;
    cfg.generator.training.epochs = 1;
    cfg.align.max_steps = 5;
    let exp = Experiment::prepare(&cfg).unwrap();
    let dec: DecoderSet = exp.fit_decoders(RoiChoice::All, &exp.dataset.train).unwrap();
    let variant = AblationSection::default();
    let mut group = c.benchmark_group("reconstruct_items");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| pool.install(|| exp.reconstruct_items(&dec, &exp.dataset.test, &variant).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, gradients, ridge, reconstruction);
criterion_main!(benches);
