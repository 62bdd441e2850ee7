#![allow(dead_code)]

pub mod checks;
pub mod gradcheck;
pub mod oracles;
pub mod surrogate;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use mindloop_core::aligner::structural_loss_var;
use mindloop_core::encoders::{AutoencoderConfig, LatentAutoencoder, VisualEncoder};
use mindloop_core::generator::{make_schedule, Denoiser, DenoiserConfig, DiffusionGenerator, ImageGenerator, SamplerConfig};
use mindloop_core::pipeline::ExperimentConfig;
use mindloop_core::rng::seeded;
use mindloop_core::{Result, Tape, Tensor, Var};

/// Small enough for the test suite to train and reconstruct in seconds.
pub const TINY_TOML: &str = r#"
seed = 3
image_format = "ppm"

[data]
image_size = 16
lvc_voxels = 48
hvc_voxels = 48
train_stimuli = 40
test_stimuli = 6
lvc_grid = 8

[encoders.ae_training]
epochs = 1

[decoder]
voxels_per_target = 12

[generator.training]
epochs = 1

[generator.sampler]
reverse_steps = 2

[align]
max_steps = 3
"#;

pub fn tiny_config(output: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(TINY_TOML).expect("tiny config parses");
    cfg.output = output.to_path_buf();
    cfg
}

/// Relative gradient error of the full `(c, z) → image` generator (two-step
/// schedule, random tiny autoencoder and denoiser) under two scalar losses:
/// `Σ r ⊙ image` and the structural loss through the visual encoder.
/// Returns the larger of the two, or infinity if a gradient vanishes.
pub fn composed_generator_error(seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let ae = LatentAutoencoder::new(
        AutoencoderConfig {
            width: 4,
            latent_channels: 2,
        },
        seed ^ 0xa5,
    );
    let latent = ae.latent_shape(8);
    let text_dim = 4;
    let denoiser = Denoiser::new(
        DenoiserConfig {
            width: 4,
            bottleneck: 4,
            attn_dim: 4,
        },
        latent,
        text_dim,
        2,
        seed ^ 0x5a,
    )?;
    let schedule = make_schedule(2, 0.1, 0.2)?;
    let generator = DiffusionGenerator {
        autoencoder: &ae,
        predictor: &denoiser,
        schedule: &schedule,
        sampler: SamplerConfig {
            forward_steps: 2,
            reverse_steps: 2,
        },
        eps: Tensor::randn(&latent, 1.0, &mut rng),
    };
    let visual = VisualEncoder::new(Default::default(), seed ^ 0x77)?;
    let c = Tensor::randn(&[3, text_dim], 1.0, &mut rng);
    let z = Tensor::randn(&latent, 1.0, &mut rng);
    let r = Tensor::randn(&[3, 8, 8], 1.0, &mut rng);
    let layers: BTreeSet<usize> = [1, 2].into_iter().collect();
    let dims = visual.layer_dims(8);
    let targets: BTreeMap<usize, Tensor> = layers
        .iter()
        .map(|&l| (l, Tensor::randn(&[dims[l - 1]], 0.5, &mut rng)))
        .collect();
    let masks: BTreeMap<usize, Vec<bool>> = targets.iter().map(|(&l, t)| (l, vec![true; t.len()])).collect();

    let weighted = |tape: &mut Tape, x: &[Var]| -> Result<Var> {
        let p = generator.bind(tape);
        let img = generator.generate(tape, &p, x[0], x[1])?;
        let rv = tape.constant(r.clone());
        let prod = tape.mul(img, rv)?;
        tape.sum(prod)
    };
    let structural = |tape: &mut Tape, x: &[Var]| -> Result<Var> {
        let p = generator.bind(tape);
        let img = generator.generate(tape, &p, x[0], x[1])?;
        let vp = visual.bind(tape);
        let feats = visual.features(tape, &vp, img, &layers)?;
        structural_loss_var(tape, &feats, &targets, &masks)
    };
    let inputs = [c, z];
    let mut worst: f64 = 0.0;
    for loss in [&weighted as &dyn Fn(&mut Tape, &[Var]) -> Result<Var>, &structural] {
        let (a, n) = gradcheck::compare(&inputs, loss, 1e-6)?;
        if a.iter().all(|&g| g == 0.0) {
            // a dead generator would pass vacuously
            return Ok(f64::INFINITY);
        }
        worst = worst.max(gradcheck::relative_error(&a, &n));
    }
    Ok(worst)
}
