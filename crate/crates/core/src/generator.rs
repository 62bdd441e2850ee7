//! Toy latent diffusion: noise schedule, closed-form forward diffusion, a
//! small conv denoiser with one cross-attention block conditioned on the text
//! embedding, and a deterministic, fully differentiable reverse sampler.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{softmax_values, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::encoders::{LatentAutoencoder, TextEncoder, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, Params};
use crate::rng::seeded;
use crate::tensor::Tensor;

/// β/α/ᾱ sequences for steps `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Linear β schedule from `beta_min` to `beta_max` over `steps` steps.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas in `[0, 1)`. Zero betas are
    /// accepted (identity steps), so monotonicity is only strict for β > 0.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config("betas must be non-empty and within [0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// ᾱ_t with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `R` evenly spaced timesteps from `from` down towards 0 (exclusive).
    pub fn sampling_steps(&self, from: usize, reverse_steps: usize) -> Vec<usize> {
        let r = reverse_steps.clamp(1, from.max(1));
        let mut ts: Vec<usize> = (0..r)
            .map(|i| ((from * (r - i)) as f64 / r as f64).round() as usize)
            .filter(|&t| t > 0)
            .collect();
        ts.dedup();
        ts
    }
}

/// `z_t = √ᾱ_t z + √(1−ᾱ_t) ε`.
pub fn forward_diffuse(z: &Tensor, schedule: &NoiseSchedule, t: usize, eps: &Tensor) -> Result<Tensor> {
    if z.shape() != eps.shape() {
        return Err(Error::contract(format!(
            "noise shape {:?} does not match latent {:?}",
            eps.shape(),
            z.shape()
        )));
    }
    if t > schedule.steps() {
        return Err(Error::contract(format!("t = {t} beyond schedule length {}", schedule.steps())));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z.zip_map(eps, |x, e| a * x + b * e)
}

pub fn forward_diffuse_var(tape: &mut Tape, z: Var, eps: Var, schedule: &NoiseSchedule, t: usize) -> Result<Var> {
    if tape.shape(z) != tape.shape(eps) {
        return Err(Error::contract("noise shape does not match latent"));
    }
    let ab = schedule.alpha_bar(t);
    let a = tape.scale(z, ab.sqrt())?;
    let b = tape.scale(eps, (1.0 - ab).sqrt())?;
    tape.add(a, b)
}

/// `softmax(QKᵀ/√d)·V` with `Q = φW_Q`, `K = cW_K`, `V = cW_V`. Returns the
/// output and the attention weights.
pub fn cross_attention_var(
    tape: &mut Tape,
    phi: Var,
    c: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
) -> Result<(Var, Var)> {
    let (ps, cs) = (tape.shape(phi).to_vec(), tape.shape(c).to_vec());
    let (qs, ks, vs) = (tape.shape(w_q).to_vec(), tape.shape(w_k).to_vec(), tape.shape(w_v).to_vec());
    let ok = ps.len() == 2
        && cs.len() == 2
        && qs.len() == 2
        && ks.len() == 2
        && vs.len() == 2
        && qs[0] == ps[1]
        && ks[0] == cs[1]
        && vs[0] == cs[1]
        && qs[1] == ks[1];
    if !ok {
        return Err(Error::contract(format!(
            "cross_attention shapes: phi {ps:?} c {cs:?} W_Q {qs:?} W_K {ks:?} W_V {vs:?}"
        )));
    }
    let d = qs[1] as f64;
    let q = tape.matmul(phi, w_q)?;
    let k = tape.matmul(c, w_k)?;
    let v = tape.matmul(c, w_v)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / d.sqrt())?;
    let weights = tape.softmax(scores, 1)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Value-only cross attention: `(output, weights)`.
pub fn cross_attention(phi: &Tensor, c: &Tensor, w_q: &Tensor, w_k: &Tensor, w_v: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let vars = [phi, c, w_q, w_k, w_v].map(|t| tape.constant(t.clone()));
    let (out, w) = cross_attention_var(&mut tape, vars[0], vars[1], vars[2], vars[3], vars[4])?;
    Ok((tape.value(out).clone(), tape.value(w).clone()))
}

/// Predicts the noise in `z_t` given timestep and conditioning.
pub trait NoisePredictor: Sync {
    /// Records the predictor's parameters on `tape` as constants.
    fn bind(&self, tape: &mut Tape) -> Vec<Var>;

    fn predict(&self, tape: &mut Tape, params: &[Var], z_t: Var, t: usize, c: Var) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub width: usize,
    pub bottleneck: usize,
    pub attn_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            width: 8,
            bottleneck: 16,
            attn_dim: 16,
        }
    }
}

/// Two-level conv U-stack over the latent, with a learned per-timestep
/// embedding and one cross-attention block at the bottleneck.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    /// `[C_z, h, w]`
    pub latent_shape: [usize; 3],
    pub text_dim: usize,
    pub timesteps: usize,
    params: Params,
}

mod slot {
    pub const IN_W: usize = 0;
    pub const IN_B: usize = 1;
    pub const DOWN_W: usize = 2;
    pub const DOWN_B: usize = 3;
    pub const TIME: usize = 4;
    pub const W_Q: usize = 5;
    pub const W_K: usize = 6;
    pub const W_V: usize = 7;
    pub const MID_W: usize = 8;
    pub const MID_B: usize = 9;
    pub const UP_W: usize = 10;
    pub const UP_B: usize = 11;
    pub const OUT_W: usize = 12;
    pub const OUT_B: usize = 13;
}

impl Denoiser {
    pub fn new(
        config: DenoiserConfig,
        latent_shape: [usize; 3],
        text_dim: usize,
        timesteps: usize,
        seed: u64,
    ) -> Result<Self> {
        let [cz, h, w] = latent_shape;
        if h % 2 != 0 || w % 2 != 0 || timesteps == 0 {
            return Err(Error::Config(format!(
                "denoiser needs even latent extents and T >= 1, got {latent_shape:?}, T={timesteps}"
            )));
        }
        let (c1, c2, dk) = (config.width, config.bottleneck, config.attn_dim);
        let mut rng = seeded(seed);
        let mut p = Params::new();
        p.push("in.w", nn::conv_weight(c1, cz, 3, &mut rng));
        p.push("in.b", Tensor::zeros(&[c1]));
        p.push("down.w", nn::conv_weight(c2, c1, 3, &mut rng));
        p.push("down.b", Tensor::zeros(&[c2]));
        p.push("time", Tensor::randn(&[timesteps, c2 * (h / 2) * (w / 2)], 0.1, &mut rng));
        p.push("attn.w_q", nn::dense_weight(c2, dk, &mut rng));
        p.push("attn.w_k", nn::dense_weight(text_dim, dk, &mut rng));
        p.push("attn.w_v", nn::dense_weight(text_dim, c2, &mut rng).map(|v| v * 0.5));
        p.push("mid.w", nn::conv_weight(c2, c2, 3, &mut rng));
        p.push("mid.b", Tensor::zeros(&[c2]));
        p.push("up.w", nn::conv_weight(c1, c2, 3, &mut rng));
        p.push("up.b", Tensor::zeros(&[c1]));
        p.push("out.w", nn::conv_weight(cz, 2 * c1, 3, &mut rng).map(|v| v * 0.5));
        p.push("out.b", Tensor::zeros(&[cz]));
        Ok(Self {
            config,
            latent_shape,
            text_dim,
            timesteps,
            params: p,
        })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Noise prediction plus the attention weights used for it.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], z_t: Var, t: usize, c: Var) -> Result<(Var, Var)> {
        use slot::*;
        if t == 0 || t > self.timesteps {
            return Err(Error::contract(format!("timestep {t} outside 1..={}", self.timesteps)));
        }
        if tape.shape(z_t) != self.latent_shape {
            return Err(Error::shape("denoiser", format!("latent {:?}", tape.shape(z_t))));
        }
        let [_, h, w] = self.latent_shape;
        let (c2, hb, wb) = (self.config.bottleneck, h / 2, w / 2);

        let h1 = tape.conv2d(z_t, p[IN_W], Some(p[IN_B]), 1, 1)?;
        let h1 = tape.leaky_relu(h1, LEAKY_SLOPE)?;
        let h2 = tape.conv2d(h1, p[DOWN_W], Some(p[DOWN_B]), 2, 1)?;
        let h2 = tape.leaky_relu(h2, LEAKY_SLOPE)?;
        let temb = tape.slice(p[TIME], 0, t - 1, t)?;
        let temb = tape.reshape(temb, &[c2, hb, wb])?;
        let h2 = tape.add(h2, temb)?;

        let flat = tape.reshape(h2, &[c2, hb * wb])?;
        let phi = tape.transpose(flat)?;
        let (attn, weights) = cross_attention_var(tape, phi, c, p[W_Q], p[W_K], p[W_V])?;
        let attn = tape.transpose(attn)?;
        let attn = tape.reshape(attn, &[c2, hb, wb])?;
        let h3 = tape.add(h2, attn)?;

        let h4 = tape.conv2d(h3, p[MID_W], Some(p[MID_B]), 1, 1)?;
        let h4 = tape.leaky_relu(h4, LEAKY_SLOPE)?;
        let u = tape.upsample(h4, 2)?;
        let u = tape.conv2d(u, p[UP_W], Some(p[UP_B]), 1, 1)?;
        let u = tape.leaky_relu(u, LEAKY_SLOPE)?;
        let cat = tape.concat(&[u, h1], 0)?;
        let eps = tape.conv2d(cat, p[OUT_W], Some(p[OUT_B]), 1, 1)?;
        Ok((eps, weights))
    }

    /// Attention weights of one invocation, `[queries, tokens]`.
    pub fn attention_weights(&self, z_t: &Tensor, t: usize, c: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let z = tape.constant(z_t.clone());
        let c = tape.constant(c.clone());
        let (_, w) = self.forward(&mut tape, &p, z, t, c)?;
        Ok(tape.value(w).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            "denoiser",
            json!({
                "config": self.config,
                "latent_shape": self.latent_shape,
                "text_dim": self.text_dim,
                "timesteps": self.timesteps,
            }),
            self.params.clone().into_pairs(),
        )
    }

    pub fn from_checkpoint(ck: Checkpoint, path: &Path) -> Result<Self> {
        let ck = ck.expect_kind("denoiser", path)?;
        let config: DenoiserConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let latent_shape: [usize; 3] = serde_json::from_value(ck.meta["latent_shape"].clone())?;
        let text_dim: usize = serde_json::from_value(ck.meta["text_dim"].clone())?;
        let timesteps: usize = serde_json::from_value(ck.meta["timesteps"].clone())?;
        let mut d = Self::new(config, latent_shape, text_dim, timesteps, 0)?;
        d.params = Params::from_pairs_like(&d.params, ck.tensors)?;
        Ok(d)
    }
}

impl NoisePredictor for Denoiser {
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.bind(tape, false)
    }

    fn predict(&self, tape: &mut Tape, params: &[Var], z_t: Var, t: usize, c: Var) -> Result<Var> {
        self.forward(tape, params, z_t, t, c).map(|(e, _)| e)
    }
}

/// Predictor that always returns a fixed noise tensor; inverts forward
/// diffusion exactly when that tensor is the noise actually used.
pub struct OracleNoise(pub Tensor);

impl NoisePredictor for OracleNoise {
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        vec![tape.constant(self.0.clone())]
    }

    fn predict(&self, _tape: &mut Tape, params: &[Var], _z_t: Var, _t: usize, _c: Var) -> Result<Var> {
        Ok(params[0])
    }
}

/// Deterministic DDIM-style reverse pass from `z_start` at step `from` to `z_0`.
pub fn reverse_latent(
    tape: &mut Tape,
    predictor: &dyn NoisePredictor,
    params: &[Var],
    schedule: &NoiseSchedule,
    z_start: Var,
    c: Var,
    from: usize,
    reverse_steps: usize,
) -> Result<Var> {
    let steps = schedule.sampling_steps(from, reverse_steps);
    let mut z = z_start;
    for (i, &t) in steps.iter().enumerate() {
        let prev = steps.get(i + 1).copied().unwrap_or(0);
        let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(prev));
        let eps = predictor.predict(tape, params, z, t, c)?;
        let noise = tape.scale(eps, (1.0 - ab).sqrt())?;
        let diff = tape.sub(z, noise)?;
        let z0_hat = tape.scale(diff, 1.0 / ab.sqrt())?;
        let a = tape.scale(z0_hat, ab_prev.sqrt())?;
        let b = tape.scale(eps, (1.0 - ab_prev).sqrt())?;
        z = tape.add(a, b)?;
    }
    Ok(z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Forward diffusion depth applied to the input latent.
    pub forward_steps: usize,
    pub reverse_steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            forward_steps: 50,
            reverse_steps: 10,
        }
    }
}

/// `(c, z)` → image generator: forward-diffuse `z` with fixed noise, reverse
/// sample conditioned on `c`, decode and clamp.
pub trait ImageGenerator: Sync {
    fn bind(&self, tape: &mut Tape) -> Vec<Var>;

    fn generate(&self, tape: &mut Tape, params: &[Var], c: Var, z: Var) -> Result<Var>;
}

pub struct DiffusionGenerator<'a> {
    pub autoencoder: &'a LatentAutoencoder,
    pub predictor: &'a dyn NoisePredictor,
    pub schedule: &'a NoiseSchedule,
    pub sampler: SamplerConfig,
    /// Forward-diffusion noise, fixed for the generator's lifetime.
    pub eps: Tensor,
}

impl DiffusionGenerator<'_> {
    /// Latent after forward diffusion and reverse sampling.
    pub fn sample_latent(&self, tape: &mut Tape, params: &[Var], c: Var, z: Var) -> Result<Var> {
        let n_pred = params.len() - self.autoencoder.params().len() - 1;
        let (pred, rest) = params.split_at(n_pred);
        let eps = rest[0];
        let z_t = forward_diffuse_var(tape, z, eps, self.schedule, self.sampler.forward_steps)?;
        reverse_latent(
            tape,
            self.predictor,
            pred,
            self.schedule,
            z_t,
            c,
            self.sampler.forward_steps,
            self.sampler.reverse_steps,
        )
    }

    /// Value-only `(z_0, image)` for a given `(z_T, c)`.
    pub fn reverse_sample(&self, z_t: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let pred = self.predictor.bind(&mut tape);
        let ae = self.autoencoder.bind(&mut tape, false);
        let zt = tape.constant(z_t.clone());
        let cv = tape.constant(c.clone());
        let z0 = reverse_latent(
            &mut tape,
            self.predictor,
            &pred,
            self.schedule,
            zt,
            cv,
            self.sampler.forward_steps,
            self.sampler.reverse_steps,
        )?;
        let img = self.autoencoder.decode_var(&mut tape, &ae, z0)?;
        let img = tape.clamp(img, 0.0, 1.0)?;
        Ok((tape.value(z0).clone(), tape.value(img).clone()))
    }

    /// Value-only image for `(c, z)`.
    pub fn render(&self, c: &Tensor, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let cv = tape.constant(c.clone());
        let zv = tape.constant(z.clone());
        let img = self.generate(&mut tape, &p, cv, zv)?;
        Ok(tape.value(img).clone())
    }
}

impl ImageGenerator for DiffusionGenerator<'_> {
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        let mut p = self.predictor.bind(tape);
        p.push(tape.constant(self.eps.clone()));
        p.extend(self.autoencoder.bind(tape, false));
        p
    }

    fn generate(&self, tape: &mut Tape, params: &[Var], c: Var, z: Var) -> Result<Var> {
        let z0 = self.sample_latent(tape, params, c, z)?;
        let ae = &params[params.len() - self.autoencoder.params().len()..];
        let img = self.autoencoder.decode_var(tape, ae, z0)?;
        tape.clamp(img, 0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for DenoiserTraining {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 2e-3,
            batch: 16,
        }
    }
}

/// Trains a denoiser on `(latent, text embedding)` pairs by minimizing
/// `‖ε − ε_θ(z_t, t, c)‖²` with `t ~ U{1..T}` and `ε ~ N(0, I)`. Returns the
/// model and the per-step mean batch loss.
pub fn train_denoiser_on(
    latents: &[Tensor],
    conds: &[Tensor],
    schedule: &NoiseSchedule,
    config: &DenoiserConfig,
    opts: &DenoiserTraining,
    seed: u64,
) -> Result<(Denoiser, Vec<f64>)> {
    if latents.is_empty() || latents.len() != conds.len() {
        return Err(Error::contract("denoiser training needs matching, non-empty latents and captions"));
    }
    let shape: [usize; 3] = latents[0]
        .shape()
        .try_into()
        .map_err(|_| Error::shape("train_denoiser", format!("latent {:?}", latents[0].shape())))?;
    let text_dim = conds[0].shape()[1];
    let mut model = Denoiser::new(config.clone(), shape, text_dim, schedule.steps(), seed)?;
    let mut rng = seeded(seed ^ 0xd1ff);
    let mut opt = Adam::new(&model.params, opts.lr);
    let mut order: Vec<usize> = (0..latents.len()).collect();
    let mut history = Vec::new();

    struct Sample<'a> {
        z: &'a Tensor,
        c: &'a Tensor,
        t: usize,
        eps: Tensor,
    }

    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch.max(1)) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| Sample {
                    z: &latents[i],
                    c: &conds[i],
                    t: rng.gen_range(1..=schedule.steps()),
                    eps: Tensor::randn(&shape, 1.0, &mut rng),
                })
                .collect();
            let m = &model;
            let (loss, grads) = nn::batch_gradient(&model.params, &batch, |tape, p, s| {
                let z_t = forward_diffuse(s.z, schedule, s.t, &s.eps)?;
                let z_t = tape.constant(z_t);
                let c = tape.constant(s.c.clone());
                let target = tape.constant(s.eps.clone());
                let (pred, _) = m.forward(tape, p, z_t, s.t, c)?;
                tape.mse(pred, target)
            })?;
            if !loss.is_finite() {
                return Err(Error::numeric("train_denoiser", format!("loss diverged in epoch {epoch}")));
            }
            history.push(loss);
            opt.step(&mut model.params, &grads);
        }
    }
    Ok((model, history))
}

/// Trains on the training split: latents from `autoencoder`, conditioning from
/// `text` applied to the captions.
pub fn train_denoiser(
    dataset: &Dataset,
    autoencoder: &LatentAutoencoder,
    text: &TextEncoder,
    schedule: &NoiseSchedule,
    config: &DenoiserConfig,
    opts: &DenoiserTraining,
    seed: u64,
) -> Result<(Denoiser, Vec<f64>)> {
    let latents = crate::exec::map(&dataset.train, |&i| autoencoder.encode(&dataset.stimuli[i].image))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let conds = dataset
        .train
        .iter()
        .map(|&i| text.encode(&dataset.stimuli[i].caption))
        .collect::<Result<Vec<_>>>()?;
    train_denoiser_on(&latents, &conds, schedule, config, opts, seed)
}

/// Attention weights of a value-only forward, for inspection.
pub fn attention_rows_sum(weights: &Tensor) -> Vec<f64> {
    let (r, c) = (weights.shape()[0], weights.shape()[1]);
    (0..r).map(|i| weights.data()[i * c..(i + 1) * c].iter().sum()).collect()
}

#[doc(hidden)]
pub fn softmax_rows(t: &Tensor) -> Tensor {
    softmax_values(t, t.rank() - 1)
}
