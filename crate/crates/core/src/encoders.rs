//! Fixed and trained feature extractors: a token-embedding text encoder, a
//! seeded random convolutional visual encoder with a pooled embedding head,
//! and a convolutional latent autoencoder.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{self, Adam, Params};
use crate::rng::seeded;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub max_tokens: usize,
    /// `[vocab, dim]`
    pub table: Tensor,
}

impl TextEncoder {
    pub fn new(vocab: usize, dim: usize, max_tokens: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        Self {
            max_tokens,
            table: Tensor::randn(&[vocab, dim], 1.0, &mut rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    /// Stacked token embeddings, zero rows past the caption: `[max_tokens, dim]`.
    pub fn encode(&self, tokens: &[usize]) -> Result<Tensor> {
        if tokens.len() > self.max_tokens {
            return Err(Error::contract(format!(
                "caption has {} tokens, limit is {}",
                tokens.len(),
                self.max_tokens
            )));
        }
        let e = self.dim();
        let mut out = vec![0.0; self.max_tokens * e];
        for (row, &tok) in tokens.iter().enumerate() {
            if tok >= self.vocab() {
                return Err(Error::contract(format!("unknown token id {tok}")));
            }
            out[row * e..(row + 1) * e].copy_from_slice(&self.table.data()[tok * e..(tok + 1) * e]);
        }
        Tensor::new([self.max_tokens, e], out)
    }

    /// Mean of the caption's token embeddings, `[dim]`.
    pub fn sentence(&self, tokens: &[usize]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::contract("empty caption"));
        }
        let rows = self.encode(tokens)?;
        let e = self.dim();
        let mut out = vec![0.0; e];
        for r in 0..tokens.len() {
            for (o, v) in out.iter_mut().zip(&rows.data()[r * e..(r + 1) * e]) {
                *o += v / tokens.len() as f64;
            }
        }
        Tensor::new([e], out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        }
    }

    fn out_extent(&self, h: usize) -> usize {
        (h + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisualConfig {
    pub layers: Vec<ConvSpec>,
    pub embed_dim: usize,
}

impl Default for VisualConfig {
    fn default() -> Self {
        Self {
            layers: vec![
                ConvSpec::new(3, 4, 3, 2, 1),
                ConvSpec::new(4, 8, 3, 1, 1),
                ConvSpec::new(8, 8, 3, 2, 1),
                ConvSpec::new(8, 16, 3, 2, 1),
                ConvSpec::new(16, 32, 3, 2, 1),
                ConvSpec::new(32, 64, 3, 1, 1),
            ],
            embed_dim: 32,
        }
    }
}

/// Random-weight convolutional feature pyramid. Layer `i` (1-based) is the
/// activation after the i-th convolution; the embedding is a linear head on
/// the spatial means of all layers, concatenated. The head starts random and
/// can be fitted to caption embeddings with [`VisualEncoder::fit_head`].
#[derive(Clone, Debug, PartialEq)]
pub struct VisualEncoder {
    pub config: VisualConfig,
    params: Params,
}

impl VisualEncoder {
    pub fn new(config: VisualConfig, seed: u64) -> Result<Self> {
        if config.layers.is_empty() || config.layers[0].c_in != 3 {
            return Err(Error::Config("visual encoder needs layers starting from 3 channels".into()));
        }
        if config.layers.windows(2).any(|w| w[0].c_out != w[1].c_in) {
            return Err(Error::Config("visual encoder channel counts do not chain".into()));
        }
        let mut rng = seeded(seed);
        let mut params = Params::new();
        for (i, l) in config.layers.iter().enumerate() {
            params.push(format!("conv{}.w", i + 1), nn::conv_weight(l.c_out, l.c_in, l.kernel, &mut rng));
            params.push(format!("conv{}.b", i + 1), Tensor::zeros(&[l.c_out]));
        }
        let pooled: usize = config.layers.iter().map(|l| l.c_out).sum();
        params.push("head.w", nn::dense_weight(pooled, config.embed_dim, &mut rng));
        Ok(Self { config, params })
    }

    pub fn layer_count(&self) -> usize {
        self.config.layers.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Flattened feature length of each layer for a square image of side `size`.
    pub fn layer_dims(&self, size: usize) -> Vec<usize> {
        let mut h = size;
        self.config
            .layers
            .iter()
            .map(|l| {
                h = l.out_extent(h);
                l.c_out * h * h
            })
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.bind(tape, false)
    }

    fn check_layers(&self, layers: &BTreeSet<usize>) -> Result<()> {
        if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > self.layer_count()) {
            return Err(Error::contract(format!(
                "layer {bad} outside 1..={}",
                self.layer_count()
            )));
        }
        Ok(())
    }

    /// Runs the conv stack on the tape up to `depth` layers, returning every
    /// activation in `[C, H, W]` form.
    pub fn forward(&self, tape: &mut Tape, weights: &[Var], image: Var, depth: usize) -> Result<Vec<Var>> {
        let mut acts = Vec::with_capacity(depth);
        let mut h = image;
        for (i, l) in self.config.layers.iter().take(depth).enumerate() {
            let pre = tape.conv2d(h, weights[2 * i], Some(weights[2 * i + 1]), l.stride, l.pad)?;
            h = tape.leaky_relu(pre, LEAKY_SLOPE)?;
            acts.push(h);
        }
        Ok(acts)
    }

    /// Flattened activations for the requested layers.
    pub fn features(
        &self,
        tape: &mut Tape,
        weights: &[Var],
        image: Var,
        layers: &BTreeSet<usize>,
    ) -> Result<BTreeMap<usize, Var>> {
        self.check_layers(layers)?;
        let Some(&depth) = layers.iter().next_back() else {
            return Ok(BTreeMap::new());
        };
        let acts = self.forward(tape, weights, image, depth)?;
        let mut out = BTreeMap::new();
        for &l in layers {
            let n = tape.value(acts[l - 1]).len();
            out.insert(l, tape.reshape(acts[l - 1], &[n])?);
        }
        Ok(out)
    }

    fn pooled_var(&self, tape: &mut Tape, weights: &[Var], image: Var) -> Result<Var> {
        let acts = self.forward(tape, weights, image, self.layer_count())?;
        let mut pooled = Vec::with_capacity(acts.len());
        for a in acts {
            let s = tape.shape(a).to_vec();
            let flat = tape.reshape(a, &[s[0], s[1] * s[2]])?;
            pooled.push(tape.mean_axis(flat, 1)?);
        }
        tape.concat(&pooled, 0)
    }

    pub fn embedding_var(&self, tape: &mut Tape, weights: &[Var], image: Var) -> Result<Var> {
        let joined = self.pooled_var(tape, weights, image)?;
        let n = tape.shape(joined)[0];
        let row = tape.reshape(joined, &[1, n])?;
        let emb = tape.matmul(row, weights[2 * self.layer_count()])?;
        tape.reshape(emb, &[self.config.embed_dim])
    }

    /// Spatial means of every layer, concatenated.
    pub fn pooled(&self, image: &Tensor) -> Result<Tensor> {
        check_image(image)?;
        let mut tape = Tape::new();
        let w = self.bind(&mut tape);
        let img = tape.constant(image.clone());
        let p = self.pooled_var(&mut tape, &w, img)?;
        Ok(tape.value(p).clone())
    }

    /// Ridge fit of the head so that `embed(images[i]) ≈ targets[i]`. The
    /// penalty is `lambda` times the mean diagonal of the Gram matrix.
    pub fn fit_head(&mut self, images: &[Tensor], targets: &[Tensor], lambda: f64) -> Result<()> {
        if images.len() != targets.len() || images.is_empty() {
            return Err(Error::contract("fit_head needs one target per image"));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("head penalty must be positive, got {lambda}")));
        }
        let e = self.embed_dim();
        if let Some(t) = targets.iter().find(|t| t.shape() != [e]) {
            return Err(Error::shape("fit_head", format!("target {:?}, embedding [{e}]", t.shape())));
        }
        let feats = crate::exec::map(images, |im| self.pooled(im))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let p = feats[0].len();
        let mut gram = vec![0.0; p * p];
        let mut rhs = vec![0.0; p * e];
        for (f, t) in feats.iter().zip(targets) {
            let (f, t) = (f.data(), t.data());
            for i in 0..p {
                for j in 0..p {
                    gram[i * p + j] += f[i] * f[j];
                }
                for k in 0..e {
                    rhs[i * e + k] += f[i] * t[k];
                }
            }
        }
        let ridge = lambda * (0..p).map(|i| gram[i * p + i]).sum::<f64>() / p as f64;
        for i in 0..p {
            gram[i * p + i] += ridge.max(f64::MIN_POSITIVE);
        }
        let mut w = vec![0.0; p * e];
        for k in 0..e {
            let b: Vec<f64> = (0..p).map(|i| rhs[i * e + k]).collect();
            let x = crate::linalg::cholesky_solve(gram.clone(), &b, p)
                .or_else(|| crate::linalg::lu_solve(gram.clone(), &b, p))
                .ok_or_else(|| Error::numeric("fit_head", "singular Gram matrix"))?;
            for i in 0..p {
                w[i * e + k] = x[i];
            }
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("fit_head", "non-finite head weights"));
        }
        let head = self.params.len() - 1;
        self.params.tensors_mut()[head] = Tensor::new([p, e], w)?;
        Ok(())
    }

    /// Forward pass returning the requested flattened layer activations.
    pub fn encode_visual(&self, image: &Tensor, layers: &BTreeSet<usize>) -> Result<BTreeMap<usize, Tensor>> {
        check_image(image)?;
        let mut tape = Tape::new();
        let w = self.bind(&mut tape);
        let img = tape.constant(image.clone());
        let feats = self.features(&mut tape, &w, img, layers)?;
        Ok(feats.into_iter().map(|(l, v)| (l, tape.value(v).clone())).collect())
    }

    /// Final pooled embedding, `[embed_dim]`.
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        check_image(image)?;
        let mut tape = Tape::new();
        let w = self.bind(&mut tape);
        let img = tape.constant(image.clone());
        let e = self.embedding_var(&mut tape, &w, img)?;
        Ok(tape.value(e).clone())
    }
}

fn check_image(image: &Tensor) -> Result<()> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::shape("image", format!("expected [3, H, W], got {:?}", image.shape())));
    }
    if image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::contract("image values must lie in [0, 1]"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub width: usize,
    pub latent_channels: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            width: 16,
            latent_channels: 4,
        }
    }
}

/// Conv autoencoder with a 4× spatial reduction. Latents are rescaled to unit
/// variance over the training set so the diffusion schedule sees standard-scale
/// inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentAutoencoder {
    pub config: AutoencoderConfig,
    pub latent_scale: f64,
    params: Params,
}

const ENC_PARAMS: usize = 6;

impl LatentAutoencoder {
    pub fn new(config: AutoencoderConfig, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let (w, c) = (config.width, config.latent_channels);
        let mut p = Params::new();
        p.push("enc1.w", nn::conv_weight(w, 3, 4, &mut rng));
        p.push("enc1.b", Tensor::zeros(&[w]));
        p.push("enc2.w", nn::conv_weight(w, w, 3, &mut rng));
        p.push("enc2.b", Tensor::zeros(&[w]));
        p.push("enc3.w", nn::conv_weight(c, w, 4, &mut rng).map(|v| v * 0.5));
        p.push("enc3.b", Tensor::zeros(&[c]));
        p.push("dec1.w", nn::conv_weight(w, c, 3, &mut rng));
        p.push("dec1.b", Tensor::zeros(&[w]));
        p.push("dec2.w", nn::conv_weight(w, w, 3, &mut rng));
        p.push("dec2.b", Tensor::zeros(&[w]));
        p.push("dec3.w", nn::conv_weight(3, w, 3, &mut rng).map(|v| v * 0.5));
        p.push("dec3.b", Tensor::zeros(&[3]));
        Self {
            config,
            latent_scale: 1.0,
            params: p,
        }
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn latent_shape(&self, image_size: usize) -> [usize; 3] {
        [self.config.latent_channels, image_size / 4, image_size / 4]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.bind(tape, trainable)
    }

    fn encode_raw(tape: &mut Tape, p: &[Var], image: Var) -> Result<Var> {
        let h = tape.conv2d(image, p[0], Some(p[1]), 2, 1)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = tape.conv2d(h, p[2], Some(p[3]), 1, 1)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        tape.conv2d(h, p[4], Some(p[5]), 2, 1)
    }

    fn decode_raw(tape: &mut Tape, p: &[Var], latent: Var) -> Result<Var> {
        let p = &p[ENC_PARAMS..];
        let h = tape.conv2d(latent, p[0], Some(p[1]), 1, 1)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = tape.upsample(h, 2)?;
        let h = tape.conv2d(h, p[2], Some(p[3]), 1, 1)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = tape.upsample(h, 2)?;
        tape.conv2d(h, p[4], Some(p[5]), 1, 1)
    }

    /// Scaled latent on the tape.
    pub fn encode_var(&self, tape: &mut Tape, p: &[Var], image: Var) -> Result<Var> {
        let raw = Self::encode_raw(tape, p, image)?;
        tape.scale(raw, self.latent_scale)
    }

    /// Unclamped reconstruction from a scaled latent.
    pub fn decode_var(&self, tape: &mut Tape, p: &[Var], latent: Var) -> Result<Var> {
        let raw = tape.scale(latent, 1.0 / self.latent_scale)?;
        Self::decode_raw(tape, p, raw)
    }

    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        check_image(image)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let z = self.encode_var(&mut tape, &p, x)?;
        Ok(tape.value(z).clone())
    }

    /// Decoded image clamped to `[0, 1]`.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let z = tape.constant(latent.clone());
        let y = self.decode_var(&mut tape, &p, z)?;
        Ok(tape.value(y).map(|v| v.clamp(0.0, 1.0)))
    }

    /// Mean per-image MSE of `decode(encode(image))`.
    pub fn reconstruction_mse(&self, images: &[Tensor]) -> Result<f64> {
        let errs = crate::exec::map(images, |img| -> Result<f64> {
            let r = self.decode(&self.encode(img)?)?;
            Ok(r.zip_map(img, |a, b| (a - b) * (a - b))?.mean())
        });
        let mut total = 0.0;
        for e in errs {
            total += e?;
        }
        Ok(total / images.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            "autoencoder",
            json!({ "config": self.config, "latent_scale": self.latent_scale }),
            self.params.clone().into_pairs(),
        )
    }

    pub fn from_checkpoint(ck: Checkpoint, path: &Path) -> Result<Self> {
        let ck = ck.expect_kind("autoencoder", path)?;
        let config: AutoencoderConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let latent_scale = ck.meta["latent_scale"]
            .as_f64()
            .ok_or_else(|| Error::format(path, "missing latent_scale"))?;
        let template = Self::new(config.clone(), 0);
        let params = Params::from_pairs_like(&template.params, ck.tensors)?;
        Ok(Self {
            config,
            latent_scale,
            params,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for AutoencoderTraining {
    fn default() -> Self {
        Self {
            epochs: 12,
            lr: 3e-3,
            batch: 16,
        }
    }
}

/// MSE-trains an autoencoder on `images` with Adam; returns it with the mean
/// training loss of every epoch.
pub fn train_autoencoder(
    images: &[Tensor],
    config: &AutoencoderConfig,
    opts: &AutoencoderTraining,
    seed: u64,
) -> Result<(LatentAutoencoder, Vec<f64>)> {
    if images.is_empty() {
        return Err(Error::contract("autoencoder training needs images"));
    }
    for img in images {
        check_image(img)?;
    }
    let mut ae = LatentAutoencoder::new(config.clone(), seed);
    let mut rng = seeded(seed ^ 0x5eed);
    let mut opt = Adam::new(&ae.params, opts.lr);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(opts.batch.max(1)) {
            let batch: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
            let (loss, grads) = nn::batch_gradient(&ae.params, &batch, |tape, p, img| {
                let x = tape.constant((*img).clone());
                let z = LatentAutoencoder::encode_raw(tape, p, x)?;
                let y = LatentAutoencoder::decode_raw(tape, p, z)?;
                tape.mse(y, x)
            })?;
            if !loss.is_finite() {
                return Err(Error::numeric("train_autoencoder", format!("loss diverged in epoch {epoch}")));
            }
            total += loss * chunk.len() as f64;
            opt.step(&mut ae.params, &grads);
        }
        history.push(total / images.len() as f64);
    }
    ae.latent_scale = fit_latent_scale(&ae, images)?;
    Ok((ae, history))
}

fn fit_latent_scale(ae: &LatentAutoencoder, images: &[Tensor]) -> Result<f64> {
    let mut probe = ae.clone();
    probe.latent_scale = 1.0;
    let lat = crate::exec::map(images, |img| probe.encode(img));
    let (mut s, mut ss, mut n) = (0.0, 0.0, 0.0);
    for l in lat {
        for &v in l?.data() {
            s += v;
            ss += v * v;
            n += 1.0;
        }
    }
    let var = ss / n - (s / n).powi(2);
    if var <= 0.0 || !var.is_finite() {
        return Err(Error::numeric("train_autoencoder", "latents have zero variance"));
    }
    Ok(1.0 / var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_encoding_contract() {
        let enc = TextEncoder::new(16, 32, 8, 1);
        let empty = enc.encode(&[]).unwrap();
        assert_eq!(empty.shape(), &[8, 32]);
        assert!(empty.data().iter().all(|&v| v == 0.0));
        assert_eq!(enc.encode(&[1, 2, 3]).unwrap(), enc.encode(&[1, 2, 3]).unwrap());
        let a = enc.encode(&[1, 2, 3]).unwrap();
        let b = enc.encode(&[1, 5, 3]).unwrap();
        for row in 0..8 {
            let same = a.data()[row * 32..(row + 1) * 32] == b.data()[row * 32..(row + 1) * 32];
            assert_eq!(same, row != 1, "row {row}");
        }
        assert!(enc.encode(&[99]).is_err());
        assert!(enc.encode(&[0; 9]).is_err());
    }

    #[test]
    fn visual_layer_contracts() {
        let enc = VisualEncoder::new(VisualConfig::default(), 3).unwrap();
        let img = Tensor::full(&[3, 32, 32], 0.25);
        assert!(enc.encode_visual(&img, &BTreeSet::new()).unwrap().is_empty());
        let layers: BTreeSet<usize> = [1, 3].into();
        let a = enc.encode_visual(&img, &layers).unwrap();
        assert_eq!(a, enc.encode_visual(&img, &layers).unwrap());
        let dims = enc.layer_dims(32);
        assert_eq!(a[&1].len(), dims[0]);
        assert_eq!(a[&3].len(), dims[2]);
        assert!(enc.encode_visual(&img, &[7].into()).is_err());
        assert!(enc.encode_visual(&img, &[0].into()).is_err());
        assert_eq!(enc.embed(&img).unwrap().len(), 32);
        assert!(enc.embed(&Tensor::full(&[3, 32, 32], 1.5)).is_err());
    }

    #[test]
    fn fitted_head_recovers_a_linear_target() {
        let mut enc = VisualEncoder::new(VisualConfig::default(), 5).unwrap();
        let mut rng = seeded(9);
        let images: Vec<Tensor> = (0..200).map(|_| Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng)).collect();
        let pooled: usize = enc.config.layers.iter().map(|l| l.c_out).sum();
        let w = Tensor::randn(&[pooled, enc.embed_dim()], 1.0, &mut rng);
        let targets: Vec<Tensor> = images
            .iter()
            .map(|im| {
                let p = enc.pooled(im).unwrap().reshape(&[1, pooled]).unwrap();
                p.matmul(&w).unwrap().reshape(&[enc.embed_dim()]).unwrap()
            })
            .collect();
        enc.fit_head(&images, &targets, 1e-9).unwrap();
        let got = enc.embed(&images[3]).unwrap();
        let err = got.zip_map(&targets[3], |a, b| a - b).unwrap().norm() / targets[3].norm();
        assert!(err < 1e-3, "relative error {err}");
        assert!(enc.fit_head(&images, &targets[..3], 1e-3).is_err());
        assert!(enc.fit_head(&images, &targets, 0.0).is_err());
    }

    #[test]
    fn autoencoder_checkpoint_round_trip() {
        let mut ae = LatentAutoencoder::new(AutoencoderConfig::default(), 4);
        ae.latent_scale = 1.7;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ae.ckpt");
        ae.to_checkpoint().save(&p).unwrap();
        let back = LatentAutoencoder::from_checkpoint(Checkpoint::load(&p).unwrap(), &p).unwrap();
        assert_eq!(back, ae);
    }

    #[test]
    fn zero_epochs_keeps_init() {
        let img = Tensor::full(&[3, 16, 16], 0.5);
        let opts = AutoencoderTraining { epochs: 0, ..Default::default() };
        let (ae, hist) = train_autoencoder(std::slice::from_ref(&img), &AutoencoderConfig::default(), &opts, 9).unwrap();
        assert!(hist.is_empty());
        let mut init = LatentAutoencoder::new(AutoencoderConfig::default(), 9);
        init.latent_scale = ae.latent_scale;
        assert_eq!(ae.params(), init.params());
        assert_eq!(
            ae.reconstruction_mse(std::slice::from_ref(&img)).unwrap(),
            init.reconstruction_mse(std::slice::from_ref(&img)).unwrap()
        );
        assert!(train_autoencoder(&[], &AutoencoderConfig::default(), &opts, 9).is_err());
    }
}
