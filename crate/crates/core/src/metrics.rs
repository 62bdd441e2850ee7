//! Image-pair metrics (embedding cosine, SSIM, pixel correlation) and the
//! Fréchet distance between embedding sets.

use serde::{Deserialize, Serialize};

use crate::decoder::pearson_flagged;
use crate::encoders::VisualEncoder;
use crate::error::{Error, Result};
use crate::linalg::{sqrtm_psd, symmetric_eigen};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "{op}: image shapes differ, {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Cosine similarity and a flag set when either vector has zero norm (value 0).
pub fn cosine_flagged(a: &[f64], b: &[f64]) -> Result<(f64, bool)> {
    if a.len() != b.len() {
        return Err(Error::contract("cosine length mismatch"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok((0.0, true));
    }
    Ok(((dot / (na * nb)).clamp(-1.0, 1.0), false))
}

/// Cosine of the final pooled embeddings.
pub fn clip_similarity(a: &Tensor, b: &Tensor, encoder: &VisualEncoder) -> Result<f64> {
    same_shape("clip_similarity", a, b)?;
    let (ea, eb) = (encoder.embed(a)?, encoder.embed(b)?);
    cosine_flagged(ea.data(), eb.data()).map(|(v, _)| v)
}

/// Channel mean of a `[C, H, W]` image, row-major `[H, W]`.
pub fn grayscale(img: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    if img.rank() != 3 {
        return Err(Error::shape("grayscale", format!("expected [C, H, W], got {:?}", img.shape())));
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let plane = h * w;
    let mut g = vec![0.0; plane];
    for ch in 0..c {
        for (o, v) in g.iter_mut().zip(&img.data()[ch * plane..(ch + 1) * plane]) {
            *o += v;
        }
    }
    g.iter_mut().for_each(|v| *v /= c as f64);
    Ok((g, h, w))
}

/// Mean SSIM over all 8×8 windows (stride 1) of the grayscale images, with
/// population statistics and dynamic range 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (ga, h, w) = grayscale(a)?;
    let (gb, _, _) = grayscale(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - SSIM_WINDOW {
        for c in 0..=w - SSIM_WINDOW {
            let (mut sa, mut sb) = (0.0, 0.0);
            for i in r..r + SSIM_WINDOW {
                for j in c..c + SSIM_WINDOW {
                    sa += ga[i * w + j];
                    sb += gb[i * w + j];
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in r..r + SSIM_WINDOW {
                for j in c..c + SSIM_WINDOW {
                    let (da, db) = (ga[i * w + j] - ma, gb[i * w + j] - mb);
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Pearson correlation over flattened pixels; 0 when either image is constant.
pub fn pixel_pcc(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("pixel_pcc", a, b)?;
    pearson_flagged(a.data(), b.data()).map(|(r, _)| r)
}

/// Nearest-neighbour resize of `[C, H, W]` to `[C, size, size]`.
pub fn resize_nearest(img: &Tensor, size: usize) -> Result<Tensor> {
    if img.rank() != 3 || size == 0 {
        return Err(Error::shape("resize", format!("cannot resize {:?} to {size}", img.shape())));
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if h == size && w == size {
        return Ok(img.clone());
    }
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for i in 0..size {
            let si = i * h / size;
            for j in 0..size {
                let sj = j * w / size;
                out.push(img.data()[(ch * h + si) * w + sj]);
            }
        }
    }
    Tensor::new([c, size, size], out)
}

fn moments(set: &[Tensor]) -> (Vec<f64>, Vec<f64>) {
    let (n, e) = (set.len(), set[0].len());
    let mut mean = vec![0.0; e];
    for x in set {
        for (m, v) in mean.iter_mut().zip(x.data()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; e * e];
    for x in set {
        let d: Vec<f64> = x.data().iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..e {
            for j in i..e {
                cov[i * e + j] += d[i] * d[j];
            }
        }
    }
    for i in 0..e {
        for j in i..e {
            let v = cov[i * e + j] / (n - 1) as f64;
            cov[i * e + j] = v;
            cov[j * e + i] = v;
        }
    }
    (mean, cov)
}

/// Fréchet distance between Gaussian fits of two embedding sets (unbiased
/// covariance). `Tr((Σ_a Σ_b)^{1/2})` is taken as `Tr((Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})`
/// with negative eigenvalues clamped to 0.
pub fn fid_embeddings(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    let e = a.first().map(Tensor::len).unwrap_or(0);
    if e == 0 || a.iter().chain(b).any(|t| t.len() != e) {
        return Err(Error::contract("fid: embeddings must be non-empty and of equal length"));
    }
    if a.len() < e + 1 || b.len() < e + 1 {
        return Err(Error::contract(format!(
            "fid: each set needs at least {} embeddings, got {} and {}",
            e + 1,
            a.len(),
            b.len()
        )));
    }
    let (ma, sa) = moments(a);
    let (mb, sb) = moments(b);
    let root = sqrtm_psd(&sa, e);
    let inner = Tensor::new([e, e], root.clone())?.matmul(&Tensor::new([e, e], sb.clone())?)?;
    let prod = inner.matmul(&Tensor::new([e, e], root)?)?;
    let p = prod.data();
    let sym: Vec<f64> = (0..e * e)
        .map(|k| {
            let (i, j) = (k / e, k % e);
            0.5 * (p[i * e + j] + p[j * e + i])
        })
        .collect();
    let (vals, _) = symmetric_eigen(&sym, e);
    let tr_sqrt: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dmu: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum();
    let trace: f64 = (0..e).map(|i| sa[i * e + i] + sb[i * e + i]).sum();
    Ok((dmu + trace - 2.0 * tr_sqrt).max(0.0))
}

/// FID on the encoder's final embeddings of two image sets.
pub fn fid(a: &[Tensor], b: &[Tensor], encoder: &VisualEncoder) -> Result<f64> {
    let need = encoder.embed_dim() + 1;
    if a.len() < need || b.len() < need {
        return Err(Error::contract(format!(
            "fid: each set needs at least {need} images, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let ea = crate::exec::map(a, |x| encoder.embed(x)).into_iter().collect::<Result<Vec<_>>>()?;
    let eb = crate::exec::map(b, |x| encoder.embed(x)).into_iter().collect::<Result<Vec<_>>>()?;
    fid_embeddings(&ea, &eb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub item: usize,
    pub clip_sim: f64,
    pub ssim: f64,
    pub pcc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub items: Vec<ItemMetrics>,
    pub mean_clip_sim: f64,
    pub mean_ssim: f64,
    pub mean_pcc: f64,
    pub fid: Option<f64>,
    /// Why `fid` is absent, when it is.
    pub fid_note: Option<String>,
    pub image_size: usize,
    pub encoder_seed: u64,
}

/// Scores `(item, stimulus, reconstruction)` triples. Reconstructions are
/// resized to the stimulus size when they differ.
pub fn evaluate(
    pairs: &[(usize, &Tensor, &Tensor)],
    encoder: &VisualEncoder,
    encoder_seed: u64,
) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::contract("evaluate needs at least one pair"));
    }
    let size = pairs[0].1.shape().get(1).copied().unwrap_or(0);
    let items = crate::exec::map(pairs, |&(item, stim, recon)| -> Result<ItemMetrics> {
        let stim = resize_nearest(stim, size)?;
        let recon = resize_nearest(recon, size)?;
        Ok(ItemMetrics {
            item,
            clip_sim: clip_similarity(&stim, &recon, encoder)?,
            ssim: ssim(&stim, &recon)?,
            pcc: pixel_pcc(&stim, &recon)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = items.len() as f64;
    let mean = |f: fn(&ItemMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
    let (fid_value, fid_note) = if pairs.len() > encoder.embed_dim() {
        let stims: Vec<Tensor> = pairs.iter().map(|p| resize_nearest(p.1, size)).collect::<Result<_>>()?;
        let recons: Vec<Tensor> = pairs.iter().map(|p| resize_nearest(p.2, size)).collect::<Result<_>>()?;
        (Some(fid(&stims, &recons, encoder)?), None)
    } else {
        (
            None,
            Some(format!(
                "needs at least {} images per set, have {}",
                encoder.embed_dim() + 1,
                pairs.len()
            )),
        )
    };
    Ok(MetricsReport {
        mean_clip_sim: mean(|m| m.clip_sim),
        mean_ssim: mean(|m| m.ssim),
        mean_pcc: mean(|m| m.pcc),
        items,
        fid: fid_value,
        fid_note,
        image_size: size,
        encoder_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn noise_image(seed: u64) -> Tensor {
        Tensor::uniform(&[3, 12, 12], 0.0, 1.0, &mut seeded(seed))
    }

    #[test]
    fn identical_images() {
        let a = noise_image(1);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((pixel_pcc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = a.map(|v| 1.0 - v);
        assert!((pixel_pcc(&a, &inv).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_patch_ssim() {
        let a = Tensor::full(&[3, 8, 8], 0.2);
        let b = Tensor::full(&[3, 8, 8], 0.8);
        let want = (2.0 * 0.2 * 0.8 + C1) * C2 / ((0.04 + 0.64 + C1) * C2);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
        assert!(ssim(&Tensor::zeros(&[3, 7, 9]), &Tensor::zeros(&[3, 7, 9])).is_err());
    }

    #[test]
    fn degenerate_inputs() {
        let a = Tensor::full(&[3, 8, 8], 0.5);
        let b = Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut seeded(2));
        assert_eq!(pixel_pcc(&a, &b).unwrap(), 0.0);
        assert_eq!(cosine_flagged(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), (0.0, true));
        assert!((cosine_flagged(&[1.0, -2.0], &[-1.0, 2.0]).unwrap().0 + 1.0).abs() < 1e-15);
    }

    #[test]
    fn resize_nearest_picks_sources() {
        let img = Tensor::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let big = resize_nearest(&img, 4).unwrap();
        assert_eq!(&big.data()[..8], &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        assert_eq!(resize_nearest(&big, 2).unwrap(), img);
    }

    #[test]
    fn fid_needs_enough_samples() {
        let set: Vec<Tensor> = (0..3).map(|i| Tensor::from_vec(vec![i as f64, 1.0, 0.0])).collect();
        assert!(fid_embeddings(&set, &set).is_err());
    }
}
