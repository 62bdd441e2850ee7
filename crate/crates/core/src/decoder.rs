//! Voxel-to-feature decoding: per-target correlation-based voxel selection
//! followed by L2-regularized least squares, contiguous k-fold accuracy maps
//! and top-k% feature selection.

use std::ops::Range;
use std::path::Path;

use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{cholesky_solve, lu_solve};
use crate::tensor::{kernels, Tensor};

/// Sample Pearson correlation. Returns `(r, degenerate)`; a zero-variance
/// input yields `(0.0, true)`.
pub fn pearson_flagged(a: &[f64], b: &[f64]) -> Result<(f64, bool)> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "pearson length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::contract("pearson needs at least two samples"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    // relative threshold: constant vectors leave only rounding residue
    let tiny = |s: f64, m: f64| s <= 1e-24 * n * (1.0 + m * m);
    if tiny(saa, ma) || tiny(sbb, mb) {
        return Ok((0.0, true));
    }
    Ok(((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0), false))
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    pearson_flagged(a, b).map(|(r, _)| r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetFit {
    /// Selected voxel indices, ascending.
    pub voxels: Vec<usize>,
    /// Weights over the standardized selected voxels.
    pub weights: Vec<f64>,
    pub bias: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RidgeModel {
    pub lambda: f64,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub targets: Vec<TargetFit>,
}

fn column_stats(x: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(&x[r * d..(r + 1) * d]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for r in 0..n {
        for ((s, &v), &m) in var.iter_mut().zip(&x[r * d..(r + 1) * d]).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .iter()
        .zip(&mean)
        .map(|(&s, &m)| {
            let sd = (s / n as f64).sqrt();
            // constant columns standardize to zero
            if sd <= 1e-12 * (1.0 + m.abs()) {
                f64::INFINITY
            } else {
                sd
            }
        })
        .collect();
    (mean, std)
}

/// Indices of the `k` largest scores, ties to the lower index, returned ascending.
fn top_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Fits one ridge regression per column of `y` (`[N, D_t]`) from `x` (`[N, D_x]`).
///
/// Inputs are standardized with training statistics. For each target the
/// `voxels_per_target` voxels with the largest |correlation| are kept and
/// `w = (XₛᵀXₛ + λI)⁻¹ Xₛᵀ y` is solved on centered data; the bias restores the
/// target mean.
pub fn fit_ridge(x: &Tensor, y: &Tensor, lambda: f64, voxels_per_target: usize) -> Result<RidgeModel> {
    if x.rank() != 2 || y.rank() != 2 || x.shape()[0] != y.shape()[0] {
        return Err(Error::shape(
            "fit_ridge",
            format!("x {:?} y {:?}", x.shape(), y.shape()),
        ));
    }
    let (n, d, t) = (x.shape()[0], x.shape()[1], y.shape()[1]);
    if n < 2 {
        return Err(Error::contract("fit_ridge needs at least two samples"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::contract(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if voxels_per_target == 0 || voxels_per_target > d {
        return Err(Error::contract(format!(
            "voxels_per_target {voxels_per_target} outside 1..={d}"
        )));
    }

    let (mean, std) = column_stats(x.data(), n, d);
    let mut xn = x.data().to_vec();
    for r in 0..n {
        for j in 0..d {
            let v = &mut xn[r * d + j];
            *v = (*v - mean[j]) / std[j];
        }
    }
    let (ymean, _) = column_stats(y.data(), n, t);
    let mut yc = y.data().to_vec();
    for r in 0..n {
        for j in 0..t {
            yc[r * t + j] -= ymean[j];
        }
    }
    // cross[j, t] = Σ_r xn[r, j] yc[r, t]; ranks voxels like |pearson| does
    let mut cross = vec![0.0; d * t];
    kernels::matmul_at(&xn, &yc, &mut cross, n, d, t);
    let mut gram = vec![0.0; d * d];
    kernels::matmul_at(&xn, &xn, &mut gram, n, d, d);

    let targets = exec::try_map_range(t, |ti| -> Result<TargetFit> {
        let scores: Vec<f64> = (0..d).map(|j| cross[j * t + ti].abs()).collect();
        let sel = top_indices(&scores, voxels_per_target);
        let k = sel.len();
        let mut a = vec![0.0; k * k];
        for (p, &i) in sel.iter().enumerate() {
            for (q, &j) in sel.iter().enumerate() {
                a[p * k + q] = gram[i * d + j];
            }
            a[p * k + p] += lambda;
        }
        let b: Vec<f64> = sel.iter().map(|&j| cross[j * t + ti]).collect();
        let w = cholesky_solve(a.clone(), &b, k)
            .or_else(|| lu_solve(a, &b, k))
            .ok_or_else(|| {
                Error::numeric(
                    "fit_ridge",
                    format!("singular system for target {ti} (lambda {lambda})"),
                )
            })?;
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("fit_ridge", format!("non-finite weights for target {ti}")));
        }
        Ok(TargetFit {
            voxels: sel,
            weights: w,
            bias: ymean[ti],
        })
    })?;

    Ok(RidgeModel {
        lambda,
        input_mean: mean,
        input_std: std,
        targets,
    })
}

impl RidgeModel {
    pub fn inputs(&self) -> usize {
        self.input_mean.len()
    }

    pub fn outputs(&self) -> usize {
        self.targets.len()
    }

    pub fn predict(&self, x: &[f64]) -> Result<Tensor> {
        if x.len() != self.inputs() {
            return Err(Error::contract(format!(
                "predict expects {} voxels, got {}",
                self.inputs(),
                x.len()
            )));
        }
        let out = self
            .targets
            .iter()
            .map(|tf| {
                tf.voxels
                    .iter()
                    .zip(&tf.weights)
                    .map(|(&j, &w)| w * (x[j] - self.input_mean[j]) / self.input_std[j])
                    .sum::<f64>()
                    + tf.bias
            })
            .collect();
        Ok(Tensor::from_vec(out))
    }

    /// Row-wise [`predict`](Self::predict) over `[N, D_x]`.
    pub fn predict_rows(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 {
            return Err(Error::shape("predict_rows", format!("{:?}", x.shape())));
        }
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let mut out = Vec::with_capacity(n * self.outputs());
        for r in 0..n {
            out.extend(self.predict(&x.data()[r * d..(r + 1) * d])?.into_data());
        }
        Tensor::new([n, self.outputs()], out)
    }

    /// Mean |weight| per input voxel across targets; unselected voxels count as 0.
    pub fn mean_abs_weight(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.inputs()];
        for tf in &self.targets {
            for (&j, &w) in tf.voxels.iter().zip(&tf.weights) {
                acc[j] += w.abs();
            }
        }
        let t = self.outputs().max(1) as f64;
        acc.iter_mut().for_each(|v| *v /= t);
        acc
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        let k = self.targets.first().map_or(0, |t| t.voxels.len());
        if self.targets.iter().any(|t| t.voxels.len() != k) || k == 0 {
            return Err(Error::contract("ridge targets have unequal voxel counts"));
        }
        let t = self.outputs();
        let voxels: Vec<f64> = self.targets.iter().flat_map(|f| f.voxels.iter().map(|&v| v as f64)).collect();
        let weights: Vec<f64> = self.targets.iter().flat_map(|f| f.weights.iter().copied()).collect();
        let std: Vec<f64> = self.input_std.iter().map(|&s| if s.is_finite() { s } else { 0.0 }).collect();
        Ok(Checkpoint::new(
            "ridge",
            json!({ "lambda": self.lambda, "voxels_per_target": k, "extra": extra }),
            vec![
                ("input_mean".into(), Tensor::from_vec(self.input_mean.clone())),
                ("input_std".into(), Tensor::from_vec(std)),
                ("voxels".into(), Tensor::new([t, k], voxels)?),
                ("weights".into(), Tensor::new([t, k], weights)?),
                ("bias".into(), Tensor::from_vec(self.targets.iter().map(|f| f.bias).collect())),
            ],
        ))
    }

    pub fn from_checkpoint(mut ck: Checkpoint, path: &Path) -> Result<Self> {
        ck = ck.expect_kind("ridge", path)?;
        let lambda = ck.meta["lambda"]
            .as_f64()
            .ok_or_else(|| Error::format(path, "missing lambda"))?;
        let mean = ck.take("input_mean")?.into_data();
        let std: Vec<f64> = ck
            .take("input_std")?
            .into_data()
            .into_iter()
            .map(|s| if s == 0.0 { f64::INFINITY } else { s })
            .collect();
        let voxels = ck.take("voxels")?;
        let weights = ck.take("weights")?;
        let bias = ck.take("bias")?;
        let (t, k) = (voxels.shape()[0], voxels.shape()[1]);
        if weights.shape() != voxels.shape() || bias.len() != t || std.len() != mean.len() {
            return Err(Error::format(path, "inconsistent ridge tensors"));
        }
        let targets = (0..t)
            .map(|i| -> Result<TargetFit> {
                let vox: Vec<usize> = voxels.data()[i * k..(i + 1) * k].iter().map(|&v| v as usize).collect();
                if vox.iter().any(|&v| v >= mean.len()) {
                    return Err(Error::format(path, "voxel index out of range"));
                }
                Ok(TargetFit {
                    voxels: vox,
                    weights: weights.data()[i * k..(i + 1) * k].to_vec(),
                    bias: bias.data()[i],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            lambda,
            input_mean: mean,
            input_std: std,
            targets,
        })
    }
}

/// Contiguous fold ranges; the first `n % folds` folds are one larger.
pub fn fold_bounds(n: usize, folds: usize) -> Result<Vec<Range<usize>>> {
    if folds < 2 {
        return Err(Error::contract("cross-validation needs at least 2 folds"));
    }
    if folds > n {
        return Err(Error::contract(format!("{folds} folds for {n} samples")));
    }
    let (base, extra) = (n / folds, n % folds);
    let mut start = 0;
    Ok((0..folds)
        .map(|f| {
            let len = base + usize::from(f < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

/// Rows of a `[N, D]` tensor, in the given order.
pub fn select_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let d = x.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(&x.data()[r * d..(r + 1) * d]);
    }
    Tensor::new([rows.len(), d], data)
}

pub fn select_columns(x: &Tensor, cols: &[usize]) -> Result<Tensor> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut data = Vec::with_capacity(n * cols.len());
    for r in 0..n {
        data.extend(cols.iter().map(|&c| x.data()[r * d + c]));
    }
    Tensor::new([n, cols.len()], data)
}

/// Per-dimension Pearson accuracy of k-fold out-of-fold predictions.
pub fn cv_accuracy(x: &Tensor, z: &Tensor, folds: usize, lambda: f64, voxels_per_target: usize) -> Result<Tensor> {
    if x.rank() != 2 || z.rank() != 2 || x.shape()[0] != z.shape()[0] {
        return Err(Error::shape("cv_accuracy", format!("x {:?} z {:?}", x.shape(), z.shape())));
    }
    let (n, dz) = (x.shape()[0], z.shape()[1]);
    let bounds = fold_bounds(n, folds)?;
    let mut pred = vec![0.0; n * dz];
    for fold in &bounds {
        let train: Vec<usize> = (0..n).filter(|i| !fold.contains(i)).collect();
        let held: Vec<usize> = fold.clone().collect();
        let model = fit_ridge(&select_rows(x, &train)?, &select_rows(z, &train)?, lambda, voxels_per_target)?;
        let p = model.predict_rows(&select_rows(x, &held)?)?;
        pred[fold.start * dz..fold.end * dz].copy_from_slice(p.data());
    }
    let acc = (0..dz)
        .map(|j| {
            let a: Vec<f64> = (0..n).map(|r| pred[r * dz + j]).collect();
            let b: Vec<f64> = (0..n).map(|r| z.data()[r * dz + j]).collect();
            pearson(&a, &b)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::from_vec(acc))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSelector {
    pub accuracy: Tensor,
    pub mask: Vec<bool>,
    pub k_percent: f64,
}

/// Keeps `ceil(D·k/100)` dimensions with the highest accuracy, ties to the lower index.
pub fn select_top_k(accuracy: &Tensor, k_percent: f64) -> Result<FeatureSelector> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::contract(format!("k_percent must be in (0, 100], got {k_percent}")));
    }
    let d = accuracy.len();
    let keep = retained_count(d, k_percent);
    let mut mask = vec![false; d];
    for i in top_indices(accuracy.data(), keep) {
        mask[i] = true;
    }
    Ok(FeatureSelector {
        accuracy: accuracy.clone(),
        mask,
        k_percent,
    })
}

/// `ceil(d·k/100)`, computed so exact products are not bumped by rounding.
pub fn retained_count(d: usize, k_percent: f64) -> usize {
    let exact = d as f64 * k_percent / 100.0;
    let rounded = exact.round();
    let n = if (exact - rounded).abs() < 1e-9 { rounded } else { exact.ceil() };
    (n as usize).clamp(1, d)
}

impl FeatureSelector {
    pub fn retained(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn mean_retained_accuracy(&self) -> f64 {
        let r = self.retained();
        r.iter().map(|&i| self.accuracy.data()[i]).sum::<f64>() / r.len() as f64
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            "selector",
            json!({ "k_percent": self.k_percent, "retained": self.retained() }),
            vec![("accuracy".into(), self.accuracy.clone())],
        )
    }

    pub fn from_checkpoint(mut ck: Checkpoint, path: &Path) -> Result<Self> {
        ck = ck.expect_kind("selector", path)?;
        let k_percent = ck.meta["k_percent"]
            .as_f64()
            .ok_or_else(|| Error::format(path, "missing k_percent"))?;
        let retained: Vec<usize> = serde_json::from_value(ck.meta["retained"].clone())?;
        let accuracy = ck.take("accuracy")?;
        let mut mask = vec![false; accuracy.len()];
        for i in retained {
            *mask.get_mut(i).ok_or_else(|| Error::format(path, "retained index out of range"))? = true;
        }
        Ok(Self {
            accuracy,
            mask,
            k_percent,
        })
    }
}
