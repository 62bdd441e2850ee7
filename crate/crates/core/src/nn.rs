//! Parameter storage, batched gradients and the Adam optimizer used to train
//! the autoencoder and the denoiser.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

/// Named, ordered parameter tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect()
    }

    pub fn into_pairs(self) -> Vec<(String, Tensor)> {
        self.names.into_iter().zip(self.tensors).collect()
    }

    /// Rebuilds from pairs, checking names and shapes against a template.
    pub fn from_pairs_like(template: &Params, pairs: Vec<(String, Tensor)>) -> Result<Params> {
        if pairs.len() != template.len() {
            return Err(Error::contract(format!(
                "checkpoint holds {} tensors, model expects {}",
                pairs.len(),
                template.len()
            )));
        }
        let mut out = Params::new();
        for ((name, t), (tn, tt)) in pairs.into_iter().zip(template.names.iter().zip(&template.tensors)) {
            if &name != tn || t.shape() != tt.shape() {
                return Err(Error::contract(format!(
                    "checkpoint tensor {name} {:?} does not match {tn} {:?}",
                    t.shape(),
                    tt.shape()
                )));
            }
            out.push(name, t);
        }
        Ok(out)
    }
}

/// He-style initialization for a `[c_out, c_in, k, k]` kernel.
pub fn conv_weight<R: Rng + ?Sized>(c_out: usize, c_in: usize, k: usize, rng: &mut R) -> Tensor {
    let fan_in = (c_in * k * k) as f64;
    Tensor::randn(&[c_out, c_in, k, k], (2.0 / fan_in).sqrt(), rng)
}

pub fn dense_weight<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[rows, cols], (1.0 / rows as f64).sqrt(), rng)
}

/// Mean loss and mean gradient over `batch`, one tape per sample. Samples are
/// evaluated through [`exec::map`] and reduced in index order.
pub fn batch_gradient<S, F>(params: &Params, batch: &[S], loss_fn: F) -> Result<(f64, Vec<Tensor>)>
where
    S: Sync,
    F: Fn(&mut Tape, &[Var], &S) -> Result<Var> + Sync + Send,
{
    let per_sample = exec::map(batch, |sample| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, true);
        let loss = loss_fn(&mut tape, &vars, sample)?;
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((tape.value(loss).item(), grads))
    });
    let mut total = 0.0;
    let mut acc: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for r in per_sample {
        let (l, g) = r?;
        total += l;
        for (a, gi) in acc.iter_mut().zip(&g) {
            a.axpy(1.0, gi)?;
        }
    }
    let n = batch.len().max(1) as f64;
    for a in &mut acc {
        a.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok((total / n, acc))
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &Params, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &[Tensor]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for ((p, g), (m, v)) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (pd, gd) = (p.data_mut(), g.data());
            for i in 0..pd.len() {
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gd[i];
                let mhat = *mi / bc1;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gd[i] * gd[i];
                let vhat = *vi / bc2;
                pd[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
