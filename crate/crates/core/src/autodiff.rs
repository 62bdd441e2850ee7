//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] owns every value produced while it is alive. Operations are
//! recorded in execution order and [`Tape::backward`] replays them in reverse,
//! accumulating one gradient contribution per use of each input. Broadcasting
//! is limited to scalar-tensor operations; everything else needs matching
//! shapes or an explicit reshape.

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::{matmul_dims, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Slice { input: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    SumAxis { input: Var, axis: usize, scale: f64 },
    SumAll { input: Var, scale: f64 },
    Exp(Var),
    Softmax { input: Var, axis: usize },
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    Upsample { input: Var, factor: usize },
    LeakyRelu { input: Var, slope: f64 },
    Clamp { input: Var, lo: f64, hi: f64 },
    Mse(Var, Var),
    L2Norm(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Splits a shape around `axis` into (outer, extent, inner) block sizes.
fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are only tracked for leaves with `requires_grad`
    /// and for values derived from them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, present after a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.value(v).shape(), g.clone()).expect("grad shape"))
    }

    /// Resets every accumulated gradient to zero.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            let bad = value.data().iter().filter(|v| !v.is_finite()).count();
            return Err(Error::numeric(
                name,
                format!("{bad} of {} outputs are NaN or infinite", value.len()),
            ));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, name: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        self.push("add_scalar", out, Op::Shift(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::Matmul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// `input[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("axis {axis} range {start}..{end} of {shape:?}"),
            ));
        }
        let (outer, n, inner) = axis_blocks(&shape, axis);
        let len = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        self.push("slice", out, Op::Slice { input: a, axis, start }, &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let base_shape = self.shape(first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base_shape:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base_shape:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_blocks(&base_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut out_shape = base_shape;
        out_shape[axis] = total;
        let out = Tensor::new(out_shape, data)?;
        self.push(
            "concat",
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    fn reduce_axis(&mut self, name: &'static str, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(name, format!("axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = axis_blocks(&shape, axis);
        let scale = if mean { 1.0 / n as f64 } else { 1.0 };
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, &x) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += x;
                }
            }
        }
        data.iter_mut().for_each(|d| *d *= scale);
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::new(out_shape, data)?;
        self.push(name, out, Op::SumAxis { input: a, axis, scale }, &[a])
    }

    /// Sum along `axis`; the axis is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("sum_axis", a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("mean_axis", a, axis, true)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll { input: a, scale: 1.0 }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let scale = 1.0 / t.len() as f64;
        let s = t.sum() * scale;
        self.push("mean", Tensor::scalar(s), Op::SumAll { input: a, scale }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", out, Op::Exp(a), &[a])
    }

    /// Softmax along `axis`; the slice maximum is subtracted before exponentiation.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} of {shape:?}")));
        }
        let out = softmax_values(self.value(a), axis);
        self.push("softmax", out, Op::Softmax { input: a, axis }, &[a])
    }

    /// 2-D convolution of a `[C_in, H, W]` input with `[C_out, C_in, k, k]` weights.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", format!("input {xs:?} weight {ws:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), ws[0]),
                ));
            }
        }
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], ws[0], ws[2], stride, pad).ok_or_else(|| {
            Error::shape("conv2d", format!("kernel {} stride {stride} pad {pad} on {xs:?}", ws[2]))
        })?;
        let mut out = vec![0.0; geom.c_out * geom.h_out * geom.w_out];
        kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &mut out,
        );
        let out = Tensor::new([geom.c_out, geom.h_out, geom.w_out], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &deps,
        )
    }

    /// Nearest-neighbour upsampling of a `[C, H, W]` value by an integer factor.
    pub fn upsample(&mut self, a: Var, factor: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || factor == 0 {
            return Err(Error::shape("upsample", format!("{s:?} by {factor}")));
        }
        let mut out = vec![0.0; s[0] * s[1] * s[2] * factor * factor];
        kernels::upsample_nearest(self.value(a).data(), &mut out, s[0], s[1], s[2], factor);
        let out = Tensor::new([s[0], s[1] * factor, s[2] * factor], out)?;
        self.push("upsample", out, Op::Upsample { input: a, factor }, &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push("leaky_relu", out, Op::LeakyRelu { input: a, slope }, &[a])
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push("clamp", out, Op::Clamp { input: a, lo, hi }, &[a])
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let s = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
        self.push("mse", Tensor::scalar(s), Op::Mse(a, b), &[a, b])
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).norm();
        self.push("l2_norm", Tensor::scalar(n), Op::L2Norm(a), &[a])
    }

    /// Sum of squares, `‖a‖²`.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        self.sum(sq)
    }

    /// Back-propagates from a single-element `loss`, accumulating into every
    /// value that requires a gradient. Gradients add up across calls until
    /// [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::contract(
                "loss does not depend on any value that requires a gradient",
            ));
        }
        grad_slot(&mut self.grads, loss, 1)[0] += 1.0;

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (lower, upper) = self.grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            backprop(&self.nodes, node, g, lower)?;
        }
        Ok(())
    }
}

pub(crate) fn softmax_values(t: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_blocks(t.shape(), axis);
    let src = t.data();
    let mut data = vec![0.0; src.len()];
    for o in 0..outer {
        for k in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + k;
            let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..n {
                let e = (src[idx(j)] - max).exp();
                data[idx(j)] = e;
                denom += e;
            }
            for j in 0..n {
                data[idx(j)] /= denom;
            }
        }
    }
    Tensor::new(t.shape(), data).expect("softmax shape")
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].requires_grad;
    let len = |v: Var| nodes[v.0].value.len();

    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if needs(*a) {
                let ga = grad_slot(grads, *a, len(*a));
                ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
            if needs(*b) {
                let gb = grad_slot(grads, *b, len(*b));
                gb.iter_mut().zip(g).for_each(|(d, &x)| *d += sign * x);
            }
        }
        Op::Mul(a, b) => {
            // a and b may be the same var; each use contributes separately.
            let (av, bv) = (val(*a).data().to_vec(), val(*b).data().to_vec());
            if needs(*a) {
                let ga = grad_slot(grads, *a, av.len());
                for ((d, &x), &y) in ga.iter_mut().zip(g).zip(&bv) {
                    *d += x * y;
                }
            }
            if needs(*b) {
                let gb = grad_slot(grads, *b, bv.len());
                for ((d, &x), &y) in gb.iter_mut().zip(g).zip(&av) {
                    *d += x * y;
                }
            }
        }
        Op::Scale(a, s) => {
            let ga = grad_slot(grads, *a, len(*a));
            ga.iter_mut().zip(g).for_each(|(d, &x)| *d += s * x);
        }
        Op::Shift(a) | Op::Reshape(a) => {
            let ga = grad_slot(grads, *a, len(*a));
            ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
        }
        Op::Matmul(a, b) => {
            let (m, k, n) = matmul_dims(val(*a).shape(), val(*b).shape())?;
            if needs(*a) {
                let bv = val(*b).data();
                kernels::matmul_bt(g, bv, grad_slot(grads, *a, m * k), m, n, k);
            }
            if needs(*b) {
                let av = val(*a).data();
                kernels::matmul_at(av, g, grad_slot(grads, *b, k * n), m, k, n);
            }
        }
        Op::Transpose(a) => {
            let s = val(*a).shape();
            let (r, c) = (s[0], s[1]);
            let ga = grad_slot(grads, *a, r * c);
            for i in 0..r {
                for j in 0..c {
                    ga[i * c + j] += g[j * r + i];
                }
            }
        }
        Op::Slice { input, axis, start } => {
            let in_shape = val(*input).shape();
            let (outer, n, inner) = axis_blocks(in_shape, *axis);
            let slen = node.value.shape()[*axis];
            let ga = grad_slot(grads, *input, outer * n * inner);
            for o in 0..outer {
                let dst = &mut ga[(o * n + start) * inner..(o * n + start + slen) * inner];
                let src = &g[o * slen * inner..(o + 1) * slen * inner];
                dst.iter_mut().zip(src).for_each(|(d, &x)| *d += x);
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_blocks(node.value.shape(), *axis);
            let mut offset = 0;
            for &v in inputs {
                let n = val(v).shape()[*axis];
                if needs(v) {
                    let gv = grad_slot(grads, v, outer * n * inner);
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                        let dst = &mut gv[o * n * inner..(o + 1) * n * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &x)| *d += x);
                    }
                }
                offset += n;
            }
        }
        Op::SumAxis { input, axis, scale } => {
            let (outer, n, inner) = axis_blocks(val(*input).shape(), *axis);
            let ga = grad_slot(grads, *input, outer * n * inner);
            for o in 0..outer {
                for j in 0..n {
                    let dst = &mut ga[(o * n + j) * inner..(o * n + j + 1) * inner];
                    let src = &g[o * inner..(o + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, &x)| *d += scale * x);
                }
            }
        }
        Op::SumAll { input, scale } => {
            let gs = g[0] * scale;
            grad_slot(grads, *input, len(*input)).iter_mut().for_each(|d| *d += gs);
        }
        Op::Exp(a) => {
            let y = node.value.data();
            let ga = grad_slot(grads, *a, y.len());
            for ((d, &x), &e) in ga.iter_mut().zip(g).zip(y) {
                *d += x * e;
            }
        }
        Op::Softmax { input, axis } => {
            let y = node.value.data();
            let (outer, n, inner) = axis_blocks(node.value.shape(), *axis);
            let ga = grad_slot(grads, *input, y.len());
            for o in 0..outer {
                for k in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + k;
                    let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                    for j in 0..n {
                        ga[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                    }
                }
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            // Disjoint slots: input, weight and bias are distinct vars.
            let mut gi = needs(*input).then(|| grads[input.0].take().unwrap_or_else(|| vec![0.0; len(*input)]));
            let mut gw = needs(*weight).then(|| grads[weight.0].take().unwrap_or_else(|| vec![0.0; len(*weight)]));
            let mut gb = bias
                .filter(|b| needs(*b))
                .map(|b| grads[b.0].take().unwrap_or_else(|| vec![0.0; len(b)]));
            kernels::conv2d_backward(
                geom,
                val(*input).data(),
                val(*weight).data(),
                g,
                gi.as_deref_mut(),
                gw.as_deref_mut(),
                gb.as_deref_mut(),
            );
            if let Some(v) = gi {
                grads[input.0] = Some(v);
            }
            if let Some(v) = gw {
                grads[weight.0] = Some(v);
            }
            if let (Some(b), Some(v)) = (bias, gb) {
                grads[b.0] = Some(v);
            }
        }
        Op::Upsample { input, factor } => {
            let s = val(*input).shape();
            let (c, h, w) = (s[0], s[1], s[2]);
            kernels::upsample_nearest_backward(g, grad_slot(grads, *input, c * h * w), c, h, w, *factor);
        }
        Op::LeakyRelu { input, slope } => {
            let x = val(*input).data().to_vec();
            let ga = grad_slot(grads, *input, x.len());
            for ((d, &gv), &xv) in ga.iter_mut().zip(g).zip(&x) {
                *d += if xv > 0.0 { gv } else { slope * gv };
            }
        }
        Op::Clamp { input, lo, hi } => {
            let x = val(*input).data().to_vec();
            let ga = grad_slot(grads, *input, x.len());
            for ((d, &gv), &xv) in ga.iter_mut().zip(g).zip(&x) {
                if xv >= *lo && xv <= *hi {
                    *d += gv;
                }
            }
        }
        Op::Mse(a, b) => {
            let (av, bv) = (val(*a).data().to_vec(), val(*b).data().to_vec());
            let c = 2.0 * g[0] / av.len() as f64;
            if needs(*a) {
                let ga = grad_slot(grads, *a, av.len());
                for ((d, &x), &y) in ga.iter_mut().zip(&av).zip(&bv) {
                    *d += c * (x - y);
                }
            }
            if needs(*b) {
                let gb = grad_slot(grads, *b, bv.len());
                for ((d, &x), &y) in gb.iter_mut().zip(&av).zip(&bv) {
                    *d -= c * (x - y);
                }
            }
        }
        Op::L2Norm(a) => {
            let n = node.value.item();
            if n > 0.0 {
                let x = val(*a).data().to_vec();
                let ga = grad_slot(grads, *a, x.len());
                for (d, &xv) in ga.iter_mut().zip(&x) {
                    *d += g[0] * xv / n;
                }
            }
        }
    }
    Ok(())
}
