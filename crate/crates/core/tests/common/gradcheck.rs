//! Central-difference gradient checks against the tape.

use mindloop_core::rng::seeded;
use mindloop_core::{Result, Tape, Tensor, Var};

pub type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Build,
    /// Applied to every sampled input, e.g. to keep values off a kink.
    pub prep: fn(f64) -> f64,
}

fn keep(x: f64) -> f64 {
    x
}

/// Pushes values at least 0.1 away from 0.
fn off_zero(x: f64) -> f64 {
    if x.abs() < 0.1 {
        x.signum() * 0.1 + x
    } else {
        x
    }
}

/// Keeps values at least 0.1 away from ±0.5.
fn off_clamp_edges(x: f64) -> f64 {
    if (x.abs() - 0.5).abs() < 0.1 {
        x + 0.2 * x.signum()
    } else {
        x
    }
}

fn case(name: &'static str, shapes: &[&[usize]], build: Build) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build,
        prep: keep,
    }
}

/// Every differentiable tape primitive, plus cross attention as a composite.
pub fn primitive_cases() -> Vec<Case> {
    let mut v = vec![
        case("add", &[&[3, 4], &[3, 4]], |t, x| t.add(x[0], x[1])),
        case("sub", &[&[3, 4], &[3, 4]], |t, x| t.sub(x[0], x[1])),
        case("mul", &[&[3, 4], &[3, 4]], |t, x| t.mul(x[0], x[1])),
        case("scale", &[&[5]], |t, x| t.scale(x[0], -1.7)),
        case("add_scalar", &[&[2, 3]], |t, x| t.add_scalar(x[0], 0.3)),
        case("matmul", &[&[3, 4], &[4, 2]], |t, x| t.matmul(x[0], x[1])),
        case("transpose", &[&[3, 4]], |t, x| t.transpose(x[0])),
        case("reshape", &[&[3, 4]], |t, x| t.reshape(x[0], &[2, 6])),
        case("slice_rows", &[&[4, 3]], |t, x| t.slice(x[0], 0, 1, 3)),
        case("slice_cols", &[&[2, 3, 4]], |t, x| t.slice(x[0], 2, 1, 4)),
        case("concat_axis0", &[&[2, 3], &[1, 3]], |t, x| t.concat(&[x[0], x[1]], 0)),
        case("concat_axis1", &[&[2, 3], &[2, 2]], |t, x| t.concat(&[x[0], x[1]], 1)),
        case("sum_axis0", &[&[3, 4]], |t, x| t.sum_axis(x[0], 0)),
        case("sum_axis1", &[&[3, 4]], |t, x| t.sum_axis(x[0], 1)),
        case("mean_axis", &[&[3, 4]], |t, x| t.mean_axis(x[0], 1)),
        case("sum", &[&[3, 4]], |t, x| t.sum(x[0])),
        case("mean", &[&[3, 4]], |t, x| t.mean(x[0])),
        case("exp", &[&[3, 4]], |t, x| t.exp(x[0])),
        case("softmax_rows", &[&[3, 4]], |t, x| t.softmax(x[0], 1)),
        case("softmax_cols", &[&[3, 4]], |t, x| t.softmax(x[0], 0)),
        case("conv2d_s1", &[&[2, 5, 5], &[3, 2, 3, 3], &[3]], |t, x| {
            t.conv2d(x[0], x[1], Some(x[2]), 1, 1)
        }),
        case("conv2d_s2", &[&[2, 6, 6], &[3, 2, 3, 3], &[3]], |t, x| {
            t.conv2d(x[0], x[1], Some(x[2]), 2, 1)
        }),
        case("conv2d_nobias", &[&[3, 4, 4], &[2, 3, 2, 2]], |t, x| t.conv2d(x[0], x[1], None, 2, 0)),
        case("upsample", &[&[2, 3, 3]], |t, x| t.upsample(x[0], 2)),
        case("mse", &[&[3, 4], &[3, 4]], |t, x| t.mse(x[0], x[1])),
        case("l2_norm", &[&[6]], |t, x| t.l2_norm(x[0])),
        case("sum_squares", &[&[2, 3]], |t, x| t.sum_squares(x[0])),
        case("cross_attention", &[&[4, 3], &[5, 2], &[3, 2], &[2, 2], &[2, 3]], |t, x| {
            mindloop_core::generator::cross_attention_var(t, x[0], x[1], x[2], x[3], x[4]).map(|(o, _)| o)
        }),
    ];
    v.push(Case {
        prep: off_zero,
        ..case("leaky_relu", &[&[3, 4]], |t, x| t.leaky_relu(x[0], 0.1))
    });
    v.push(Case {
        prep: off_clamp_edges,
        ..case("clamp", &[&[3, 4]], |t, x| t.clamp(x[0], -0.5, 0.5))
    });
    v
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` over the concatenated gradients.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

/// Tape gradient and central differences (step `h`) of `loss(inputs)`.
pub fn compare(
    inputs: &[Tensor],
    loss: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    h: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let l = loss(&mut tape, &vars)?;
    tape.backward(l)?;
    let mut analytic = Vec::new();
    for (v, x) in vars.iter().zip(inputs) {
        match tape.grad(*v) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, x.len())),
        }
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let l = loss(&mut tape, &vars)?;
        Ok(tape.value(l).item())
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    Ok((analytic, numeric))
}

/// Relative gradient error of one primitive on one seed. The scalar loss is
/// `Σ r ⊙ op(x)` with a fixed random `r`.
pub fn primitive_error(c: &Case, seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let inputs: Vec<Tensor> = c
        .shapes
        .iter()
        .map(|s| Tensor::randn(s, 1.0, &mut rng).map(c.prep))
        .collect();
    let probe_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = (c.build)(&mut tape, &vars)?;
        tape.shape(out).to_vec()
    };
    let r = Tensor::randn(&probe_shape, 1.0, &mut rng);
    let build = c.build;
    let loss = move |tape: &mut Tape, x: &[Var]| -> Result<Var> {
        let out = build(tape, x)?;
        let rv = tape.constant(r.clone());
        let weighted = tape.mul(out, rv)?;
        tape.sum(weighted)
    };
    let (a, n) = compare(&inputs, &loss, 1e-6)?;
    Ok(relative_error(&a, &n))
}
