//! Measured quantities shared by the topic tests and the acceptance runner.
//! Each function returns the worst error it saw; callers apply tolerances.

use mindloop_core::aligner::{align, AlignOptions, Free};
use mindloop_core::dataset::{render, Pose};
use mindloop_core::decoder::fit_ridge;
use mindloop_core::generator::{
    cross_attention, forward_diffuse, make_schedule, reverse_latent, NoisePredictor, NoiseSchedule, OracleNoise,
};
use mindloop_core::metrics::{cosine_flagged, fid_embeddings, pixel_pcc, ssim};
use mindloop_core::rng::seeded;
use mindloop_core::{Tape, Tensor};
use rand::Rng;

use super::oracles;
use super::surrogate;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rows(x: &Tensor) -> Vec<Vec<f64>> {
    let d = x.shape()[1];
    x.data().chunks(d).map(<[f64]>::to_vec).collect()
}

/// Max abs weight error of `fit_ridge` against the dense oracle over 50
/// random instances with `N ≤ 30`, `D ≤ 10`. A differing voxel selection
/// counts as infinite error.
pub fn ridge_oracle_error(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let d = rng.gen_range(2..=10);
        let n = rng.gen_range(d + 2..=30);
        let t = rng.gen_range(1..=3);
        let k = rng.gen_range(1..=d);
        let lambda = rng.gen_range(0.1..10.0);
        let x = Tensor::randn(&[n, d], rng.gen_range(0.5..3.0), &mut rng).map(|v| v + 0.7);
        let y = Tensor::randn(&[n, t], 1.0, &mut rng);
        let model = fit_ridge(&x, &y, lambda, k).unwrap();
        let xr = rows(&x);
        for j in 0..t {
            let col: Vec<f64> = (0..n).map(|i| y.data()[i * t + j]).collect();
            let (sel, w, bias) = oracles::ridge_target(&xr, &col, lambda, k);
            let fit = &model.targets[j];
            if fit.voxels != sel {
                return f64::INFINITY;
            }
            worst = worst.max(max_abs_diff(&fit.weights, &w)).max((fit.bias - bias).abs());
        }
    }
    worst
}

/// Max training residual at `λ = 0` with `N = D + 1` (exact interpolation).
pub fn ridge_interpolation_error() -> f64 {
    let mut rng = seeded(5);
    let mut worst: f64 = 0.0;
    for d in [2, 5, 9] {
        let x = Tensor::randn(&[d + 1, d], 1.0, &mut rng);
        let y = Tensor::randn(&[d + 1, 2], 1.0, &mut rng);
        let pred = fit_ridge(&x, &y, 0.0, d).unwrap().predict_rows(&x).unwrap();
        worst = worst.max(max_abs_diff(pred.data(), y.data()));
    }
    worst
}

pub struct Shrinkage {
    /// Weight norms for λ = 1e2, 1e4, 1e6, 1e10.
    pub norms: Vec<f64>,
    /// Max distance of the λ = 1e10 predictions from the target means.
    pub mean_gap: f64,
}

impl Shrinkage {
    pub fn holds(&self) -> bool {
        self.norms.windows(2).all(|w| w[1] < w[0]) && self.norms[self.norms.len() - 1] < 1e-8 && self.mean_gap < 1e-8
    }
}

pub fn ridge_shrinkage() -> Shrinkage {
    let mut rng = seeded(6);
    let (n, t) = (20, 2);
    let x = Tensor::randn(&[n, 6], 1.0, &mut rng);
    let y = Tensor::randn(&[n, t], 1.0, &mut rng).map(|v| v + 3.0);
    let lambdas = [1e2, 1e4, 1e6, 1e10];
    let norms = lambdas
        .iter()
        .map(|&l| {
            let m = fit_ridge(&x, &y, l, 6).unwrap();
            m.targets.iter().flat_map(|t| &t.weights).map(|w| w * w).sum::<f64>().sqrt()
        })
        .collect();
    let pred = fit_ridge(&x, &y, lambdas[3], 6).unwrap().predict_rows(&x).unwrap();
    let mut mean_gap: f64 = 0.0;
    for j in 0..t {
        let mean = (0..n).map(|i| y.data()[i * t + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            mean_gap = mean_gap.max((pred.data()[i * t + j] - mean).abs());
        }
    }
    Shrinkage { norms, mean_gap }
}

pub fn schedules() -> Vec<NoiseSchedule> {
    vec![
        make_schedule(50, 1e-4, 0.02).unwrap(),
        make_schedule(2, 0.1, 0.2).unwrap(),
        make_schedule(10, 0.05, 0.5).unwrap(),
    ]
}

/// Max abs error of forward diffusion followed by reverse sampling with the
/// true noise, over several schedules, start steps and step counts.
pub fn oracle_inversion_error() -> f64 {
    let mut rng = seeded(11);
    let mut worst: f64 = 0.0;
    for schedule in schedules() {
        let big_t = schedule.steps();
        for from in [1, big_t / 2 + 1, big_t] {
            for reverse_steps in [1, 3, big_t] {
                let z = Tensor::randn(&[4, 4, 4], 1.0, &mut rng);
                let eps = Tensor::randn(&[4, 4, 4], 1.0, &mut rng);
                let z_t = forward_diffuse(&z, &schedule, from, &eps).unwrap();
                let oracle = OracleNoise(eps);
                let mut tape = Tape::new();
                let p = oracle.bind(&mut tape);
                let zv = tape.constant(z_t);
                let c = tape.constant(Tensor::zeros(&[1, 1]));
                let out = reverse_latent(&mut tape, &oracle, &p, &schedule, zv, c, from, reverse_steps).unwrap();
                worst = worst.max(max_abs_diff(tape.value(out).data(), z.data()));
            }
        }
    }
    worst
}

pub fn alpha_bar_strictly_decreasing() -> bool {
    schedules().iter().all(|s| {
        s.alpha_bar(0) == 1.0 && (1..=s.steps()).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1) && s.alpha_bar(t) > 0.0)
    })
}

/// Max `|var(z_t) − 1|` over 10⁴ unit-variance samples at several `t`.
pub fn forward_variance_deviation() -> f64 {
    let schedule = make_schedule(50, 1e-4, 0.02).unwrap();
    let n = 10_000;
    let mut rng = seeded(12);
    let z = Tensor::randn(&[n], 1.0, &mut rng);
    let mut worst: f64 = 0.0;
    for t in [1, 10, 25, 50] {
        let eps = Tensor::randn(&[n], 1.0, &mut rng);
        let zt = forward_diffuse(&z, &schedule, t, &eps).unwrap();
        let mean = zt.data().iter().sum::<f64>() / n as f64;
        let var = zt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        worst = worst.max((var - 1.0).abs());
    }
    worst
}

/// Max `|Σ_j w_ij − 1|` over random attention problems; negative weights
/// count as infinite error.
pub fn attention_row_sum_error() -> f64 {
    let mut rng = seeded(21);
    let mut worst: f64 = 0.0;
    for (nq, nk, dq, dc, dk, dv) in [(5, 3, 4, 6, 3, 2), (16, 8, 16, 32, 16, 16), (1, 7, 2, 3, 5, 4)] {
        let phi = Tensor::randn(&[nq, dq], 3.0, &mut rng);
        let c = Tensor::randn(&[nk, dc], 3.0, &mut rng);
        let wq = Tensor::randn(&[dq, dk], 1.0, &mut rng);
        let wk = Tensor::randn(&[dc, dk], 1.0, &mut rng);
        let wv = Tensor::randn(&[dc, dv], 1.0, &mut rng);
        let (_, w) = cross_attention(&phi, &c, &wq, &wk, &wv).unwrap();
        for row in w.data().chunks(nk) {
            if row.iter().any(|&x| x < 0.0) {
                return f64::INFINITY;
            }
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    worst
}

/// With one key every query returns that key's value row.
pub fn single_key_error() -> f64 {
    let mut rng = seeded(22);
    let phi = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let c = Tensor::randn(&[1, 5], 1.0, &mut rng);
    let wq = Tensor::randn(&[3, 2], 1.0, &mut rng);
    let wk = Tensor::randn(&[5, 2], 1.0, &mut rng);
    let wv = Tensor::randn(&[5, 3], 1.0, &mut rng);
    let (out, w) = cross_attention(&phi, &c, &wq, &wk, &wv).unwrap();
    let v = c.matmul(&wv).unwrap();
    let mut worst = max_abs_diff(w.data(), &[1.0; 4]);
    for row in out.data().chunks(3) {
        worst = worst.max(max_abs_diff(row, v.data()));
    }
    worst
}

/// A zero query attends uniformly and returns the mean value row.
pub fn zero_query_error() -> f64 {
    let mut rng = seeded(23);
    let c = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let wq = Tensor::randn(&[3, 2], 1.0, &mut rng);
    let wk = Tensor::randn(&[5, 2], 1.0, &mut rng);
    let wv = Tensor::randn(&[5, 3], 1.0, &mut rng);
    let (out, w) = cross_attention(&Tensor::zeros(&[2, 3]), &c, &wq, &wk, &wv).unwrap();
    let v = c.matmul(&wv).unwrap();
    let mean: Vec<f64> = (0..3).map(|j| (0..4).map(|r| v.data()[r * 3 + j]).sum::<f64>() / 4.0).collect();
    let mut worst = max_abs_diff(w.data(), &[0.25; 8]);
    for row in out.data().chunks(3) {
        worst = worst.max(max_abs_diff(row, &mean));
    }
    worst
}

/// `φ = W_Q = W_K = W_V = I`, `c = diag(1, 2)`: the scores are `c/√2`, so
/// each row is a two-way softmax worked out by hand.
pub const HAND_WEIGHTS: [f64; 4] = [0.6697615493266569, 0.3302384506733431, 0.19557031749304313, 0.8044296825069569];
pub const HAND_OUTPUT: [f64; 4] = [0.6697615493266569, 0.6604769013466862, 0.19557031749304313, 1.6088593650139138];

pub fn hand_oracle_error() -> f64 {
    let eye = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let c = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
    let (out, w) = cross_attention(&eye, &c, &eye, &eye, &eye).unwrap();
    max_abs_diff(w.data(), &HAND_WEIGHTS).max(max_abs_diff(out.data(), &HAND_OUTPUT))
}

/// Rendered shapes and uniform noise at three sizes.
pub fn fixture_images() -> Vec<Tensor> {
    let mut rng = seeded(31);
    let pose = |row, col, size, orientation| Pose {
        row,
        col,
        size,
        orientation,
    };
    let mut out = vec![
        render(0, &pose(8.0, 9.0, 5.0, 0.3), 16),
        render(2, &pose(10.0, 6.0, 4.0, 1.1), 16),
        render(1, &pose(12.0, 14.0, 7.0, 2.0), 20),
        render(3, &pose(7.0, 11.0, 6.0, 0.7), 20),
    ];
    for size in [8, 16, 20] {
        out.push(Tensor::new([3, size, size], (0..3 * size * size).map(|_| rng.gen::<f64>()).collect()).unwrap());
    }
    out
}

/// Every same-size pair of fixtures, plus each fixture against a
/// tone-mapped copy of itself.
pub fn fixture_pairs() -> Vec<(Tensor, Tensor)> {
    let fx = fixture_images();
    let mut out = Vec::new();
    for a in &fx {
        for b in &fx {
            if a.shape() == b.shape() {
                out.push((a.clone(), b.clone()));
            }
        }
        out.push((a.clone(), a.map(|v| (0.8 * v + 0.1).sqrt())));
    }
    out
}

pub fn ssim_error() -> f64 {
    fixture_pairs()
        .iter()
        .map(|(a, b)| {
            let s = a.shape();
            (ssim(a, b).unwrap() - oracles::ssim(a.data(), b.data(), s[0], s[1], s[2])).abs()
        })
        .fold(0.0, f64::max)
}

pub fn pcc_error() -> f64 {
    fixture_pairs()
        .iter()
        .map(|(a, b)| (pixel_pcc(a, b).unwrap() - oracles::pearson(a.data(), b.data())).abs())
        .fold(0.0, f64::max)
}

pub fn cosine_error() -> f64 {
    let mut rng = seeded(32);
    let mut worst: f64 = 0.0;
    for n in [1, 7, 32, 132] {
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (got, flagged) = cosine_flagged(&a, &b).unwrap();
        if flagged {
            return f64::INFINITY;
        }
        worst = worst.max((got - oracles::cosine(&a, &b)).abs());
    }
    worst
}

pub fn gaussian_set(n: usize, shift: &[f64], scale: f64, rng: &mut impl Rng) -> Vec<Tensor> {
    (0..n)
        .map(|_| {
            Tensor::from_vec(
                shift
                    .iter()
                    .map(|m| m + scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect(),
            )
        })
        .collect()
}

fn as_rows(set: &[Tensor]) -> Vec<Vec<f64>> {
    set.iter().map(|t| t.data().to_vec()).collect()
}

/// FID against the nalgebra oracle on 20-element sets of dimension < 20.
pub fn fid_error() -> f64 {
    let mut rng = seeded(33);
    let mut worst: f64 = 0.0;
    for dim in [2, 6, 12, 19] {
        let shift: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = gaussian_set(20, &vec![0.0; dim], 1.0, &mut rng);
        let b = gaussian_set(20, &shift, 1.5, &mut rng);
        let got = fid_embeddings(&a, &b).unwrap();
        worst = worst.max((got - oracles::fid(&as_rows(&a), &as_rows(&b))).abs());
    }
    worst
}

pub fn fid_self() -> f64 {
    let mut rng = seeded(34);
    let a = gaussian_set(40, &[0.5; 8], 2.0, &mut rng);
    fid_embeddings(&a, &a).unwrap()
}

/// `|FID − ‖m‖²| / ‖m‖²` for two 1000-sample unit Gaussians offset by `m`.
pub fn fid_shift_relative_error() -> f64 {
    let mut rng = seeded(35);
    let shift: Vec<f64> = (0..8).map(|j| if j % 2 == 0 { 1.0 } else { -0.5 }).collect();
    let expected: f64 = shift.iter().map(|v| v * v).sum();
    let a = gaussian_set(1000, &[0.0; 8], 1.0, &mut rng);
    let b = gaussian_set(1000, &shift, 1.0, &mut rng);
    (fid_embeddings(&a, &b).unwrap() - expected).abs() / expected
}

/// Max abs distance between `align`'s best iterate and the masked
/// least-squares solution on the linear surrogate.
pub fn surrogate_error(seed: u64) -> f64 {
    let p = surrogate::problem(seed);
    let opts = AlignOptions {
        lr: p.stable_lr(),
        max_steps: 20_000,
        tol: 0.0,
        window: 5,
    };
    let out = align(&p.c0, &p.z0, &p.targets, &p.masks, &p.generator, &p.encoder, &opts, Free::BOTH).unwrap();
    let got: Vec<f64> = out.c.data().iter().chain(out.z.data()).copied().collect();
    max_abs_diff(&got, &p.oracle())
}
