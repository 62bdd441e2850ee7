//! Independent reference implementations: dense solves with nalgebra and
//! plain scalar loops.

use nalgebra::{DMatrix, DVector};

/// Dense ridge fit of one target: standardize `x` (population sd), center `y`,
/// keep the `k` columns with the largest |Pearson r| against `y`, then
/// `w = (XᵀX + λI)⁻¹ Xᵀy`. Returns (selected columns ascending, weights, bias).
pub fn ridge_target(x: &[Vec<f64>], y: &[f64], lambda: f64, k: usize) -> (Vec<usize>, Vec<f64>, f64) {
    let n = x.len();
    let d = x[0].len();
    let mut z = DMatrix::<f64>::zeros(n, d);
    for j in 0..d {
        let col: Vec<f64> = x.iter().map(|r| r[j]).collect();
        let m = col.iter().sum::<f64>() / n as f64;
        let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
        for i in 0..n {
            z[(i, j)] = if sd > 1e-12 * (1.0 + m.abs()) { (col[i] - m) / sd } else { 0.0 };
        }
    }
    let ym = y.iter().sum::<f64>() / n as f64;
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - ym));
    let mut corr: Vec<(usize, f64)> = (0..d)
        .map(|j| {
            let col = z.column(j);
            let num = col.dot(&yc);
            let den = col.norm() * yc.norm();
            (j, if den > 0.0 { (num / den).abs() } else { 0.0 })
        })
        .collect();
    corr.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut sel: Vec<usize> = corr.iter().take(k).map(|p| p.0).collect();
    sel.sort_unstable();
    let xs = DMatrix::from_fn(n, sel.len(), |i, p| z[(i, sel[p])]);
    let a = xs.transpose() * &xs + DMatrix::<f64>::identity(sel.len(), sel.len()) * lambda;
    let b = xs.transpose() * &yc;
    let w = a.lu().solve(&b).expect("oracle system is singular");
    (sel, w.iter().copied().collect(), ym)
}

pub fn grayscale(img: &[f64], c: usize, h: usize, w: usize) -> Vec<Vec<f64>> {
    (0..h)
        .map(|i| {
            (0..w)
                .map(|j| (0..c).map(|ch| img[ch * h * w + i * w + j]).sum::<f64>() / c as f64)
                .collect()
        })
        .collect()
}

/// Mean SSIM over every 8×8 window, stride 1.
pub fn ssim(a: &[f64], b: &[f64], c: usize, h: usize, w: usize) -> f64 {
    let (ga, gb) = (grayscale(a, c, h, w), grayscale(b, c, h, w));
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut vals = Vec::new();
    for r in 0..=h - 8 {
        for s in 0..=w - 8 {
            let mut pa = Vec::with_capacity(64);
            let mut pb = Vec::with_capacity(64);
            for i in r..r + 8 {
                for j in s..s + 8 {
                    pa.push(ga[i][j]);
                    pb.push(gb[i][j]);
                }
            }
            let ma = pa.iter().sum::<f64>() / 64.0;
            let mb = pb.iter().sum::<f64>() / 64.0;
            let va = pa.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / 64.0;
            let vb = pb.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / 64.0;
            let cov = pa.iter().zip(&pb).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / 64.0;
            vals.push((2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for i in 0..a.len() {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma).powi(2);
        sbb += (b[i] - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn gaussian_fit(set: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len();
    let m = DMatrix::from_fn(n, set[0].len(), |i, j| set[i][j]);
    let mean = m.row_mean().transpose();
    let centered = DMatrix::from_fn(n, m.ncols(), |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * centered / (n as f64 - 1.0);
    (mean, cov)
}

/// Fréchet distance with `Tr((Σ_a Σ_b)^{1/2})` taken from the eigenvalues of
/// the non-symmetric product.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (ma, sa) = gaussian_fit(a);
    let (mb, sb) = gaussian_fit(b);
    let prod = &sa * &sb;
    let tr_sqrt: f64 = prod.complex_eigenvalues().iter().map(|l| l.re.max(0.0).sqrt()).sum();
    (&ma - &mb).norm_squared() + sa.trace() + sb.trace() - 2.0 * tr_sqrt
}
