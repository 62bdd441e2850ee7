//! Slice-level numeric kernels shared by plain tensors and the tape.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_bt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_at(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn transpose(a: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(Self {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Output index range `[lo, hi)` whose input coordinate `o*stride + tap - pad`
    /// lands inside `0..extent`.
    fn valid_range(&self, tap: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if tap >= self.pad {
            0
        } else {
            (self.pad - tap).div_ceil(s)
        };
        // o*s + tap - pad <= extent - 1
        let hi = if extent + self.pad < tap + 1 {
            0
        } else {
            ((extent + self.pad - tap - 1) / s + 1).min(out_extent)
        };
        (lo.min(hi), hi)
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let plane_out = g.h_out * g.w_out;
    for co in 0..g.c_out {
        let out_plane = &mut out[co * plane_out..(co + 1) * plane_out];
        if let Some(b) = bias {
            out_plane.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..g.c_in {
            let in_plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.h_out);
                for kx in 0..g.k {
                    let wv = weight[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.w_out);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let in_row = &in_plane[iy * g.w..(iy + 1) * g.w];
                        let out_row = &mut out_plane[oy * g.w_out..(oy + 1) * g.w_out];
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - g.pad;
                            let n = ox_hi - ox_lo;
                            for (o, &x) in out_row[ox_lo..ox_hi].iter_mut().zip(&in_row[ix0..ix0 + n]) {
                                *o += wv * x;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                out_row[ox] += wv * in_row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input, weight and bias gradients for one convolution.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_in: Option<&mut [f64]>,
    mut grad_w: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) {
    let plane_out = g.h_out * g.w_out;
    if let Some(gb) = grad_b {
        for co in 0..g.c_out {
            gb[co] += grad_out[co * plane_out..(co + 1) * plane_out].iter().sum::<f64>();
        }
    }
    for co in 0..g.c_out {
        let go_plane = &grad_out[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.c_in {
            let plane = ci * g.h * g.w..(ci + 1) * g.h * g.w;
            let in_plane = &input[plane.clone()];
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.h_out);
                for kx in 0..g.k {
                    let widx = ((co * g.c_in + ci) * g.k + ky) * g.k + kx;
                    let wv = weight[widx];
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.w_out);
                    let mut acc_w = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let go_row = &go_plane[oy * g.w_out..(oy + 1) * g.w_out];
                        let in_row = &in_plane[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - g.pad;
                            let n = ox_hi - ox_lo;
                            let go = &go_row[ox_lo..ox_hi];
                            if grad_w.is_some() {
                                acc_w += go.iter().zip(&in_row[ix0..ix0 + n]).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(gi) = grad_in.as_deref_mut() {
                                let gi_row = &mut gi[plane.start + iy * g.w + ix0..plane.start + iy * g.w + ix0 + n];
                                for (d, &gv) in gi_row.iter_mut().zip(go) {
                                    *d += wv * gv;
                                }
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * g.stride + kx - g.pad;
                                let gv = go_row[ox];
                                acc_w += gv * in_row[ix];
                                if let Some(gi) = grad_in.as_deref_mut() {
                                    gi[plane.start + iy * g.w + ix] += wv * gv;
                                }
                            }
                        }
                    }
                    if let Some(gw) = grad_w.as_deref_mut() {
                        gw[widx] += acc_w;
                    }
                }
            }
        }
    }
}

pub(crate) fn upsample_nearest(input: &[f64], out: &mut [f64], c: usize, h: usize, w: usize, f: usize) {
    let (ho, wo) = (h * f, w * f);
    for ch in 0..c {
        for oy in 0..ho {
            let src = &input[(ch * h + oy / f) * w..(ch * h + oy / f + 1) * w];
            let dst = &mut out[(ch * ho + oy) * wo..(ch * ho + oy + 1) * wo];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / f];
            }
        }
    }
}

pub(crate) fn upsample_nearest_backward(
    grad_out: &[f64],
    grad_in: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    f: usize,
) {
    let (ho, wo) = (h * f, w * f);
    for ch in 0..c {
        for oy in 0..ho {
            let row = &grad_out[(ch * ho + oy) * wo..(ch * ho + oy + 1) * wo];
            let base = (ch * h + oy / f) * w;
            for (ox, &g) in row.iter().enumerate() {
                grad_in[base + ox / f] += g;
            }
        }
    }
}
