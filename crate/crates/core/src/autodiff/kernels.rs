//! Raw dense kernels shared by forward and backward passes.
//!
//! Every reduction accumulates in `f64`. The forward matmul sums each output
//! element over the inner dimension in ascending order, independent of the
//! number of rows, so evaluating one row at a time reproduces a batched
//! product bit for bit. Streaming inference relies on this.

use super::tensor::Scalar;

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let acc = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let a_ip = a_ip.widen();
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in acc.iter_mut().zip(b_row) {
                *o += a_ip * bv.widen();
            }
        }
    }
    out
}

/// `c[m×k] = g[m×n] · bᵀ` where `b` is `[k×n]`.
pub fn matmul_nt<T: Scalar>(g: &[f64], b: &[T], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * k];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for j in 0..k {
            let b_row = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in g_row.iter().zip(b_row) {
                s += gv * bv.widen();
            }
            out[i * k + j] = s;
        }
    }
    out
}

/// `c[k×n] = aᵀ · g` where `a` is `[m×k]` and `g` is `[m×n]`.
pub fn matmul_tn<T: Scalar>(a: &[T], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; k * n];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p].widen();
            if a_ip == 0.0 {
                continue;
            }
            let acc = &mut out[p * n..(p + 1) * n];
            for (o, gv) in acc.iter_mut().zip(g_row) {
                *o += a_ip * gv;
            }
        }
    }
    out
}

/// Geometry of a stride-1 2-D cross-correlation with left-only time padding
/// and symmetric frequency padding.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub f_in: usize,
    pub kn: usize,
    pub kk: usize,
    pub pad_t: usize,
    pub pad_f: usize,
    pub t_out: usize,
    pub f_out: usize,
}

impl ConvGeom {
    #[inline]
    fn x_idx(&self, c: usize, t: usize, f: usize) -> usize {
        (c * self.t_in + t) * self.f_in + f
    }
    #[inline]
    fn w_idx(&self, co: usize, ci: usize, n: usize, k: usize) -> usize {
        ((co * self.c_in + ci) * self.kn + n) * self.kk + k
    }
    #[inline]
    fn y_idx(&self, c: usize, t: usize, f: usize) -> usize {
        (c * self.t_out + t) * self.f_out + f
    }

    /// Output frequency range `[lo, hi)` for which input bin `fo + k - pad_f` exists.
    #[inline]
    fn f_range(&self, k: usize) -> (usize, usize) {
        let lo = self.pad_f.saturating_sub(k);
        let hi = (self.f_in + self.pad_f).saturating_sub(k).min(self.f_out);
        (lo, hi.max(lo))
    }

    #[inline]
    fn t_range(&self, n: usize) -> (usize, usize) {
        let lo = self.pad_t.saturating_sub(n);
        let hi = (self.t_in + self.pad_t).saturating_sub(n).min(self.t_out);
        (lo, hi.max(lo))
    }
}

/// Each output element accumulates its terms in `(ci, n, k)` order.
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<f64> {
    let mut y = vec![0.0f64; g.c_out * g.t_out * g.f_out];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for n in 0..g.kn {
                let (t_lo, t_hi) = g.t_range(n);
                for k in 0..g.kk {
                    let wv = w[g.w_idx(co, ci, n, k)].widen();
                    let (f_lo, f_hi) = g.f_range(k);
                    for to in t_lo..t_hi {
                        let ti = to + n - g.pad_t;
                        let yb = g.y_idx(co, to, 0);
                        let xb = g.x_idx(ci, ti, 0);
                        for fo in f_lo..f_hi {
                            let fi = fo + k - g.pad_f;
                            y[yb + fo] += wv * x[xb + fi].widen();
                        }
                    }
                }
            }
        }
    }
    y
}

/// Returns `(dx, dw)` for upstream gradient `gy`.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0f64; g.c_in * g.t_in * g.f_in];
    let mut dw = vec![0.0f64; g.c_out * g.c_in * g.kn * g.kk];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for n in 0..g.kn {
                let (t_lo, t_hi) = g.t_range(n);
                for k in 0..g.kk {
                    let wi = g.w_idx(co, ci, n, k);
                    let wv = w[wi].widen();
                    let (f_lo, f_hi) = g.f_range(k);
                    let mut dwv = 0.0;
                    for to in t_lo..t_hi {
                        let ti = to + n - g.pad_t;
                        let yb = g.y_idx(co, to, 0);
                        let xb = g.x_idx(ci, ti, 0);
                        for fo in f_lo..f_hi {
                            let fi = fo + k - g.pad_f;
                            let gv = gy[yb + fo];
                            dwv += gv * x[xb + fi].widen();
                            dx[xb + fi] += gv * wv;
                        }
                    }
                    dw[wi] += dwv;
                }
            }
        }
    }
    (dx, dw)
}

/// Numerically stable `ln Σ exp(v)`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `ln(e^a + e^b)` with max-factoring.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Row-wise log-softmax in `f64`.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| v - lse).collect()
}
