//! Shape-agnostic compute kernels behind the tape ops.
//!
//! Loop orders are chosen so the innermost loop runs unit-stride over
//! contiguous slices and auto-vectorizes. Parallel splits always hand each
//! task a disjoint output region, so results are independent of thread
//! count and of the `parallel` feature.

use super::par;
use super::tensor::Real;

/// Outputs smaller than this stay sequential; the rayon dispatch overhead
/// would dominate.
const PAR_MIN: usize = 1 << 14;

fn row_chunk(rows: usize, cols: usize) -> usize {
    if rows * cols < PAR_MIN {
        rows.max(1)
    } else {
        rows.div_ceil(8).max(4)
    }
}

// ── Matrix products ──────────────────────────────────────────────────

/// c[m,n] = a[m,k] · b[k,n]
pub fn matmul_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let chunk = row_chunk(m, n);
    par::for_each_chunk(c, chunk * n, |ci, c_rows| {
        let i0 = ci * chunk;
        for (ii, c_row) in c_rows.chunks_exact_mut(n).enumerate() {
            let i = i0 + ii;
            let a_row = &a[i * k..(i + 1) * k];
            for (p, &a_ip) in a_row.iter().enumerate() {
                let b_row = &b[p * n..(p + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += a_ip * bv;
                }
            }
        }
    });
}

/// c[m,n] = a[m,k] · b[n,k]ᵀ
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let chunk = row_chunk(m, n);
    par::for_each_chunk(c, chunk * n, |ci, c_rows| {
        let i0 = ci * chunk;
        for (ii, c_row) in c_rows.chunks_exact_mut(n).enumerate() {
            let a_row = &a[(i0 + ii) * k..(i0 + ii + 1) * k];
            for (j, cv) in c_row.iter_mut().enumerate() {
                let b_row = &b[j * k..(j + 1) * k];
                let dot: T = a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
                *cv += dot;
            }
        }
    });
}

/// c[m,n] = a[k,m]ᵀ · b[k,n]
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let chunk = row_chunk(m, n);
    par::for_each_chunk(c, chunk * n, |ci, c_rows| {
        let i0 = ci * chunk;
        for (ii, c_row) in c_rows.chunks_exact_mut(n).enumerate() {
            let i = i0 + ii;
            for p in 0..k {
                let a_pi = a[p * m + i];
                let b_row = &b[p * n..(p + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += a_pi * bv;
                }
            }
        }
    });
}

/// Per-group matmul: c[g,m,n] = a[g,m,k] · b[g,k,n]
pub fn bmm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], g: usize, m: usize, k: usize, n: usize) {
    par::for_each_chunk(c, m * n, |gi, c_g| {
        let a_g = &a[gi * m * k..(gi + 1) * m * k];
        let b_g = &b[gi * k * n..(gi + 1) * k * n];
        for (i, c_row) in c_g.chunks_exact_mut(n).enumerate() {
            for (p, &a_ip) in a_g[i * k..(i + 1) * k].iter().enumerate() {
                let b_row = &b_g[p * n..(p + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += a_ip * bv;
                }
            }
        }
    });
    debug_assert_eq!(c.len(), g * m * n);
}

/// Per-group matmul with transposed rhs: c[g,m,n] = a[g,m,k] · b[g,n,k]ᵀ
pub fn bmm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], g: usize, m: usize, k: usize, n: usize) {
    par::for_each_chunk(c, m * n, |gi, c_g| {
        let a_g = &a[gi * m * k..(gi + 1) * m * k];
        let b_g = &b[gi * n * k..(gi + 1) * n * k];
        for (i, c_row) in c_g.chunks_exact_mut(n).enumerate() {
            let a_row = &a_g[i * k..(i + 1) * k];
            for (j, cv) in c_row.iter_mut().enumerate() {
                let b_row = &b_g[j * k..(j + 1) * k];
                let dot: T = a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
                *cv += dot;
            }
        }
    });
    debug_assert_eq!(c.len(), g * m * n);
}

/// Per-group matmul with transposed lhs: c[g,m,n] = a[g,k,m]ᵀ · b[g,k,n]
pub fn bmm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], g: usize, m: usize, k: usize, n: usize) {
    par::for_each_chunk(c, m * n, |gi, c_g| {
        let a_g = &a[gi * k * m..(gi + 1) * k * m];
        let b_g = &b[gi * k * n..(gi + 1) * k * n];
        for p in 0..k {
            let b_row = &b_g[p * n..(p + 1) * n];
            for i in 0..m {
                let a_pi = a_g[p * m + i];
                let c_row = &mut c_g[i * n..(i + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += a_pi * bv;
                }
            }
        }
    });
    debug_assert_eq!(c.len(), g * m * n);
}

// ── 1-D convolution ──────────────────────────────────────────────────

pub fn conv1d_out_len(l_in: usize, k: usize, stride: usize, pad: usize) -> usize {
    (l_in + 2 * pad - k) / stride + 1
}

pub fn conv1d_transposed_out_len(l_in: usize, k: usize, stride: usize, pad: usize) -> usize {
    (l_in - 1) * stride + k - 2 * pad
}

/// y[b,oc,t] = bias[oc] + Σ_ic Σ_j x[b,ic,t·S+j−P] · w[oc,ic,j]
/// x: [B, C_in, L_in], w: [C_out, C_in, K], y: [B, C_out, L_out]
#[allow(clippy::too_many_arguments)]
pub fn conv1d_fwd<T: Real>(
    x: &[T],
    w: &[T],
    bias: &[T],
    y: &mut [T],
    batch: usize,
    c_in: usize,
    c_out: usize,
    l_in: usize,
    k: usize,
    stride: usize,
    pad: usize,
) {
    let l_out = conv1d_out_len(l_in, k, stride, pad);
    par::for_each_chunk(y, c_out * l_out, |b, y_b| {
        let x_b = &x[b * c_in * l_in..(b + 1) * c_in * l_in];
        for (oc, y_row) in y_b.chunks_exact_mut(l_out).enumerate() {
            y_row.fill(bias[oc]);
            for ic in 0..c_in {
                let x_row = &x_b[ic * l_in..(ic + 1) * l_in];
                let w_row = &w[(oc * c_in + ic) * k..(oc * c_in + ic + 1) * k];
                for (j, &wv) in w_row.iter().enumerate() {
                    // valid t range: 0 <= t*S + j - P < L_in
                    let (t_lo, t_hi) = conv_t_range(l_in, l_out, stride, pad, j);
                    for t in t_lo..t_hi {
                        y_row[t] += wv * x_row[t * stride + j - pad];
                    }
                }
            }
        }
    });
    debug_assert_eq!(y.len(), batch * c_out * l_out);
}

/// Range of output positions t for which t·S + j − P lands inside [0, L_in).
#[inline]
fn conv_t_range(l_in: usize, l_out: usize, stride: usize, pad: usize, j: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(j).div_ceil(stride);
    let hi = if l_in + pad > j {
        (((l_in + pad - j - 1) / stride) + 1).min(l_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Gradients of conv1d w.r.t. input, weight, and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_bwd<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
    batch: usize,
    c_in: usize,
    c_out: usize,
    l_in: usize,
    k: usize,
    stride: usize,
    pad: usize,
) {
    let l_out = conv1d_out_len(l_in, k, stride, pad);
    // dx: each batch item is a disjoint region.
    par::for_each_chunk(dx, c_in * l_in, |b, dx_b| {
        let dy_b = &dy[b * c_out * l_out..(b + 1) * c_out * l_out];
        for oc in 0..c_out {
            let dy_row = &dy_b[oc * l_out..(oc + 1) * l_out];
            for ic in 0..c_in {
                let dx_row = &mut dx_b[ic * l_in..(ic + 1) * l_in];
                let w_row = &w[(oc * c_in + ic) * k..(oc * c_in + ic + 1) * k];
                for (j, &wv) in w_row.iter().enumerate() {
                    let (t_lo, t_hi) = conv_t_range(l_in, l_out, stride, pad, j);
                    for t in t_lo..t_hi {
                        dx_row[t * stride + j - pad] += wv * dy_row[t];
                    }
                }
            }
        }
    });
    // dw and db accumulate over batch; keep a fixed summation order.
    for b in 0..batch {
        let x_b = &x[b * c_in * l_in..(b + 1) * c_in * l_in];
        let dy_b = &dy[b * c_out * l_out..(b + 1) * c_out * l_out];
        for oc in 0..c_out {
            let dy_row = &dy_b[oc * l_out..(oc + 1) * l_out];
            db[oc] += dy_row.iter().copied().sum();
            for ic in 0..c_in {
                let x_row = &x_b[ic * l_in..(ic + 1) * l_in];
                let dw_row = &mut dw[(oc * c_in + ic) * k..(oc * c_in + ic + 1) * k];
                for (j, dwv) in dw_row.iter_mut().enumerate() {
                    let (t_lo, t_hi) = conv_t_range(l_in, l_out, stride, pad, j);
                    let mut acc = T::ZERO;
                    for t in t_lo..t_hi {
                        acc += dy_row[t] * x_row[t * stride + j - pad];
                    }
                    *dwv += acc;
                }
            }
        }
    }
}

/// y[b,oc,t·S+j−P] += Σ_ic x[b,ic,t] · w[ic,oc,j]
/// x: [B, C_in, L_in], w: [C_in, C_out, K], y: [B, C_out, L_out]
#[allow(clippy::too_many_arguments)]
pub fn conv1d_transposed_fwd<T: Real>(
    x: &[T],
    w: &[T],
    bias: &[T],
    y: &mut [T],
    batch: usize,
    c_in: usize,
    c_out: usize,
    l_in: usize,
    k: usize,
    stride: usize,
    pad: usize,
) {
    let l_out = conv1d_transposed_out_len(l_in, k, stride, pad);
    par::for_each_chunk(y, c_out * l_out, |b, y_b| {
        let x_b = &x[b * c_in * l_in..(b + 1) * c_in * l_in];
        for (oc, y_row) in y_b.chunks_exact_mut(l_out).enumerate() {
            y_row.fill(bias[oc]);
            for ic in 0..c_in {
                let x_row = &x_b[ic * l_in..(ic + 1) * l_in];
                let w_row = &w[(ic * c_out + oc) * k..(ic * c_out + oc + 1) * k];
                for (t, &xv) in x_row.iter().enumerate() {
                    let base = t * stride;
                    for (j, &wv) in w_row.iter().enumerate() {
                        let pos = base + j;
                        if pos >= pad && pos - pad < l_out {
                            y_row[pos - pad] += xv * wv;
                        }
                    }
                }
            }
        }
    });
    debug_assert_eq!(y.len(), batch * c_out * l_out);
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d_transposed_bwd<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
    batch: usize,
    c_in: usize,
    c_out: usize,
    l_in: usize,
    k: usize,
    stride: usize,
    pad: usize,
) {
    let l_out = conv1d_transposed_out_len(l_in, k, stride, pad);
    par::for_each_chunk(dx, c_in * l_in, |b, dx_b| {
        let dy_b = &dy[b * c_out * l_out..(b + 1) * c_out * l_out];
        for ic in 0..c_in {
            let dx_row = &mut dx_b[ic * l_in..(ic + 1) * l_in];
            for oc in 0..c_out {
                let dy_row = &dy_b[oc * l_out..(oc + 1) * l_out];
                let w_row = &w[(ic * c_out + oc) * k..(ic * c_out + oc + 1) * k];
                for (t, dxv) in dx_row.iter_mut().enumerate() {
                    let base = t * stride;
                    let mut acc = T::ZERO;
                    for (j, &wv) in w_row.iter().enumerate() {
                        let pos = base + j;
                        if pos >= pad && pos - pad < l_out {
                            acc += wv * dy_row[pos - pad];
                        }
                    }
                    *dxv += acc;
                }
            }
        }
    });
    for b in 0..batch {
        let x_b = &x[b * c_in * l_in..(b + 1) * c_in * l_in];
        let dy_b = &dy[b * c_out * l_out..(b + 1) * c_out * l_out];
        for oc in 0..c_out {
            let dy_row = &dy_b[oc * l_out..(oc + 1) * l_out];
            db[oc] += dy_row.iter().copied().sum();
        }
        for ic in 0..c_in {
            let x_row = &x_b[ic * l_in..(ic + 1) * l_in];
            for oc in 0..c_out {
                let dy_row = &dy_b[oc * l_out..(oc + 1) * l_out];
                let dw_row = &mut dw[(ic * c_out + oc) * k..(ic * c_out + oc + 1) * k];
                for (t, &xv) in x_row.iter().enumerate() {
                    let base = t * stride;
                    for (j, dwv) in dw_row.iter_mut().enumerate() {
                        let pos = base + j;
                        if pos >= pad && pos - pad < l_out {
                            *dwv += xv * dy_row[pos - pad];
                        }
                    }
                }
            }
        }
    }
}

// ── Normalization and activations ────────────────────────────────────

/// Row-wise layer normalization. Saves per-row (mean, inv_std) for backward.
pub fn layernorm_fwd<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    y: &mut [T],
    stats: &mut [T],
    rows: usize,
    cols: usize,
    eps: T,
) {
    debug_assert_eq!(stats.len(), 2 * rows);
    let inv_c = T::ONE / T::from_f64(cols as f64);
    for r in 0..rows {
        let x_row = &x[r * cols..(r + 1) * cols];
        let y_row = &mut y[r * cols..(r + 1) * cols];
        let mean: T = x_row.iter().copied().sum::<T>() * inv_c;
        let var: T = x_row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let inv_std = T::ONE / (var + eps).sqrt();
        stats[2 * r] = mean;
        stats[2 * r + 1] = inv_std;
        for ((yv, &xv), (&g, &b)) in y_row.iter_mut().zip(x_row).zip(gamma.iter().zip(beta)) {
            *yv = (xv - mean) * inv_std * g + b;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layernorm_bwd<T: Real>(
    x: &[T],
    gamma: &[T],
    stats: &[T],
    dy: &[T],
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
    rows: usize,
    cols: usize,
) {
    let inv_c = T::ONE / T::from_f64(cols as f64);
    for r in 0..rows {
        let x_row = &x[r * cols..(r + 1) * cols];
        let dy_row = &dy[r * cols..(r + 1) * cols];
        let dx_row = &mut dx[r * cols..(r + 1) * cols];
        let mean = stats[2 * r];
        let inv_std = stats[2 * r + 1];

        // dxhat = dy * gamma; two reductions give the mean terms.
        let mut sum_dxhat = T::ZERO;
        let mut sum_dxhat_xhat = T::ZERO;
        for ((&dyv, &xv), &g) in dy_row.iter().zip(x_row).zip(gamma.iter()) {
            let xhat = (xv - mean) * inv_std;
            let dxhat = dyv * g;
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        for (((dxv, &dyv), &xv), &g) in
            dx_row.iter_mut().zip(dy_row).zip(x_row).zip(gamma.iter())
        {
            let xhat = (xv - mean) * inv_std;
            let dxhat = dyv * g;
            *dxv += (dxhat - inv_c * (sum_dxhat + xhat * sum_dxhat_xhat)) * inv_std;
        }
        for ((dg, db), (&dyv, &xv)) in
            dgamma.iter_mut().zip(dbeta.iter_mut()).zip(dy_row.iter().zip(x_row))
        {
            let xhat = (xv - mean) * inv_std;
            *dg += dyv * xhat;
            *db += dyv;
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(x: &[T], y: &mut [T], rows: usize, cols: usize) {
    let chunk = row_chunk(rows, cols);
    par::for_each_chunk(y, chunk * cols, |ci, y_rows| {
        let r0 = ci * chunk;
        for (ri, y_row) in y_rows.chunks_exact_mut(cols).enumerate() {
            let x_row = &x[(r0 + ri) * cols..(r0 + ri + 1) * cols];
            let mut mx = x_row[0];
            for &v in x_row {
                mx = mx.max_val(v);
            }
            let mut sum = T::ZERO;
            for (yv, &xv) in y_row.iter_mut().zip(x_row) {
                let e = (xv - mx).exp();
                *yv = e;
                sum += e;
            }
            let inv = T::ONE / sum;
            for yv in y_row.iter_mut() {
                *yv *= inv;
            }
        }
    });
}

/// dx = y ⊙ (dy − Σ_cols(dy ⊙ y)), given saved y.
pub fn softmax_rows_bwd<T: Real>(y: &[T], dy: &[T], dx: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        let y_row = &y[r * cols..(r + 1) * cols];
        let dy_row = &dy[r * cols..(r + 1) * cols];
        let dot: T = y_row.iter().zip(dy_row).map(|(&a, &b)| a * b).sum();
        let dx_row = &mut dx[r * cols..(r + 1) * cols];
        for ((dxv, &yv), &dyv) in dx_row.iter_mut().zip(y_row).zip(dy_row) {
            *dxv += yv * (dyv - dot);
        }
    }
}

pub fn log_softmax_rows<T: Real>(x: &[T], y: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        let x_row = &x[r * cols..(r + 1) * cols];
        let y_row = &mut y[r * cols..(r + 1) * cols];
        let mut mx = x_row[0];
        for &v in x_row {
            mx = mx.max_val(v);
        }
        let mut sum = T::ZERO;
        for &xv in x_row {
            sum += (xv - mx).exp();
        }
        let lse = mx + sum.ln();
        for (yv, &xv) in y_row.iter_mut().zip(x_row) {
            *yv = xv - lse;
        }
    }
}

/// dx = dy − softmax(x) · Σ_cols dy, given saved y = log_softmax(x).
pub fn log_softmax_rows_bwd<T: Real>(y: &[T], dy: &[T], dx: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        let y_row = &y[r * cols..(r + 1) * cols];
        let dy_row = &dy[r * cols..(r + 1) * cols];
        let sum_dy: T = dy_row.iter().copied().sum();
        let dx_row = &mut dx[r * cols..(r + 1) * cols];
        for ((dxv, &yv), &dyv) in dx_row.iter_mut().zip(y_row).zip(dy_row) {
            *dxv += dyv - yv.exp() * sum_dy;
        }
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (T::ONE + inner.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three * a * x * x)
}

/// Elementwise map, parallel for large buffers.
pub fn unary_map<T: Real>(x: &[T], y: &mut [T], f: impl Fn(T) -> T + Send + Sync) {
    let chunk = if x.len() < PAR_MIN { x.len().max(1) } else { x.len().div_ceil(8) };
    par::for_each_chunk(y, chunk, |ci, y_chunk| {
        let base = ci * chunk;
        for (i, yv) in y_chunk.iter_mut().enumerate() {
            *yv = f(x[base + i]);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let mut s = crate::numerics::Stream::new(1);
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|_| s.next_normal()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| s.next_normal()).collect();
        let want = naive_matmul(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        matmul_nn(&a, &b, &mut c, m, k, n);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        // b transposed: bt[n,k]
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c = vec![0.0; m * n];
        matmul_nt(&a, &bt, &mut c, m, k, n);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        // a transposed: at[k,m]
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c = vec![0.0; m * n];
        matmul_tn(&at, &b, &mut c, m, k, n);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn conv_length_formulas() {
        assert_eq!(conv1d_out_len(64, 4, 2, 1), 32);
        assert_eq!(conv1d_transposed_out_len(16, 8, 4, 2), 64);
        // the pair used by the text-to-latent upsampler
        assert_eq!(conv1d_transposed_out_len(16, 8, 4, 2), 64);
        assert_eq!(conv1d_out_len(256, 3, 2, 1), 128);
        assert_eq!(conv1d_out_len(128, 3, 2, 1), 64);
    }

    #[test]
    fn conv1d_matches_naive() {
        let mut s = crate::numerics::Stream::new(2);
        let (batch, c_in, c_out, l_in, k, stride, pad) = (2, 3, 4, 10, 3, 2, 1);
        let l_out = conv1d_out_len(l_in, k, stride, pad);
        let x: Vec<f64> = (0..batch * c_in * l_in).map(|_| s.next_normal()).collect();
        let w: Vec<f64> = (0..c_out * c_in * k).map(|_| s.next_normal()).collect();
        let bias: Vec<f64> = (0..c_out).map(|_| s.next_normal()).collect();

        let mut got = vec![0.0; batch * c_out * l_out];
        conv1d_fwd(&x, &w, &bias, &mut got, batch, c_in, c_out, l_in, k, stride, pad);

        for b in 0..batch {
            for oc in 0..c_out {
                for t in 0..l_out {
                    let mut want = bias[oc];
                    for ic in 0..c_in {
                        for j in 0..k {
                            let pos = (t * stride + j) as isize - pad as isize;
                            if pos >= 0 && (pos as usize) < l_in {
                                want += x[(b * c_in + ic) * l_in + pos as usize]
                                    * w[(oc * c_in + ic) * k + j];
                            }
                        }
                    }
                    let g = got[(b * c_out + oc) * l_out + t];
                    assert!((g - want).abs() < 1e-12, "b={b} oc={oc} t={t}");
                }
            }
        }
    }

    #[test]
    fn transposed_conv_matches_naive() {
        let mut s = crate::numerics::Stream::new(3);
        let (batch, c_in, c_out, l_in, k, stride, pad) = (2, 3, 2, 5, 4, 2, 1);
        let l_out = conv1d_transposed_out_len(l_in, k, stride, pad);
        let x: Vec<f64> = (0..batch * c_in * l_in).map(|_| s.next_normal()).collect();
        let w: Vec<f64> = (0..c_in * c_out * k).map(|_| s.next_normal()).collect();
        let bias: Vec<f64> = (0..c_out).map(|_| s.next_normal()).collect();

        let mut got = vec![0.0; batch * c_out * l_out];
        conv1d_transposed_fwd(&x, &w, &bias, &mut got, batch, c_in, c_out, l_in, k, stride, pad);

        let mut want = vec![0.0; batch * c_out * l_out];
        for b in 0..batch {
            for oc in 0..c_out {
                for t in 0..l_out {
                    want[(b * c_out + oc) * l_out + t] = bias[oc];
                }
            }
            for ic in 0..c_in {
                for t in 0..l_in {
                    for j in 0..k {
                        let pos = (t * stride + j) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < l_out {
                            for oc in 0..c_out {
                                want[(b * c_out + oc) * l_out + pos as usize] += x
                                    [(b * c_in + ic) * l_in + t]
                                    * w[(ic * c_out + oc) * k + j];
                            }
                        }
                    }
                }
            }
        }
        assert!(got.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let x = [0.0f32, 0.0, 0.0];
        let mut y = [0.0f32; 3];
        softmax_rows(&x, &mut y, 1, 3);
        for v in y {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn layernorm_moments() {
        let mut s = crate::numerics::Stream::new(4);
        let (rows, cols) = (5, 32);
        let x: Vec<f32> = (0..rows * cols).map(|_| s.next_normal() as f32 * 3.0 + 1.5).collect();
        let gamma = vec![1.0f32; cols];
        let beta = vec![0.0f32; cols];
        let mut y = vec![0.0f32; rows * cols];
        let mut stats = vec![0.0f32; 2 * rows];
        layernorm_fwd(&x, &gamma, &beta, &mut y, &mut stats, rows, cols, 1e-5);
        for r in 0..rows {
            let row = &y[r * cols..(r + 1) * cols];
            let mean: f32 = row.iter().sum::<f32>() / cols as f32;
            let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            assert!(mean.abs() < 1e-5, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "row {r} var {var}");
        }
    }
}
