//! Slice-level numeric kernels shared by the eager `Tensor` API and the tape.
//!
//! All matrices are row-major. The `gemm_*` kernels accumulate into `out`.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (t, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[t * n..(t + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (t, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[t * n..(t + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Row-wise softmax over contiguous rows of width `n`, with max subtraction.
pub(crate) fn softmax_rows(n: usize, x: &[f64], out: &mut [f64]) {
    for (xr, or) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in or.iter_mut() {
            *o /= sum;
        }
    }
}

/// `dx = y ⊙ (dy − Σ(dy ⊙ y))` per row.
pub(crate) fn softmax_rows_backward(n: usize, y: &[f64], dy: &[f64], dx: &mut [f64]) {
    for ((yr, dyr), dxr) in y
        .chunks_exact(n)
        .zip(dy.chunks_exact(n))
        .zip(dx.chunks_exact_mut(n))
    {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d += yv * (g - dot);
        }
    }
}

/// Log-sum-exp of one row.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-row statistics kept by the layer-norm forward for its backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(
    d: usize,
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    out: &mut [f64],
) -> LayerNormCache {
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for (r, xr) in x.chunks_exact(d).enumerate() {
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        let xh = &mut xhat[r * d..(r + 1) * d];
        let or = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            xh[j] = (xr[j] - mean) * is;
            or[j] = gamma[j] * xh[j] + beta[j];
        }
    }
    LayerNormCache { xhat, inv_std }
}

/// Accumulates gradients for input, gamma and beta.
pub(crate) fn layer_norm_backward(
    d: usize,
    cache: &LayerNormCache,
    gamma: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let n = d as f64;
    for (r, dyr) in dy.chunks_exact(d).enumerate() {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let is = cache.inv_std[r];
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for j in 0..d {
            let g = dyr[j] * gamma[j];
            sum_g += g;
            sum_gx += g * xh[j];
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
        }
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            let g = dyr[j] * gamma[j];
            dxr[j] += is * (g - sum_g / n - xh[j] * sum_gx / n);
        }
    }
}
