//! Plain-loop forward and backward kernels shared by the tape ops.

/// y = x @ w (+ bias), with x treated as (rows, d_in) over its flattened
/// leading axes and w of shape (d_in, d_out).
pub(crate) fn linear_fwd(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    rows: usize,
    d_in: usize,
    d_out: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; rows * d_out];
    for r in 0..rows {
        let xr = &x[r * d_in..(r + 1) * d_in];
        let yr = &mut y[r * d_out..(r + 1) * d_out];
        if let Some(b) = bias {
            yr.copy_from_slice(b);
        }
        for (i, &xi) in xr.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wrow = &w[i * d_out..(i + 1) * d_out];
            for (yj, &wij) in yr.iter_mut().zip(wrow) {
                *yj += xi * wij;
            }
        }
    }
    y
}

pub(crate) fn linear_bwd_x(g: &[f64], w: &[f64], rows: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut gx = vec![0.0; rows * d_in];
    for r in 0..rows {
        let gr = &g[r * d_out..(r + 1) * d_out];
        let gxr = &mut gx[r * d_in..(r + 1) * d_in];
        for i in 0..d_in {
            let wrow = &w[i * d_out..(i + 1) * d_out];
            let mut s = 0.0;
            for (gj, wij) in gr.iter().zip(wrow) {
                s += gj * wij;
            }
            gxr[i] = s;
        }
    }
    gx
}

pub(crate) fn linear_bwd_w(x: &[f64], g: &[f64], rows: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut gw = vec![0.0; d_in * d_out];
    for r in 0..rows {
        let xr = &x[r * d_in..(r + 1) * d_in];
        let gr = &g[r * d_out..(r + 1) * d_out];
        for (i, &xi) in xr.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let gwrow = &mut gw[i * d_out..(i + 1) * d_out];
            for (gwij, &gj) in gwrow.iter_mut().zip(gr) {
                *gwij += xi * gj;
            }
        }
    }
    gw
}

pub(crate) fn linear_bwd_bias(g: &[f64], rows: usize, d_out: usize) -> Vec<f64> {
    let mut gb = vec![0.0; d_out];
    for r in 0..rows {
        for (gbj, &gj) in gb.iter_mut().zip(&g[r * d_out..(r + 1) * d_out]) {
            *gbj += gj;
        }
    }
    gb
}

/// LayerNorm over the trailing axis of length `c`, with gain/bias of length `c`.
/// Returns (y, mean, inv_std) with one mean/inv_std per row.
pub(crate) fn layernorm_fwd(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    rows: usize,
    c: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut means = vec![0.0; rows];
    let mut inv_stds = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * c..(r + 1) * c];
        let mean = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        means[r] = mean;
        inv_stds[r] = inv_std;
        let yr = &mut y[r * c..(r + 1) * c];
        for j in 0..c {
            yr[j] = (xr[j] - mean) * inv_std * gain[j] + bias[j];
        }
    }
    (y, means, inv_stds)
}

pub(crate) fn layernorm_bwd(
    x: &[f64],
    gain: &[f64],
    means: &[f64],
    inv_stds: &[f64],
    g: &[f64],
    rows: usize,
    c: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut ggain = vec![0.0; c];
    let mut gbias = vec![0.0; c];
    let cf = c as f64;
    for r in 0..rows {
        let xr = &x[r * c..(r + 1) * c];
        let gr = &g[r * c..(r + 1) * c];
        let mean = means[r];
        let inv_std = inv_stds[r];
        // x_hat = (x - mean) * inv_std; dy/dx via the standard three-term form
        let mut sum_gg = 0.0; // sum of gain*g
        let mut sum_ggx = 0.0; // sum of gain*g*x_hat
        for j in 0..c {
            let xh = (xr[j] - mean) * inv_std;
            let gg = gain[j] * gr[j];
            sum_gg += gg;
            sum_ggx += gg * xh;
            ggain[j] += gr[j] * xh;
            gbias[j] += gr[j];
        }
        let gxr = &mut gx[r * c..(r + 1) * c];
        for j in 0..c {
            let xh = (xr[j] - mean) * inv_std;
            gxr[j] = (gain[j] * gr[j] - sum_gg / cf - xh * sum_ggx / cf) * inv_std;
        }
    }
    (gx, ggain, gbias)
}

/// Mean over the middle axis of (b, n, c) -> (b, c).
pub(crate) fn mean_mid_fwd(x: &[f64], b: usize, n: usize, c: usize) -> Vec<f64> {
    let mut y = vec![0.0; b * c];
    for bi in 0..b {
        for ni in 0..n {
            let xr = &x[(bi * n + ni) * c..(bi * n + ni + 1) * c];
            let yr = &mut y[bi * c..(bi + 1) * c];
            for (yj, &xj) in yr.iter_mut().zip(xr) {
                *yj += xj;
            }
        }
    }
    let inv = 1.0 / n as f64;
    for v in &mut y {
        *v *= inv;
    }
    y
}

pub(crate) fn mean_mid_bwd(g: &[f64], b: usize, n: usize, c: usize) -> Vec<f64> {
    let inv = 1.0 / n as f64;
    let mut gx = vec![0.0; b * n * c];
    for bi in 0..b {
        let gr = &g[bi * c..(bi + 1) * c];
        for ni in 0..n {
            let gxr = &mut gx[(bi * n + ni) * c..(bi * n + ni + 1) * c];
            for (gxj, &gj) in gxr.iter_mut().zip(gr) {
                *gxj = gj * inv;
            }
        }
    }
    gx
}

/// Per-channel scaling of (b, n, c) by scores (b, c).
pub(crate) fn scale_channels_fwd(x: &[f64], s: &[f64], b: usize, n: usize, c: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for bi in 0..b {
        let sr = &s[bi * c..(bi + 1) * c];
        for ni in 0..n {
            let base = (bi * n + ni) * c;
            for j in 0..c {
                y[base + j] = x[base + j] * sr[j];
            }
        }
    }
    y
}

pub(crate) fn scale_channels_bwd(
    x: &[f64],
    s: &[f64],
    g: &[f64],
    b: usize,
    n: usize,
    c: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gs = vec![0.0; s.len()];
    for bi in 0..b {
        let sr = &s[bi * c..(bi + 1) * c];
        let gsr = &mut gs[bi * c..(bi + 1) * c];
        for ni in 0..n {
            let base = (bi * n + ni) * c;
            for j in 0..c {
                gx[base + j] = g[base + j] * sr[j];
                gsr[j] += g[base + j] * x[base + j];
            }
        }
    }
    (gx, gs)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softplus: max(x, 0) + ln(1 + e^{-|x|}).
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}
