//! Direct convolution kernels, channels-last layout.

/// Output side for one spatial axis under symmetric zero padding.
pub(crate) fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Full 2-D convolution.
/// x: (b, h, w, ci), weight: (kh, kw, ci, co), bias: (co).
pub(crate) fn conv2d_fwd(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    dims: Conv2dDims,
) -> Vec<f64> {
    let Conv2dDims { b, h, wd, ci, co, kh, kw, stride, pad, oh, ow } = dims;
    let mut y = vec![0.0; b * oh * ow * co];
    if let Some(bs) = bias {
        for chunk in y.chunks_exact_mut(co) {
            chunk.copy_from_slice(bs);
        }
    }
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let out_base = ((bi * oh + oy) * ow + ox) * co;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix as usize >= wd {
                            continue;
                        }
                        let in_base = ((bi * h + iy as usize) * wd + ix as usize) * ci;
                        let w_base = (ky * kw + kx) * ci * co;
                        for c_in in 0..ci {
                            let xv = x[in_base + c_in];
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = &w[w_base + c_in * co..w_base + (c_in + 1) * co];
                            let yrow = &mut y[out_base..out_base + co];
                            for (yv, &wv) in yrow.iter_mut().zip(wrow) {
                                *yv += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn conv2d_bwd(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    dims: Conv2dDims,
    has_bias: bool,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let Conv2dDims { b, h, wd, ci, co, kh, kw, stride, pad, oh, ow } = dims;
    let mut gx = vec![0.0; b * h * wd * ci];
    let mut gw = vec![0.0; kh * kw * ci * co];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let grow = &g[((bi * oh + oy) * ow + ox) * co..((bi * oh + oy) * ow + ox + 1) * co];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix as usize >= wd {
                            continue;
                        }
                        let in_base = ((bi * h + iy as usize) * wd + ix as usize) * ci;
                        let w_base = (ky * kw + kx) * ci * co;
                        for c_in in 0..ci {
                            let wrow = &w[w_base + c_in * co..w_base + (c_in + 1) * co];
                            let gwrow = &mut gw[w_base + c_in * co..w_base + (c_in + 1) * co];
                            let xv = x[in_base + c_in];
                            let mut acc = 0.0;
                            for j in 0..co {
                                acc += grow[j] * wrow[j];
                                gwrow[j] += grow[j] * xv;
                            }
                            gx[in_base + c_in] += acc;
                        }
                    }
                }
            }
        }
    }
    let gb = has_bias.then(|| {
        let mut gb = vec![0.0; co];
        for chunk in g.chunks_exact(co) {
            for (gbj, &gj) in gb.iter_mut().zip(chunk) {
                *gbj += gj;
            }
        }
        gb
    });
    (gx, gw, gb)
}

#[derive(Clone, Copy)]
pub(crate) struct Conv2dDims {
    pub b: usize,
    pub h: usize,
    pub wd: usize,
    pub ci: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Depth-wise 2-D convolution, stride 1.
/// x: (b, h, w, c), weight: (k, k, c), bias: (c).
pub(crate) fn dwconv2d_fwd(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    b: usize,
    h: usize,
    wd: usize,
    c: usize,
    k: usize,
    pad: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; b * h * wd * c];
    if let Some(bs) = bias {
        for chunk in y.chunks_exact_mut(c) {
            chunk.copy_from_slice(bs);
        }
    }
    for bi in 0..b {
        for oy in 0..h {
            for ox in 0..wd {
                let out_base = ((bi * h + oy) * wd + ox) * c;
                for ky in 0..k {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix as usize >= wd {
                            continue;
                        }
                        let in_base = ((bi * h + iy as usize) * wd + ix as usize) * c;
                        let wrow = &w[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                        for ch in 0..c {
                            y[out_base + ch] += x[in_base + ch] * wrow[ch];
                        }
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn dwconv2d_bwd(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    b: usize,
    h: usize,
    wd: usize,
    c: usize,
    k: usize,
    pad: usize,
    has_bias: bool,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for bi in 0..b {
        for oy in 0..h {
            for ox in 0..wd {
                let out_base = ((bi * h + oy) * wd + ox) * c;
                for ky in 0..k {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix as usize >= wd {
                            continue;
                        }
                        let in_base = ((bi * h + iy as usize) * wd + ix as usize) * c;
                        let w_off = (ky * k + kx) * c;
                        for ch in 0..c {
                            gx[in_base + ch] += g[out_base + ch] * w[w_off + ch];
                            gw[w_off + ch] += g[out_base + ch] * x[in_base + ch];
                        }
                    }
                }
            }
        }
    }
    let gb = has_bias.then(|| {
        let mut gb = vec![0.0; c];
        for chunk in g.chunks_exact(c) {
            for (gbj, &gj) in gb.iter_mut().zip(chunk) {
                *gbj += gj;
            }
        }
        gb
    });
    (gx, gw, gb)
}

/// 1-D convolution along the trailing axis of (rows, l): one shared kernel,
/// no channel mixing, symmetric zero padding, no bias.
pub(crate) fn conv1d_fwd(x: &[f64], w: &[f64], rows: usize, l: usize, pad: usize) -> Vec<f64> {
    let k = w.len();
    let mut y = vec![0.0; rows * l];
    for r in 0..rows {
        let xr = &x[r * l..(r + 1) * l];
        let yr = &mut y[r * l..(r + 1) * l];
        for o in 0..l {
            let mut acc = 0.0;
            for (j, &wj) in w.iter().enumerate() {
                let i = (o + j) as isize - pad as isize;
                if i >= 0 && (i as usize) < l {
                    acc += xr[i as usize] * wj;
                }
            }
            yr[o] = acc;
        }
    }
    let _ = k;
    y
}

pub(crate) fn conv1d_bwd(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    rows: usize,
    l: usize,
    pad: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for r in 0..rows {
        let xr = &x[r * l..(r + 1) * l];
        let gr = &g[r * l..(r + 1) * l];
        let gxr = &mut gx[r * l..(r + 1) * l];
        for o in 0..l {
            for (j, &wj) in w.iter().enumerate() {
                let i = (o + j) as isize - pad as isize;
                if i >= 0 && (i as usize) < l {
                    gxr[i as usize] += gr[o] * wj;
                    gw[j] += gr[o] * xr[i as usize];
                }
            }
        }
    }
    (gx, gw)
}
