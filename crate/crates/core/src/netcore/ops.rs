//! Dense/conv/pool/softmax primitives on flat `f64` buffers.
//!
//! Tensors are row-major: an image map stack is indexed `(c * h + y) * w + x`,
//! a kernel bank `((o * in_maps + i) * k + ky) * k + kx`.

use crate::error::{Error, Result};
use crate::netcore::graph::{pooled_dim, POOL_STRIDE, POOL_WINDOW};

/// Valid (no padding, stride 1) cross-correlation plus per-map bias.
/// Output is `out_maps x (h-k+1) x (w-k+1)`.
pub fn conv2d_forward(
    input: &[f64],
    in_maps: usize,
    h: usize,
    w: usize,
    kernels: &[f64],
    bias: &[f64],
    out_maps: usize,
    k: usize,
) -> Result<Vec<f64>> {
    if input.len() != in_maps * h * w {
        return Err(Error::Shape(format!(
            "conv input length {} != {}x{}x{}",
            input.len(),
            in_maps,
            h,
            w
        )));
    }
    if kernels.len() != out_maps * in_maps * k * k || bias.len() != out_maps {
        return Err(Error::Shape("conv kernel/bias length mismatch".into()));
    }
    if h < k || w < k {
        return Err(Error::Shape(format!("conv kernel {k} larger than input {h}x{w}")));
    }
    let oh = h - k + 1;
    let ow = w - k + 1;
    let mut out = vec![0.0; out_maps * oh * ow];
    for o in 0..out_maps {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[o];
                for i in 0..in_maps {
                    let kbase = ((o * in_maps + i) * k) * k;
                    let ibase = i * h * w;
                    for ky in 0..k {
                        let irow = ibase + (oy + ky) * w + ox;
                        let krow = kbase + ky * k;
                        for kx in 0..k {
                            acc += input[irow + kx] * kernels[krow + kx];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Ok(out)
}

/// Gradients of a conv layer. `dinput` is skipped when `want_dinput` is false
/// (the first layer never needs it).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    input: &[f64],
    in_maps: usize,
    h: usize,
    w: usize,
    kernels: &[f64],
    out_maps: usize,
    k: usize,
    dout: &[f64],
    dkernels: &mut [f64],
    dbias: &mut [f64],
    want_dinput: bool,
) -> Option<Vec<f64>> {
    let oh = h - k + 1;
    let ow = w - k + 1;
    let mut dinput = if want_dinput { Some(vec![0.0; in_maps * h * w]) } else { None };
    for o in 0..out_maps {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dout[(o * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                dbias[o] += g;
                for i in 0..in_maps {
                    let kbase = ((o * in_maps + i) * k) * k;
                    let ibase = i * h * w;
                    for ky in 0..k {
                        let irow = ibase + (oy + ky) * w + ox;
                        let krow = kbase + ky * k;
                        for kx in 0..k {
                            dkernels[krow + kx] += input[irow + kx] * g;
                            if let Some(di) = dinput.as_mut() {
                                di[irow + kx] += kernels[krow + kx] * g;
                            }
                        }
                    }
                }
            }
        }
    }
    dinput
}

/// 2x2 stride-2 max pooling. Returns the pooled maps and the flat input index
/// of each window's max; ties keep the first index in row-major scan order so
/// the backward pass routes deterministically.
pub fn maxpool2d_forward(
    input: &[f64],
    maps: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, usize, usize, Vec<usize>) {
    let oh = pooled_dim(h);
    let ow = pooled_dim(w);
    let mut out = vec![0.0; maps * oh * ow];
    let mut arg = vec![0usize; maps * oh * ow];
    for m in 0..maps {
        for oy in 0..oh {
            let y0 = oy * POOL_STRIDE;
            let y1 = (y0 + POOL_WINDOW).min(h);
            for ox in 0..ow {
                let x0 = ox * POOL_STRIDE;
                let x1 = (x0 + POOL_WINDOW).min(w);
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let idx = (m * h + y) * w + x;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                let oidx = (m * oh + oy) * ow + ox;
                out[oidx] = best;
                arg[oidx] = best_idx;
            }
        }
    }
    (out, oh, ow, arg)
}

pub(crate) fn maxpool2d_backward(dout: &[f64], argmax: &[usize], in_len: usize) -> Vec<f64> {
    let mut din = vec![0.0; in_len];
    for (g, &idx) in dout.iter().zip(argmax) {
        din[idx] += g;
    }
    din
}

pub(crate) fn relu_forward(x: &mut [f64]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Backward through relu using the retained (possibly quantized) output:
/// gradient passes where the stored activation is positive.
pub(crate) fn relu_backward(dout: &mut [f64], output: &[f64]) {
    for (g, &o) in dout.iter_mut().zip(output) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// `w` is `out_dim x in_dim` row-major.
pub(crate) fn dense_forward(w: &[f64], b: &[f64], x: &[f64], out_dim: usize, in_dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = b[o];
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        out.push(acc);
    }
    out
}

pub(crate) fn dense_backward(
    w: &[f64],
    x: &[f64],
    dout: &[f64],
    out_dim: usize,
    in_dim: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; in_dim];
    for o in 0..out_dim {
        let g = dout[o];
        db[o] += g;
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let drow = &mut dw[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            drow[i] += x[i] * g;
            dx[i] += row[i] * g;
        }
    }
    dx
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

pub(crate) fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -(probs[label].max(1e-300)).ln()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
