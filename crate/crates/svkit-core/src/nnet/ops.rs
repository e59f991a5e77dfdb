//! Forward/backward kernels for the layers used by the embedding
//! extractors and the U-net detector. All tensors are `[n, h, w, c]`
//! row-major unless stated otherwise.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const STATS_VAR_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    /// Output spatial size ceil(in/stride); zero padding split low/high.
    Same,
    /// No padding; output floor((in-k)/stride)+1.
    Valid,
}

pub(crate) fn conv_geometry(
    in_h: usize,
    in_w: usize,
    k: usize,
    stride: usize,
    pad: Pad,
) -> (usize, usize, usize, usize) {
    match pad {
        Pad::Same => {
            let out_h = in_h.div_ceil(stride);
            let out_w = in_w.div_ceil(stride);
            let pad_h = ((out_h - 1) * stride + k).saturating_sub(in_h);
            let pad_w = ((out_w - 1) * stride + k).saturating_sub(in_w);
            (out_h, out_w, pad_h / 2, pad_w / 2)
        }
        Pad::Valid => {
            let out_h = (in_h - k) / stride + 1;
            let out_w = (in_w - k) / stride + 1;
            (out_h, out_w, 0, 0)
        }
    }
}

/// Cross-correlation of `x [n,h,w,ci]` with `w [k,k,ci,co]`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: Pad) -> Result<Tensor> {
    if x.ndim() != 4 || w.ndim() != 4 {
        return Err(Error::ShapeMismatch("conv2d wants 4-D input and kernel".into()));
    }
    let (n, in_h, in_w, ci) = x.dims4();
    let (kh, kw, wci, co) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    if kh != kw {
        return Err(Error::ShapeMismatch("conv2d kernels must be square".into()));
    }
    if wci != ci {
        return Err(Error::ShapeMismatch(alloc::format!(
            "conv2d channel mismatch: input {ci}, kernel {wci}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidInput("conv2d stride must be positive".into()));
    }
    if pad == Pad::Valid && (in_h < kh || in_w < kh) {
        return Err(Error::ShapeMismatch("conv2d valid padding needs input >= kernel".into()));
    }
    let k = kh;
    let (out_h, out_w, pad_h, pad_w) = conv_geometry(in_h, in_w, k, stride, pad);
    let mut y = Tensor::zeros(&[n, out_h, out_w, co]);
    let xd = x.data();
    let wd = w.data();
    let yd = y.data_mut();
    for b in 0..n {
        for oh in 0..out_h {
            let ih0 = (oh * stride) as isize - pad_h as isize;
            for ow in 0..out_w {
                let iw0 = (ow * stride) as isize - pad_w as isize;
                let y_off = ((b * out_h + oh) * out_w + ow) * co;
                let acc = &mut yd[y_off..y_off + co];
                for dh in 0..k {
                    let ih = ih0 + dh as isize;
                    if ih < 0 || ih >= in_h as isize {
                        continue;
                    }
                    for dw in 0..k {
                        let iw = iw0 + dw as isize;
                        if iw < 0 || iw >= in_w as isize {
                            continue;
                        }
                        let x_off = ((b * in_h + ih as usize) * in_w + iw as usize) * ci;
                        let w_off = (dh * k + dw) * ci * co;
                        for c_in in 0..ci {
                            let xv = xd[x_off + c_in];
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = &wd[w_off + c_in * co..w_off + (c_in + 1) * co];
                            for (a, &wv) in acc.iter_mut().zip(wrow.iter()) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: Pad,
    dy: &Tensor,
) -> (Tensor, Tensor) {
    let (n, in_h, in_w, ci) = x.dims4();
    let k = w.dim(0);
    let co = w.dim(3);
    let (out_h, out_w, pad_h, pad_w) = conv_geometry(in_h, in_w, k, stride, pad);
    let mut dx = Tensor::zeros(x.dims());
    let mut dw = Tensor::zeros(w.dims());
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();
    let dxd = dx.data_mut();
    let dwd = dw.data_mut();
    for b in 0..n {
        for oh in 0..out_h {
            let ih0 = (oh * stride) as isize - pad_h as isize;
            for ow in 0..out_w {
                let iw0 = (ow * stride) as isize - pad_w as isize;
                let dy_off = ((b * out_h + oh) * out_w + ow) * co;
                let g = &dyd[dy_off..dy_off + co];
                for dh in 0..k {
                    let ih = ih0 + dh as isize;
                    if ih < 0 || ih >= in_h as isize {
                        continue;
                    }
                    for dwi in 0..k {
                        let iw = iw0 + dwi as isize;
                        if iw < 0 || iw >= in_w as isize {
                            continue;
                        }
                        let x_off = ((b * in_h + ih as usize) * in_w + iw as usize) * ci;
                        let w_off = (dh * k + dwi) * ci * co;
                        for c_in in 0..ci {
                            let xv = xd[x_off + c_in];
                            let wrow = &wd[w_off + c_in * co..w_off + (c_in + 1) * co];
                            let dwrow = &mut dwd[w_off + c_in * co..w_off + (c_in + 1) * co];
                            let mut acc = 0.0;
                            for ((&gv, &wv), dwv) in g.iter().zip(wrow.iter()).zip(dwrow.iter_mut())
                            {
                                acc += gv * wv;
                                *dwv += gv * xv;
                            }
                            dxd[x_off + c_in] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Per-channel mean and population variance over batch and space.
pub fn bn_channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, h, w, c) = x.dims4();
    let count = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (i, &v) in x.data().iter().enumerate() {
        mean[i % c] += v;
    }
    for m in mean.iter_mut() {
        *m /= count;
    }
    for (i, &v) in x.data().iter().enumerate() {
        let d = v - mean[i % c];
        var[i % c] += d * d;
    }
    for v in var.iter_mut() {
        *v /= count;
    }
    (mean, var)
}

/// (x - mean)/sqrt(var + eps) * gamma + beta, channels on the last axis.
pub fn bn_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Tensor {
    let c = *x.dims().last().unwrap();
    debug_assert!(gamma.len() == c && beta.len() == c && mean.len() == c && var.len() == c);
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / math::sqrt(v + eps)).collect();
    let mut y = Tensor::zeros(x.dims());
    for (i, (out, &v)) in y.data_mut().iter_mut().zip(x.data().iter()).enumerate() {
        let ch = i % c;
        *out = (v - mean[ch]) * inv_std[ch] * gamma[ch] + beta[ch];
    }
    y
}

/// Backward when mean/var are constants (inference statistics).
pub fn bn_backward_eval(
    x: &Tensor,
    gamma: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    dy: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let c = *x.dims().last().unwrap();
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / math::sqrt(v + eps)).collect();
    let mut dx = Tensor::zeros(x.dims());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (i, (&g, &xv)) in dy.data().iter().zip(x.data().iter()).enumerate() {
        let ch = i % c;
        dx.data_mut()[i] = g * gamma[ch] * inv_std[ch];
        dgamma[ch] += g * (xv - mean[ch]) * inv_std[ch];
        dbeta[ch] += g;
    }
    (dx, dgamma, dbeta)
}

/// Backward through batch statistics.
pub fn bn_backward_train(
    x: &Tensor,
    gamma: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    dy: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (n, h, w, c) = x.dims4();
    let count = (n * h * w) as f64;
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / math::sqrt(v + eps)).collect();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for (i, (&g, &xv)) in dy.data().iter().zip(x.data().iter()).enumerate() {
        let ch = i % c;
        let xhat = (xv - mean[ch]) * inv_std[ch];
        dgamma[ch] += g * xhat;
        dbeta[ch] += g;
        sum_dy[ch] += g;
        sum_dy_xhat[ch] += g * xhat;
    }
    let mut dx = Tensor::zeros(x.dims());
    for (i, (&g, &xv)) in dy.data().iter().zip(x.data().iter()).enumerate() {
        let ch = i % c;
        let xhat = (xv - mean[ch]) * inv_std[ch];
        dx.data_mut()[i] = gamma[ch] * inv_std[ch] / count
            * (count * g - sum_dy[ch] - xhat * sum_dy_xhat[ch]);
    }
    (dx, dgamma, dbeta)
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = math::sigmoid(*v);
    }
    y
}

/// Backward from the saved output y = sigmoid(x).
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        *g *= v * (1.0 - v);
    }
    dx
}

/// 2x2 max pooling with stride 2, floor semantics (odd tails dropped).
/// Returns the pooled tensor and flat argmax indices into the input.
pub fn maxpool2_forward(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (n, h, w, c) = x.dims4();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, oh, ow, c]);
    let mut argmax = vec![0usize; n * oh * ow * c];
    let xd = x.data();
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let idx = ((b * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((b * oh + i) * ow + j) * c + ch;
                    y.data_mut()[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    (y, argmax)
}

pub fn maxpool2_backward(in_dims: &[usize], argmax: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(in_dims);
    for (o, &g) in dy.data().iter().enumerate() {
        dx.data_mut()[argmax[o]] += g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling of both spatial axes.
pub fn upsample2_forward(x: &Tensor) -> Tensor {
    let (n, h, w, c) = x.dims4();
    let mut y = Tensor::zeros(&[n, 2 * h, 2 * w, c]);
    for b in 0..n {
        for i in 0..2 * h {
            for j in 0..2 * w {
                for ch in 0..c {
                    *y.at4_mut(b, i, j, ch) = x.at4(b, i / 2, j / 2, ch);
                }
            }
        }
    }
    y
}

pub fn upsample2_backward(in_dims: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(in_dims);
    let (n, h, w, c) = (in_dims[0], in_dims[1], in_dims[2], in_dims[3]);
    for b in 0..n {
        for i in 0..2 * h {
            for j in 0..2 * w {
                for ch in 0..c {
                    *dx.at4_mut(b, i / 2, j / 2, ch) += dy.at4(b, i, j, ch);
                }
            }
        }
    }
    dx
}

/// Grow to `(th, tw)` by replicating the last row/column.
pub fn pad_replicate_forward(x: &Tensor, th: usize, tw: usize) -> Tensor {
    let (n, h, w, c) = x.dims4();
    debug_assert!(th >= h && tw >= w);
    let mut y = Tensor::zeros(&[n, th, tw, c]);
    for b in 0..n {
        for i in 0..th {
            for j in 0..tw {
                for ch in 0..c {
                    *y.at4_mut(b, i, j, ch) = x.at4(b, i.min(h - 1), j.min(w - 1), ch);
                }
            }
        }
    }
    y
}

pub fn pad_replicate_backward(in_dims: &[usize], dy: &Tensor) -> Tensor {
    let (n, h, w, c) = (in_dims[0], in_dims[1], in_dims[2], in_dims[3]);
    let (_, th, tw, _) = dy.dims4();
    let mut dx = Tensor::zeros(in_dims);
    for b in 0..n {
        for i in 0..th {
            for j in 0..tw {
                for ch in 0..c {
                    *dx.at4_mut(b, i.min(h - 1), j.min(w - 1), ch) += dy.at4(b, i, j, ch);
                }
            }
        }
    }
    dx
}

/// Concatenate along the channel axis.
pub fn concat_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, h, w, ca) = a.dims4();
    let (nb, hb, wb, cb) = b.dims4();
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::ShapeMismatch("concat spatial dims differ".into()));
    }
    let mut y = Tensor::zeros(&[n, h, w, ca + cb]);
    for bi in 0..n {
        for i in 0..h {
            for j in 0..w {
                for ch in 0..ca {
                    *y.at4_mut(bi, i, j, ch) = a.at4(bi, i, j, ch);
                }
                for ch in 0..cb {
                    *y.at4_mut(bi, i, j, ca + ch) = b.at4(bi, i, j, ch);
                }
            }
        }
    }
    Ok(y)
}

pub fn concat_backward(ca: usize, cb: usize, dy: &Tensor) -> (Tensor, Tensor) {
    let (n, h, w, _) = dy.dims4();
    let mut da = Tensor::zeros(&[n, h, w, ca]);
    let mut db = Tensor::zeros(&[n, h, w, cb]);
    for bi in 0..n {
        for i in 0..h {
            for j in 0..w {
                for ch in 0..ca {
                    *da.at4_mut(bi, i, j, ch) = dy.at4(bi, i, j, ch);
                }
                for ch in 0..cb {
                    *db.at4_mut(bi, i, j, ch) = dy.at4(bi, i, j, ca + ch);
                }
            }
        }
    }
    (da, db)
}

/// x [n, din] * w [din, dout] + b [dout].
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, din) = (x.dim(0), x.dim(1));
    let (wi, wo) = (w.dim(0), w.dim(1));
    if din != wi || b.len() != wo {
        return Err(Error::ShapeMismatch(alloc::format!(
            "dense: x is {din}-dim, weight {wi}->{wo}, bias {}",
            b.len()
        )));
    }
    let mut y = Tensor::zeros(&[n, wo]);
    for bi in 0..n {
        let xrow = &x.data()[bi * din..(bi + 1) * din];
        let yrow = &mut y.data_mut()[bi * wo..(bi + 1) * wo];
        yrow.copy_from_slice(b.data());
        for (i, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &w.data()[i * wo..(i + 1) * wo];
            for (o, &wv) in yrow.iter_mut().zip(wrow.iter()) {
                *o += xv * wv;
            }
        }
    }
    Ok(y)
}

pub fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, din) = (x.dim(0), x.dim(1));
    let wo = w.dim(1);
    let mut dx = Tensor::zeros(x.dims());
    let mut dw = Tensor::zeros(w.dims());
    let mut db = Tensor::zeros(&[wo]);
    for bi in 0..n {
        let xrow = &x.data()[bi * din..(bi + 1) * din];
        let grow = &dy.data()[bi * wo..(bi + 1) * wo];
        for (o, &g) in grow.iter().enumerate() {
            db.data_mut()[o] += g;
        }
        for i in 0..din {
            let wrow = &w.data()[i * wo..(i + 1) * wo];
            let dwrow = &mut dw.data_mut()[i * wo..(i + 1) * wo];
            let xv = xrow[i];
            let mut acc = 0.0;
            for ((&g, &wv), dwv) in grow.iter().zip(wrow.iter()).zip(dwrow.iter_mut()) {
                acc += g * wv;
                *dwv += g * xv;
            }
            dx.data_mut()[bi * din + i] += acc;
        }
    }
    (dx, dw, db)
}

/// Elementwise max of two equally shaped tensors (2-piece maxout).
pub fn maxout_forward(a: &Tensor, b: &Tensor) -> Tensor {
    let mut y = a.clone();
    for (o, &bv) in y.data_mut().iter_mut().zip(b.data()) {
        if bv > *o {
            *o = bv;
        }
    }
    y
}

pub fn maxout_backward(a: &Tensor, b: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let mut da = Tensor::zeros(a.dims());
    let mut db = Tensor::zeros(b.dims());
    for i in 0..dy.len() {
        if a.data()[i] >= b.data()[i] {
            da.data_mut()[i] = dy.data()[i];
        } else {
            db.data_mut()[i] = dy.data()[i];
        }
    }
    (da, db)
}

/// Temporal statistics pooling: `[n, f, t, c]` to `[n, 2f, c]`, means
/// stacked over stds. Population std with the variance floored before
/// the square root.
pub fn stats_pool_forward(x: &Tensor) -> Result<Tensor> {
    let (n, f, t, c) = x.dims4();
    if t < 1 {
        return Err(Error::InvalidInput("statistics pooling over an empty time axis".into()));
    }
    let mut y = Tensor::zeros(&[n, 2 * f, c]);
    for b in 0..n {
        for fi in 0..f {
            for ch in 0..c {
                let mut sum = 0.0;
                for ti in 0..t {
                    sum += x.at4(b, fi, ti, ch);
                }
                let mean = sum / t as f64;
                let mut var = 0.0;
                for ti in 0..t {
                    let d = x.at4(b, fi, ti, ch) - mean;
                    var += d * d;
                }
                var /= t as f64;
                let std = math::sqrt(var.max(STATS_VAR_FLOOR));
                y.data_mut()[(b * 2 * f + fi) * c + ch] = mean;
                y.data_mut()[(b * 2 * f + f + fi) * c + ch] = std;
            }
        }
    }
    Ok(y)
}

pub fn stats_pool_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let (n, f, t, c) = x.dims4();
    let mut dx = Tensor::zeros(x.dims());
    for b in 0..n {
        for fi in 0..f {
            for ch in 0..c {
                let mut sum = 0.0;
                for ti in 0..t {
                    sum += x.at4(b, fi, ti, ch);
                }
                let mean = sum / t as f64;
                let mut var = 0.0;
                for ti in 0..t {
                    let d = x.at4(b, fi, ti, ch) - mean;
                    var += d * d;
                }
                var /= t as f64;
                let floored = var < STATS_VAR_FLOOR;
                let std = math::sqrt(var.max(STATS_VAR_FLOOR));
                let dmean = dy.data()[(b * 2 * f + fi) * c + ch];
                let dstd = dy.data()[(b * 2 * f + f + fi) * c + ch];
                for ti in 0..t {
                    let xv = x.at4(b, fi, ti, ch);
                    let mut g = dmean / t as f64;
                    if !floored {
                        g += dstd * (xv - mean) / (t as f64 * std);
                    }
                    *dx.at4_mut(b, fi, ti, ch) += g;
                }
            }
        }
    }
    dx
}

/// Average over the width axis of a single-channel map: `[n, h, w, 1]`
/// to `[n, h]`.
pub fn mean_w_forward(x: &Tensor) -> Result<Tensor> {
    let (n, h, w, c) = x.dims4();
    if c != 1 {
        return Err(Error::ShapeMismatch("width pooling expects a single channel".into()));
    }
    let mut y = Tensor::zeros(&[n, h]);
    for b in 0..n {
        for i in 0..h {
            let mut sum = 0.0;
            for j in 0..w {
                sum += x.at4(b, i, j, 0);
            }
            y.data_mut()[b * h + i] = sum / w as f64;
        }
    }
    Ok(y)
}

pub fn mean_w_backward(in_dims: &[usize], dy: &Tensor) -> Tensor {
    let (n, h, w) = (in_dims[0], in_dims[1], in_dims[2]);
    let mut dx = Tensor::zeros(in_dims);
    for b in 0..n {
        for i in 0..h {
            let g = dy.data()[b * h + i] / w as f64;
            for j in 0..w {
                *dx.at4_mut(b, i, j, 0) = g;
            }
        }
    }
    dx
}

/// Global average pool over both spatial axes: `[n, h, w, c]` to `[n, c]`.
pub fn gap_hw_forward(x: &Tensor) -> Tensor {
    let (n, h, w, c) = x.dims4();
    let mut y = Tensor::zeros(&[n, c]);
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    y.data_mut()[b * c + ch] += x.at4(b, i, j, ch);
                }
            }
        }
    }
    let scale = 1.0 / (h * w) as f64;
    for v in y.data_mut() {
        *v *= scale;
    }
    y
}

pub fn gap_hw_backward(in_dims: &[usize], dy: &Tensor) -> Tensor {
    let (n, h, w, c) = (in_dims[0], in_dims[1], in_dims[2], in_dims[3]);
    let mut dx = Tensor::zeros(in_dims);
    let scale = 1.0 / (h * w) as f64;
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    *dx.at4_mut(b, i, j, ch) = dy.data()[b * c + ch] * scale;
                }
            }
        }
    }
    dx
}

/// Scale every channel of `x [n,h,w,c]` by `e [n,c]`.
pub fn channel_scale_forward(x: &Tensor, e: &Tensor) -> Tensor {
    let (n, h, w, c) = x.dims4();
    let mut y = Tensor::zeros(x.dims());
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    *y.at4_mut(b, i, j, ch) = x.at4(b, i, j, ch) * e.data()[b * c + ch];
                }
            }
        }
    }
    y
}

pub fn channel_scale_backward(x: &Tensor, e: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let (n, h, w, c) = x.dims4();
    let mut dx = Tensor::zeros(x.dims());
    let mut de = Tensor::zeros(e.dims());
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let g = dy.at4(b, i, j, ch);
                    *dx.at4_mut(b, i, j, ch) = g * e.data()[b * c + ch];
                    de.data_mut()[b * c + ch] += g * x.at4(b, i, j, ch);
                }
            }
        }
    }
    (dx, de)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    fn random_tensor(dims: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::rng::from_seed(seed);
        let n: usize = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let x = random_tensor(&[1, 5, 6, 3], 1);
        // 1x1 kernel = identity over channels
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv2d_forward(&x, &w, 1, Pad::Same).unwrap();
        for (a, b) in y.data().iter().zip(x.data().iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ones_kernel_on_constant_input_sums_window() {
        let x = Tensor::from_vec(&[1, 6, 6, 1], vec![2.0; 36]).unwrap();
        let w = Tensor::from_vec(&[3, 3, 1, 1], vec![1.0; 9]).unwrap();
        let y = conv2d_forward(&x, &w, 1, Pad::Same).unwrap();
        // interior points see the full 3x3 window: 9 * 2 = 18
        for i in 1..5 {
            for j in 1..5 {
                assert!((y.at4(0, i, j, 0) - 18.0).abs() < 1e-12);
            }
        }
        // corner sees a 2x2 window
        assert!((y.at4(0, 0, 0, 0) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_naive_quadruple_loop() {
        let x = random_tensor(&[2, 5, 5, 3], 7);
        let w = random_tensor(&[3, 3, 3, 4], 8);
        for &(stride, pad) in &[(1, Pad::Same), (2, Pad::Same), (1, Pad::Valid)] {
            let y = conv2d_forward(&x, &w, stride, pad).unwrap();
            let (oh, ow, ph, pw) = conv_geometry(5, 5, 3, stride, pad);
            for b in 0..2 {
                for i in 0..oh {
                    for j in 0..ow {
                        for co in 0..4 {
                            let mut acc = 0.0;
                            for dh in 0..3 {
                                for dw in 0..3 {
                                    for ci in 0..3 {
                                        let ih = (i * stride + dh) as isize - ph as isize;
                                        let iw = (j * stride + dw) as isize - pw as isize;
                                        if ih < 0 || iw < 0 || ih >= 5 || iw >= 5 {
                                            continue;
                                        }
                                        acc += x.at4(b, ih as usize, iw as usize, ci)
                                            * w.data()[((dh * 3 + dw) * 3 + ci) * 4 + co];
                                    }
                                }
                            }
                            assert!(
                                (acc - y.at4(b, i, j, co)).abs() <= 1e-12,
                                "stride {stride} at ({b},{i},{j},{co})"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn same_pad_stride2_uses_ceil() {
        let x = random_tensor(&[1, 25, 13, 2], 9);
        let w = random_tensor(&[3, 3, 2, 2], 10);
        let y = conv2d_forward(&x, &w, 2, Pad::Same).unwrap();
        assert_eq!(y.dims(), &[1, 13, 7, 2]);
    }

    #[test]
    fn bn_identity_params_rescale_only() {
        let x = random_tensor(&[2, 3, 3, 4], 11);
        let y = bn_forward(&x, &[1.0; 4], &[0.0; 4], &[0.0; 4], &[1.0; 4], 1e-5);
        for (a, b) in y.data().iter().zip(x.data().iter()) {
            assert!((a - b / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_train_mode_centers_batch() {
        let x = random_tensor(&[4, 3, 3, 2], 12);
        let (mean, var) = bn_channel_stats(&x);
        let y = bn_forward(&x, &[1.0; 2], &[0.0; 2], &mean, &var, 1e-5);
        let (ymean, _) = bn_channel_stats(&y);
        for m in ymean {
            assert!(m.abs() < 1e-12);
        }
        let _ = var;
    }

    #[test]
    fn maxpool_floor_semantics_and_argmax() {
        let x = random_tensor(&[1, 5, 7, 2], 13);
        let (y, argmax) = maxpool2_forward(&x);
        assert_eq!(y.dims(), &[1, 2, 3, 2]);
        for (o, &idx) in argmax.iter().enumerate() {
            assert_eq!(y.data()[o], x.data()[idx]);
        }
    }

    #[test]
    fn upsample_then_pad_replicate_hits_target() {
        let x = random_tensor(&[1, 3, 5, 2], 14);
        let up = upsample2_forward(&x);
        assert_eq!(up.dims(), &[1, 6, 10, 2]);
        let padded = pad_replicate_forward(&up, 7, 11);
        assert_eq!(padded.dims(), &[1, 7, 11, 2]);
        assert_eq!(padded.at4(0, 6, 10, 1), up.at4(0, 5, 9, 1));
    }

    #[test]
    fn stats_pool_matches_two_pass_oracle() {
        let x = random_tensor(&[2, 4, 9, 3], 15);
        let y = stats_pool_forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 8, 3]);
        for b in 0..2 {
            for f in 0..4 {
                for c in 0..3 {
                    let col: Vec<f64> = (0..9).map(|t| x.at4(b, f, t, c)).collect();
                    let mean = crate::math::mean(&col);
                    let std = crate::math::sqrt(crate::math::variance(&col).max(STATS_VAR_FLOOR));
                    assert!((y.data()[(b * 8 + f) * 3 + c] - mean).abs() <= 1e-12);
                    assert!((y.data()[(b * 8 + 4 + f) * 3 + c] - std).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn stats_pool_constant_input_hits_floor() {
        let x = Tensor::from_vec(&[1, 2, 5, 1], vec![3.25; 10]).unwrap();
        let y = stats_pool_forward(&x).unwrap();
        assert!((y.data()[0] - 3.25).abs() < 1e-15);
        assert!((y.data()[2] - math::sqrt(STATS_VAR_FLOOR)).abs() < 1e-18);
    }

    #[test]
    fn stats_pool_single_frame_has_floored_std() {
        let x = Tensor::from_vec(&[1, 2, 1, 1], vec![2.0, -1.0]).unwrap();
        let y = stats_pool_forward(&x).unwrap();
        assert_eq!(y.data()[0], 2.0);
        assert!((y.data()[2] - math::sqrt(STATS_VAR_FLOOR)).abs() < 1e-18);
    }

    #[test]
    fn dense_shape_check() {
        let x = random_tensor(&[2, 6], 16);
        let w = random_tensor(&[6, 4], 17);
        let b = random_tensor(&[4], 18);
        let y = dense_forward(&x, &w, &b).unwrap();
        assert_eq!(y.dims(), &[2, 4]);
        let bad = random_tensor(&[5, 4], 19);
        assert!(dense_forward(&x, &bad, &b).is_err());
    }
}
