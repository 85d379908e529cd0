//! Pure forward and backward kernels on dense tensors.
//!
//! Layout conventions: activations are `[N, C, H, W]`, convolution kernels
//! are `[O, C, kh, kw]` and are shared between `conv2d` (O = output
//! channels) and `conv_transpose2d` (O = input channels, making the
//! transpose the exact adjoint of the convolution with the same kernel).

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BCE_CLAMP: f64 = 1e-7;

fn dims4<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        &[n, c, h, w] => Ok((n, c, h, w)),
        other => Err(Error::shape(what, "4-d tensor", format!("{other:?}"))),
    }
}

/// Output spatial size of a convolution; errors unless the arithmetic is
/// exact.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || (padded - kernel) % stride != 0 {
        return Err(Error::shape(
            "conv stride arithmetic",
            format!("(in + 2*{padding} - {kernel}) divisible by {stride}"),
            format!("in = {input}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Cross-correlation of `input [N,C,H,W]` with `kernel [O,C,kh,kw]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(input, "conv2d input")?;
    let (o, kc, kh, kw) = dims4(kernel, "conv2d kernel")?;
    if kc != c {
        return Err(Error::shape(
            "conv2d channels",
            format!("{c} input channels"),
            format!("kernel expects {kc}"),
        ));
    }
    let oh = conv_out_dim(h, kh, stride, padding)?;
    let ow = conv_out_dim(w, kw, stride, padding)?;

    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    let x = input.data();
    let k = kernel.data();
    let y = out.data_mut();
    for ni in 0..n {
        for oi in 0..o {
            for ci in 0..c {
                let kbase = ((oi * c) + ci) * kh * kw;
                let xbase = (ni * c + ci) * h * w;
                for i in 0..kh {
                    for j in 0..kw {
                        let kv = k[kbase + i * kw + j];
                        if kv == T::zero() {
                            continue;
                        }
                        for ohi in 0..oh {
                            let ih = (ohi * stride + i) as isize - padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = xbase + ih as usize * w;
                            let yrow = ((ni * o + oi) * oh + ohi) * ow;
                            for owi in 0..ow {
                                let iw = (owi * stride + j) as isize - padding as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                y[yrow + owi] += kv * x[xrow + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv2d` w.r.t. input and kernel.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input_grad: bool,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = dims4(input, "conv2d input")?;
    let (o, _, kh, kw) = dims4(kernel, "conv2d kernel")?;
    let (_, _, oh, ow) = dims4(grad_out, "conv2d grad")?;

    let mut gin = Tensor::zeros(&[n, c, h, w]);
    let mut gk = Tensor::zeros(&[o, c, kh, kw]);
    let x = input.data();
    let k = kernel.data();
    let g = grad_out.data();
    let gi = gin.data_mut();
    let gkd = gk.data_mut();
    for ni in 0..n {
        for oi in 0..o {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let gv = g[((ni * o + oi) * oh + ohi) * ow + owi];
                    if gv == T::zero() {
                        continue;
                    }
                    for ci in 0..c {
                        let kbase = (oi * c + ci) * kh * kw;
                        let xbase = (ni * c + ci) * h * w;
                        for i in 0..kh {
                            let ih = (ohi * stride + i) as isize - padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for j in 0..kw {
                                let iw = (owi * stride + j) as isize - padding as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let xi = xbase + ih as usize * w + iw as usize;
                                gkd[kbase + i * kw + j] += gv * x[xi];
                                if need_input_grad {
                                    gi[xi] += gv * k[kbase + i * kw + j];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((gin, gk))
}

/// Transposed convolution: the adjoint of `conv2d` with the same kernel
/// and parameters. Input is `[N,O,h,w]`, output `[N,C,H,W]` with
/// `H = (h-1)*stride - 2*padding + kh`.
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, ic, h, w) = dims4(input, "conv_transpose2d input")?;
    let (o, c, kh, kw) = dims4(kernel, "conv_transpose2d kernel")?;
    if ic != o {
        return Err(Error::shape(
            "conv_transpose2d channels",
            format!("kernel expects {o} input channels"),
            format!("{ic}"),
        ));
    }
    let out_h = ((h - 1) * stride + kh)
        .checked_sub(2 * padding)
        .filter(|&v| v > 0);
    let out_w = ((w - 1) * stride + kw)
        .checked_sub(2 * padding)
        .filter(|&v| v > 0);
    let (out_h, out_w) = match (out_h, out_w) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::shape(
                "conv_transpose2d output",
                "positive spatial dims",
                format!("{h}x{w} input"),
            ))
        }
    };

    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let x = input.data();
    let k = kernel.data();
    let y = out.data_mut();
    for ni in 0..n {
        for oi in 0..o {
            for hi in 0..h {
                for wi in 0..w {
                    let v = x[((ni * o + oi) * h + hi) * w + wi];
                    if v == T::zero() {
                        continue;
                    }
                    for ci in 0..c {
                        let kbase = (oi * c + ci) * kh * kw;
                        let ybase = (ni * c + ci) * out_h * out_w;
                        for i in 0..kh {
                            let ih = (hi * stride + i) as isize - padding as isize;
                            if ih < 0 || ih >= out_h as isize {
                                continue;
                            }
                            for j in 0..kw {
                                let iw = (wi * stride + j) as isize - padding as isize;
                                if iw < 0 || iw >= out_w as isize {
                                    continue;
                                }
                                y[ybase + ih as usize * out_w + iw as usize] +=
                                    v * k[kbase + i * kw + j];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv_transpose2d` w.r.t. input and kernel.
pub fn conv_transpose2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input_grad: bool,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, o, h, w) = dims4(input, "conv_transpose2d input")?;
    let (_, c, kh, kw) = dims4(kernel, "conv_transpose2d kernel")?;
    let (_, _, out_h, out_w) = dims4(grad_out, "conv_transpose2d grad")?;

    let mut gin = Tensor::zeros(&[n, o, h, w]);
    let mut gk = Tensor::zeros(&[o, c, kh, kw]);
    let x = input.data();
    let k = kernel.data();
    let g = grad_out.data();
    let gi = gin.data_mut();
    let gkd = gk.data_mut();
    for ni in 0..n {
        for oi in 0..o {
            for hi in 0..h {
                for wi in 0..w {
                    let xi = ((ni * o + oi) * h + hi) * w + wi;
                    let xv = x[xi];
                    let mut acc = T::zero();
                    for ci in 0..c {
                        let kbase = (oi * c + ci) * kh * kw;
                        let gbase = (ni * c + ci) * out_h * out_w;
                        for i in 0..kh {
                            let ih = (hi * stride + i) as isize - padding as isize;
                            if ih < 0 || ih >= out_h as isize {
                                continue;
                            }
                            for j in 0..kw {
                                let iw = (wi * stride + j) as isize - padding as isize;
                                if iw < 0 || iw >= out_w as isize {
                                    continue;
                                }
                                let gv = g[gbase + ih as usize * out_w + iw as usize];
                                acc += gv * k[kbase + i * kw + j];
                                gkd[kbase + i * kw + j] += gv * xv;
                            }
                        }
                    }
                    if need_input_grad {
                        gi[xi] = acc;
                    }
                }
            }
        }
    }
    Ok((gin, gk))
}

/// Per-channel batch statistics (biased variance) over N, H, W.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub count: usize,
}

/// Running statistics carried by a batch-norm layer between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// Exponential update with the unbiased batch variance.
    pub fn update(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64c(BN_MOMENTUM);
        let keep = T::one() - m;
        let n = stats.count;
        let unbias = if n > 1 {
            T::from_usize(n).unwrap() / T::from_usize(n - 1).unwrap()
        } else {
            T::one()
        };
        for c in 0..self.mean.len() {
            self.mean[c] = keep * self.mean[c] + m * stats.mean[c];
            self.var[c] = keep * self.var[c] + m * stats.var[c] * unbias;
        }
    }
}

/// Train-mode batch norm: normalize by batch statistics (eps 1e-5).
pub fn batchnorm2d_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    let (n, c, h, w) = dims4(input, "batchnorm input")?;
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::shape(
            "batchnorm params",
            format!("{c} channels"),
            format!("{} / {}", gamma.numel(), beta.numel()),
        ));
    }
    let m = n * h * w;
    if m <= 1 {
        return Err(Error::shape(
            "batchnorm batch",
            "more than one value per channel",
            format!("{m}"),
        ));
    }
    let x = input.data();
    let inv_m = T::one() / T::from_usize(m).unwrap();
    let eps = T::from_f64c(BN_EPS);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut sum = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for idx in 0..h * w {
                sum += x[base + idx];
            }
        }
        let mu = sum * inv_m;
        let mut sq = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for idx in 0..h * w {
                let d = x[base + idx] - mu;
                sq += d * d;
            }
        }
        mean[ci] = mu;
        var[ci] = sq * inv_m;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let mut out = Tensor::zeros(&[n, c, h, w]);
    let y = out.data_mut();
    let (gm, bt) = (gamma.data(), beta.data());
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for idx in 0..h * w {
                y[base + idx] = gm[ci] * (x[base + idx] - mean[ci]) * inv_std[ci] + bt[ci];
            }
        }
    }
    Ok((
        out,
        BatchStats {
            mean,
            var,
            inv_std,
            count: m,
        },
    ))
}

/// Eval-mode batch norm: normalize by running statistics.
pub fn batchnorm2d_eval<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &RunningStats<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(input, "batchnorm input")?;
    if running.mean.len() != c {
        return Err(Error::shape(
            "batchnorm running stats",
            format!("{c} channels"),
            format!("{}", running.mean.len()),
        ));
    }
    let eps = T::from_f64c(BN_EPS);
    let x = input.data();
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let y = out.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let inv_std = T::one() / (running.var[ci] + eps).sqrt();
            let base = (ni * c + ci) * h * w;
            for idx in 0..h * w {
                y[base + idx] = gamma.data()[ci] * (x[base + idx] - running.mean[ci]) * inv_std
                    + beta.data()[ci];
            }
        }
    }
    Ok(out)
}

/// Max pooling with first-found argmax on ties; no padding.
pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = dims4(input, "maxpool input")?;
    let oh = conv_out_dim(h, kernel, stride, 0)?;
    let ow = conv_out_dim(w, kernel, stride, 0)?;
    let x = input.data();
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; out.numel()];
    let y = out.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut best_idx = base + (ohi * stride) * w + owi * stride;
                    let mut best = x[best_idx];
                    for i in 0..kernel {
                        for j in 0..kernel {
                            let idx = base + (ohi * stride + i) * w + owi * stride + j;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let oidx = ((ni * c + ci) * oh + ohi) * ow + owi;
                    y[oidx] = best;
                    argmax[oidx] = best_idx;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Mean binary cross entropy with the inputs clamped into
/// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub fn bce_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "bce_loss",
            format!("{:?}", pred.shape()),
            format!("{:?}", target.shape()),
        ));
    }
    let lo = T::from_f64c(BCE_CLAMP);
    let hi = T::one() - lo;
    let n = T::from_usize(pred.numel()).unwrap();
    let mut total = T::zero();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let pc = p.max(lo).min(hi);
        total += -(t * pc.ln() + (T::one() - t) * (T::one() - pc).ln());
    }
    Ok(total / n)
}

/// Gradient of `bce_loss` w.r.t. the (pre-clamp) predictions; zero where
/// the clamp is active.
pub fn bce_loss_backward<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    let lo = T::from_f64c(BCE_CLAMP);
    let hi = T::one() - lo;
    let inv_n = T::one() / T::from_usize(pred.numel()).unwrap();
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            if p < lo || p > hi {
                T::zero()
            } else {
                (p - t) / (p * (T::one() - p)) * inv_n
            }
        })
        .collect();
    Tensor::from_vec(pred.shape(), data)
}
