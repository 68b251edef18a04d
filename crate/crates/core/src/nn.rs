//! Differentiable building blocks on top of `candle_core` tensors.

use candle_core::{DType, Device, Tensor, D};

use crate::error::Result;
use crate::search_space::Activation;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Same-padded convolution. `kernel` is `[c_out, c_in, k, k]`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    let k = kernel.dim(2)?;
    let y = x.conv2d(kernel, k / 2, stride, 1, 1)?;
    add_bias(y, bias)
}

/// Stride-2 transposed convolution doubling the spatial size.
/// `kernel` is `[c_in, c_out, k, k]`.
pub fn conv_transpose2x(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let k = kernel.dim(2)?;
    let y = x.conv_transpose2d(kernel, k / 2, 1, 2, 1)?;
    add_bias(y, bias)
}

/// Same-padded depthwise k x k convolution, stride 1. `kernel` is `[c, 1, k, k]`.
pub fn depthwise_conv2d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let k = kernel.dim(2)?;
    let p = k / 2;
    let xp = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..k {
        for dx in 0..k {
            let tap = kernel.narrow(2, dy, 1)?.narrow(3, dx, 1)?.reshape((1, c, 1, 1))?;
            let term = xp.narrow(2, dy, h)?.narrow(3, dx, w)?.broadcast_mul(&tap)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
    }
    Ok(acc.expect("kernel has at least one tap"))
}

fn add_bias(y: Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    match bias {
        None => Ok(y),
        Some(b) => {
            let c = b.dim(0)?;
            Ok(y.broadcast_add(&b.reshape((1, c, 1, 1))?)?)
        }
    }
}

/// Non-affine instance normalization over the spatial dims of each sample and channel.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim((2, 3))?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim((2, 3))?;
    let denom = (var + INSTANCE_NORM_EPS)?.sqrt()?;
    Ok(centered.broadcast_div(&denom)?)
}

pub fn activate(x: Tensor, act: Activation) -> Result<Tensor> {
    Ok(match act {
        Activation::Relu => x.relu()?,
        Activation::LeakyRelu => x.maximum(&(&x * LEAKY_SLOPE)?)?,
        Activation::Tanh => x.tanh()?,
        Activation::Identity => x,
    })
}

/// `[2n, n]` matrix of 2x bilinear interpolation with half-pixel centers and
/// edge clamping.
pub fn bilinear_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; 2 * n * n];
    for i in 0..2 * n {
        let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        let frac = src - i0 as f64;
        m[i * n + i0] += 1.0 - frac;
        m[i * n + i1] += frac;
    }
    m
}

/// 2x bilinear upsampling expressed as two matrix products, so it is differentiable.
pub fn upsample_bilinear2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let dtype = x.dtype();
    let dev = x.device();
    let uh = Tensor::from_vec(bilinear_matrix(h), (1, 1, 2 * h, h), dev)?.to_dtype(dtype)?;
    let uw_t = Tensor::from_vec(bilinear_matrix(w), (2 * w, w), dev)?
        .to_dtype(dtype)?
        .t()?
        .reshape((1, 1, w, 2 * w))?;
    let rows = x.broadcast_matmul(&uw_t)?;
    Ok(uh.broadcast_matmul(&rows)?)
}

/// Softmax of a 1-D tensor.
pub fn softmax1(logits: &Tensor) -> Result<Tensor> {
    let shifted = logits.broadcast_sub(&logits.max_keepdim(D::Minus1)?.detach())?;
    let e = shifted.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Softmax on host values.
pub fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?.iter().sum())
}

/// Zero-extends dim 1 of an NCHW tensor to `c` channels.
pub fn pad_channels(x: &Tensor, c: usize) -> Result<Tensor> {
    let have = x.dim(1)?;
    if have >= c {
        return Ok(x.clone());
    }
    let (n, _, h, w) = x.dims4()?;
    let zeros = Tensor::zeros((n, c - have, h, w), x.dtype(), x.device())?;
    Ok(Tensor::cat(&[x, &zeros], 1)?)
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn tensor_from_f64(values: Vec<f64>, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}
