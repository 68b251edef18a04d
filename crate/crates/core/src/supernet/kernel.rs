use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;

use crate::error::{invalid, Result};
use crate::nn;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// `[max_out, max_in, k, k]`
    Conv,
    /// `[max_in, max_out, k, k]`
    Transposed,
    /// `[max_ch, 1, k, k]`
    Depthwise,
}

/// A convolution kernel stored at maximal width. Narrower widths use the
/// leading input/output channels, so every width candidate shares weights.
#[derive(Debug, Clone)]
pub struct SuperKernel {
    pub kind: KernelKind,
    pub weight: Var,
    pub bias: Option<Var>,
}

/// A leading-channel view into a [`SuperKernel`]. Gradients taken through the
/// view land in the superkernel's storage.
#[derive(Debug, Clone)]
pub struct KernelView {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl SuperKernel {
    pub fn new(
        kind: KernelKind,
        max_in: usize,
        max_out: usize,
        kernel: usize,
        with_bias: bool,
        dtype: DType,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let shape = match kind {
            KernelKind::Conv => (max_out, max_in, kernel, kernel),
            KernelKind::Transposed => (max_in, max_out, kernel, kernel),
            KernelKind::Depthwise => {
                if max_in != max_out {
                    return Err(invalid("depthwise kernels need equal in/out widths"));
                }
                (max_out, 1, kernel, kernel)
            }
        };
        let fan_in = match kind {
            KernelKind::Depthwise => kernel * kernel,
            _ => max_in * kernel * kernel,
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let weight = Var::from_tensor(&nn::tensor_from_f64(
            values,
            &[shape.0, shape.1, shape.2, shape.3],
            dtype,
            &Device::Cpu,
        )?)?;
        let bias = if with_bias {
            Some(Var::zeros(max_out, dtype, &Device::Cpu)?)
        } else {
            None
        };
        Ok(SuperKernel { kind, weight, bias })
    }

    pub fn max_in(&self) -> usize {
        let d = self.weight.dims();
        match self.kind {
            KernelKind::Conv => d[1],
            KernelKind::Transposed | KernelKind::Depthwise => d[0],
        }
    }

    pub fn max_out(&self) -> usize {
        let d = self.weight.dims();
        match self.kind {
            KernelKind::Conv | KernelKind::Depthwise => d[0],
            KernelKind::Transposed => d[1],
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.dims()[2]
    }

    /// Leading `in_w` input and `out_w` output channels.
    pub fn slice(&self, in_w: usize, out_w: usize) -> Result<KernelView> {
        if in_w == 0 || out_w == 0 || in_w > self.max_in() || out_w > self.max_out() {
            return Err(invalid(format!(
                "slice ({in_w}, {out_w}) outside superkernel ({}, {})",
                self.max_in(),
                self.max_out()
            )));
        }
        let w = self.weight.as_tensor();
        let weight = match self.kind {
            KernelKind::Conv => w.narrow(0, 0, out_w)?.narrow(1, 0, in_w)?,
            KernelKind::Transposed => w.narrow(0, 0, in_w)?.narrow(1, 0, out_w)?,
            KernelKind::Depthwise => {
                if in_w != out_w {
                    return Err(invalid("depthwise slice needs equal in/out widths"));
                }
                w.narrow(0, 0, out_w)?
            }
        };
        let bias = match &self.bias {
            Some(b) => Some(b.as_tensor().narrow(0, 0, out_w)?),
            None => None,
        };
        Ok(KernelView {
            weight: weight.contiguous()?,
            bias,
        })
    }

    /// Runs the kernel on `x`, whose channel count selects the input slice.
    pub fn apply(&self, x: &Tensor, out_w: usize, stride: usize) -> Result<Tensor> {
        let in_w = x.dim(1)?;
        let view = self.slice(in_w, out_w)?;
        match self.kind {
            KernelKind::Conv => nn::conv2d(x, &view.weight, view.bias.as_ref(), stride),
            KernelKind::Transposed => nn::conv_transpose2x(x, &view.weight, view.bias.as_ref()),
            KernelKind::Depthwise => {
                let y = nn::depthwise_conv2d(x, &view.weight)?;
                match view.bias {
                    Some(b) => Ok(y.broadcast_add(&b.reshape((1, out_w, 1, 1))?)?),
                    None => Ok(y),
                }
            }
        }
    }

    pub fn vars(&self) -> Vec<(&'static str, &Var)> {
        let mut v = vec![("weight", &self.weight)];
        if let Some(b) = &self.bias {
            v.push(("bias", b));
        }
        v
    }
}
