//! Post-training uniform affine quantization of generator weights.

use candle_core::{Device, Tensor};
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::nn;
use crate::supernet::{ForwardPlan, Supernet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantBits {
    Int(u8),
    /// 32-bit float, no quantization.
    Float,
}

impl QuantBits {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "float" | "fp32" | "32" => Ok(QuantBits::Float),
            _ => {
                let b: u8 = s.parse().map_err(|_| invalid(format!("bad bit width `{s}`")))?;
                if (1..=8).contains(&b) {
                    Ok(QuantBits::Int(b))
                } else {
                    Err(invalid(format!("bit width must be in 1..=8 or float, got {b}")))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub q: Vec<u8>,
    pub scale: f64,
    pub zero_point: u8,
    pub bits: u8,
    pub shape: Vec<usize>,
}

impl QuantizedTensor {
    /// Per-tensor asymmetric quantization onto `[0, 2^bits - 1]`.
    pub fn quantize(values: &[f64], shape: &[usize], bits: u8) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(invalid(format!("bit width must be in 1..=8, got {bits}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor to quantize".into()));
        }
        let levels = ((1u32 << bits) - 1) as f64;
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.0);
        let scale = if max > min { (max - min) / levels } else { 1.0 };
        let zero_point = (-min / scale).round().clamp(0.0, levels);
        let q = values
            .iter()
            .map(|v| ((v / scale).round() + zero_point).clamp(0.0, levels) as u8)
            .collect();
        Ok(QuantizedTensor {
            q,
            scale,
            zero_point: zero_point as u8,
            bits,
            shape: shape.to_vec(),
        })
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.q
            .iter()
            .map(|&q| (q as f64 - self.zero_point as f64) * self.scale)
            .collect()
    }

    /// Packed payload bytes plus 8 bytes of scale and zero point.
    pub fn storage_bytes(&self) -> usize {
        (self.q.len() * self.bits as usize).div_ceil(8) + 8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub params: usize,
    pub tensors: usize,
    pub float_bytes: usize,
    pub quantized_bytes: usize,
}

impl MemoryReport {
    pub fn ratio(&self) -> f64 {
        self.quantized_bytes as f64 / self.float_bytes as f64
    }
}

#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub bits: QuantBits,
    pub tensors: Vec<(String, QuantizedTensor)>,
    pub report: MemoryReport,
}

pub fn quantize_model(net: &Supernet, bits: QuantBits) -> Result<QuantizedModel> {
    let named = net.named_tensors();
    let params: usize = named.iter().map(|(_, t)| t.elem_count()).sum();
    let float_bytes = 4 * params;
    let (tensors, quantized_bytes) = match bits {
        QuantBits::Float => (Vec::new(), float_bytes),
        QuantBits::Int(b) => {
            let mut out = Vec::with_capacity(named.len());
            for (name, t) in &named {
                out.push((name.clone(), QuantizedTensor::quantize(&nn::to_f64_vec(t)?, t.dims(), b)?));
            }
            let bytes = out.iter().map(|(_, q)| q.storage_bytes()).sum();
            (out, bytes)
        }
    };
    Ok(QuantizedModel {
        bits,
        tensors,
        report: MemoryReport {
            params,
            tensors: named.len(),
            float_bytes,
            quantized_bytes,
        },
    })
}

impl QuantizedModel {
    /// A copy of `net` whose weights are the dequantized values.
    pub fn dequantized(&self, net: &Supernet) -> Result<Supernet> {
        let copy = net.deep_clone()?;
        if self.bits == QuantBits::Float {
            return Ok(copy);
        }
        copy.map_weights(|name, t| {
            let q = self
                .tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, q)| q)
                .ok_or_else(|| invalid(format!("no quantized tensor {name}")))?;
            nn::tensor_from_f64(q.dequantize(), t.dims(), t.dtype(), &Device::Cpu)
        })?;
        Ok(copy)
    }
}

/// Rounds a tensor through `bits`-bit affine quantization and back.
pub fn fake_quantize(t: &Tensor, bits: u8) -> Result<Tensor> {
    let q = QuantizedTensor::quantize(&nn::to_f64_vec(t)?, t.dims(), bits)?;
    nn::tensor_from_f64(q.dequantize(), t.dims(), t.dtype(), t.device())
}

/// Forward pass with dequantized weights and, optionally, every layer's
/// activation fake-quantized to the same bit width.
pub fn simulate_quantized_forward(
    net: &Supernet,
    plan: &ForwardPlan,
    x: &Tensor,
    bits: QuantBits,
    quantize_activations: bool,
) -> Result<Tensor> {
    let qnet = quantize_model(net, bits)?.dequantized(net)?;
    match bits {
        QuantBits::Int(b) if quantize_activations => qnet.forward_with(x, plan, |_, y| fake_quantize(&y, b)),
        _ => qnet.forward(x, plan),
    }
}
