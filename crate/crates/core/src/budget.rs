//! FLOPs cost model, the differentiable expected-FLOPs budget and the
//! adaptive budget weight.
//!
//! Convention: one multiply-accumulate counts as one FLOP. Convolutions are
//! counted at their output resolution, transposed convolutions included.
//! Normalization, bias, activations, residual additions and bilinear
//! resampling are free.

use std::fmt::{self, Write as _};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::arch::Architecture;
use crate::error::{invalid, Error, Result};
use crate::nn;
use crate::search_space::{LayerOp, Norm, OpMode, OperatorKind, SupernetSpec};
use crate::supernet::ArchParams;

pub const REPORT_VERSION: u32 = 1;

/// FLOPs of one layer computing `op` from `c_in` to `c_out` channels with
/// an output of `out_hw` pixels.
pub fn op_flops(op: LayerOp, c_in: usize, c_out: usize, out_hw: (usize, usize)) -> f64 {
    per_pixel_flops(op, c_in, c_out) * (out_hw.0 * out_hw.1) as f64
}

pub fn per_pixel_flops(op: LayerOp, c_in: usize, c_out: usize) -> f64 {
    let (ci, co) = (c_in as f64, c_out as f64);
    match op {
        LayerOp::Conv { kernel } | LayerOp::TransposedConv { kernel } => (kernel * kernel) as f64 * ci * co,
        LayerOp::Operator(OperatorKind::Conv1x1) => ci * co,
        LayerOp::Operator(OperatorKind::Conv3x3) => 9.0 * ci * co,
        LayerOp::Operator(OperatorKind::ResBlock) => {
            9.0 * ci * co + 9.0 * co * co + if c_in != c_out { ci * co } else { 0.0 }
        }
        LayerOp::Operator(OperatorKind::DwsBlock) => ci * co + 9.0 * co + co * co,
    }
}

/// Parameters of one layer, matching the weights a standalone network allocates.
pub fn op_params(op: LayerOp, c_in: usize, c_out: usize, bias: bool) -> usize {
    let b = |n: usize| if bias { n } else { 0 };
    let conv = |k: usize, i: usize, o: usize| k * k * i * o + b(o);
    match op {
        LayerOp::Conv { kernel } | LayerOp::TransposedConv { kernel } => conv(kernel, c_in, c_out),
        LayerOp::Operator(OperatorKind::Conv1x1) => conv(1, c_in, c_out),
        LayerOp::Operator(OperatorKind::Conv3x3) => conv(3, c_in, c_out),
        LayerOp::Operator(OperatorKind::ResBlock) => {
            conv(3, c_in, c_out) + conv(3, c_out, c_out) + if c_in != c_out { conv(1, c_in, c_out) } else { 0 }
        }
        LayerOp::Operator(OperatorKind::DwsBlock) => conv(1, c_in, c_out) + 9 * c_out + b(c_out) + conv(1, c_out, c_out),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerFlops {
    pub block_id: String,
    pub op: String,
    pub c_in: usize,
    pub c_out: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub flops: f64,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsReport {
    pub height: usize,
    pub width: usize,
    pub layers: Vec<LayerFlops>,
    pub total: f64,
    pub params: usize,
}

impl FlopsReport {
    pub fn gflops(&self) -> f64 {
        self.total / 1e9
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "agd-flops v{REPORT_VERSION}");
        let _ = writeln!(
            s,
            "# 1 MAC = 1 FLOP; convs at output resolution; norms, bias, activations, skips and bilinear resampling free"
        );
        let _ = writeln!(s, "resolution {}x{}", self.height, self.width);
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<12} {:<10} {:>5} -> {:<5} @ {}x{}  {:>16.0}  params {}",
                l.block_id, l.op, l.c_in, l.c_out, l.out_h, l.out_w, l.flops, l.params
            );
        }
        let _ = writeln!(s, "total {:.0} FLOPs ({:.4} GFLOPs), {} params", self.total, self.gflops(), self.params);
        s
    }
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn layer_op(spec: &SupernetSpec, i: usize, choice: Option<OperatorKind>) -> Result<LayerOp> {
    let cands = spec.layers[i].operator_candidates();
    match (spec.layers[i].op_mode, choice) {
        (OpMode::Searchable, Some(k)) | (OpMode::Fixed(_), Some(k)) => Ok(LayerOp::Operator(k)),
        (OpMode::Fixed(_), None) => Ok(cands[0]),
        (OpMode::Searchable, None) => Err(Error::Schema(format!("block {} needs an operator", spec.layers[i].id))),
    }
}

/// Exact FLOPs and parameters of a derived architecture at `h x w`.
/// Widths are taken from the architecture as given and need not be candidates.
pub fn derived_flops(spec: &SupernetSpec, arch: &Architecture, h: usize, w: usize) -> Result<FlopsReport> {
    arch.validate(spec, crate::arch::WidthCheck::Free)?;
    let dims = spec.layer_spatial_dims(h, w)?;
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut c_in = spec.input_channels;
    for (i, choice) in arch.layers.iter().enumerate() {
        let op = layer_op(spec, i, choice.op)?;
        let out = dims[i].1;
        let bias = spec.layers[i].norm == Norm::None;
        layers.push(LayerFlops {
            block_id: choice.block_id.clone(),
            op: op.to_string(),
            c_in,
            c_out: choice.width,
            out_h: out.0,
            out_w: out.1,
            flops: op_flops(op, c_in, choice.width, out),
            params: op_params(op, c_in, choice.width, bias),
        });
        c_in = choice.width;
    }
    Ok(FlopsReport {
        height: h,
        width: w,
        total: layers.iter().map(|l| l.flops).sum(),
        params: layers.iter().map(|l| l.params).sum(),
        layers,
    })
}

/// Cost tensor of layer `i`: `C[k][a][b]` for operator candidate `k`,
/// input-width candidate `a` and output-width candidate `b`.
pub fn layer_cost_table(spec: &SupernetSpec, i: usize, out_hw: (usize, usize)) -> Vec<Vec<Vec<f64>>> {
    let ins = in_candidates(spec, i);
    let outs = spec.layers[i].width_candidates();
    spec.layers[i]
        .operator_candidates()
        .into_iter()
        .map(|op| {
            ins.iter()
                .map(|&a| outs.iter().map(|&b| op_flops(op, a, b, out_hw)).collect())
                .collect()
        })
        .collect()
}

fn in_candidates(spec: &SupernetSpec, i: usize) -> Vec<usize> {
    if i == 0 {
        vec![spec.input_channels]
    } else {
        spec.layers[i - 1].width_candidates()
    }
}

/// Which distributions keep their gradient in [`expected_flops`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    /// `F(alpha | gamma)`: gradient to operator logits only.
    Alpha,
    /// `F(gamma | alpha)`: gradient to width logits only.
    Gamma,
    /// Both keep their gradient.
    Joint,
}

/// Expected FLOPs under `softmax(alpha)` and `softmax(gamma)`, as a scalar
/// tensor on the autodiff graph. Per-layer choices are independent, so the
/// expectation factorizes into one contraction per layer.
pub fn expected_flops(spec: &SupernetSpec, params: &ArchParams, h: usize, w: usize, cond: Condition) -> Result<Tensor> {
    let dims = spec.layer_spatial_dims(h, w)?;
    let dev = Device::Cpu;
    let keep_alpha = cond != Condition::Gamma;
    let keep_gamma = cond != Condition::Alpha;
    let width_probs = |i: usize| -> Result<Tensor> {
        match params.gamma_for(i) {
            Some(g) => {
                let p = nn::softmax1(&g.as_tensor().to_dtype(DType::F64)?)?;
                Ok(if keep_gamma { p } else { p.detach() })
            }
            None => Ok(Tensor::ones(1, DType::F64, &dev)?),
        }
    };
    let mut total: Option<Tensor> = None;
    let mut prev_out = Tensor::ones(1, DType::F64, &dev)?;
    for i in 0..spec.layers.len() {
        let table = layer_cost_table(spec, i, dims[i].1);
        let (k, a, b) = (table.len(), table[0].len(), table[0][0].len());
        let flat: Vec<f64> = table.into_iter().flatten().flatten().collect();
        let c = Tensor::from_vec(flat, (k, a * b), &dev)?;
        let p_op = match (spec.layers[i].op_mode, params.alpha_for(i)) {
            (OpMode::Searchable, Some(al)) => {
                let p = nn::softmax1(&al.as_tensor().to_dtype(DType::F64)?)?;
                if keep_alpha {
                    p
                } else {
                    p.detach()
                }
            }
            (OpMode::Searchable, None) => return Err(invalid(format!("no alpha for layer {i}"))),
            _ => Tensor::ones(1, DType::F64, &dev)?,
        };
        let p_out = width_probs(i)?;
        let by_width = p_op.reshape((1, k))?.matmul(&c)?.reshape((a, b))?;
        let layer = prev_out.reshape((1, a))?.matmul(&by_width)?.matmul(&p_out.reshape((b, 1))?)?;
        let layer = layer.reshape(())?;
        total = Some(match total {
            None => layer,
            Some(t) => (t + layer)?,
        });
        prev_out = p_out;
    }
    total.ok_or_else(|| invalid("empty supernet"))
}

/// Host-side expected FLOPs for given probabilities, in layer order of the
/// searchable-op and searchable-width layers respectively.
pub fn expected_flops_value(
    spec: &SupernetSpec,
    alpha_probs: &[Vec<f64>],
    gamma_probs: &[Vec<f64>],
    h: usize,
    w: usize,
) -> Result<f64> {
    let dims = spec.layer_spatial_dims(h, w)?;
    let ops: Vec<usize> = spec.searchable_op_layers().collect();
    let widths: Vec<usize> = spec.searchable_width_layers().collect();
    let probs_of = |i: usize| -> Vec<f64> {
        match widths.iter().position(|&j| j == i) {
            Some(p) => gamma_probs[p].clone(),
            None => vec![1.0],
        }
    };
    let mut total = 0.0;
    let mut prev = vec![1.0];
    for i in 0..spec.layers.len() {
        let table = layer_cost_table(spec, i, dims[i].1);
        let p_op = match ops.iter().position(|&j| j == i) {
            Some(p) => alpha_probs[p].clone(),
            None => vec![1.0],
        };
        let p_out = probs_of(i);
        for (k, pk) in p_op.iter().enumerate() {
            for (a, pa) in prev.iter().enumerate() {
                for (b, pb) in p_out.iter().enumerate() {
                    total += pk * pa * pb * table[k][a][b];
                }
            }
        }
        prev = p_out;
    }
    Ok(total)
}

/// Budget bounds on derived FLOPs at the evaluation resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsBounds {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub lambda0: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub bounds: FlopsBounds,
    /// Resolution at which budget FLOPs are measured.
    pub height: usize,
    pub width: usize,
    /// Lambda is clamped to `[lambda0 / span, lambda0 * span]`.
    pub lambda_span: f64,
    /// Lambda is revisited every this many search epochs.
    pub check_interval: usize,
}

impl BudgetConfig {
    pub fn translation(bounds: FlopsBounds) -> Self {
        BudgetConfig {
            lambda0: 1e-17,
            omega1: 0.25,
            omega2: 0.75,
            bounds,
            height: 256,
            width: 256,
            lambda_span: 1024.0,
            check_interval: 1,
        }
    }

    pub fn super_resolution(bounds: FlopsBounds) -> Self {
        BudgetConfig {
            lambda0: 1e-12,
            omega1: 2.0 / 7.0,
            omega2: 5.0 / 7.0,
            bounds,
            height: 256,
            width: 256,
            lambda_span: 1024.0,
            check_interval: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.bounds;
        if !(b.lower.is_finite() && b.upper.is_finite() && b.lower >= 0.0 && b.lower <= b.upper) {
            return Err(Error::Config(format!(
                "FLOPs bounds must satisfy 0 <= lower <= upper, got [{}, {}]",
                b.lower, b.upper
            )));
        }
        if !(self.lambda0 > 0.0 && self.lambda0.is_finite()) {
            return Err(Error::Config("lambda0 must be positive".into()));
        }
        if !(self.omega1 >= 0.0 && self.omega2 >= 0.0 && self.omega1 + self.omega2 > 0.0) {
            return Err(Error::Config("omega weights must be non-negative and not both zero".into()));
        }
        if !(self.lambda_span >= 1.0) {
            return Err(Error::Config("lambda_span must be at least 1".into()));
        }
        if self.height == 0 || self.width == 0 || self.check_interval == 0 {
            return Err(Error::Config("budget resolution and check interval must be positive".into()));
        }
        Ok(())
    }
}

/// `lambda * (omega1 * F(alpha|gamma) + omega2 * F(gamma|alpha))`.
pub fn budget_term(spec: &SupernetSpec, params: &ArchParams, cfg: &BudgetConfig, lambda: f64) -> Result<Tensor> {
    let fa = expected_flops(spec, params, cfg.height, cfg.width, Condition::Alpha)?;
    let fg = expected_flops(spec, params, cfg.height, cfg.width, Condition::Gamma)?;
    Ok((((fa * cfg.omega1)? + (fg * cfg.omega2)?)? * lambda)?)
}

/// Doubles lambda above the upper bound and halves it below the lower one.
pub fn update_lambda(lambda: f64, derived: f64, cfg: &BudgetConfig) -> f64 {
    let next = if derived > cfg.bounds.upper {
        lambda * 2.0
    } else if derived < cfg.bounds.lower {
        lambda / 2.0
    } else {
        lambda
    };
    next.clamp(cfg.lambda0 / cfg.lambda_span, cfg.lambda0 * cfg.lambda_span)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::{build_sr_supernet_with, build_translation_supernet_with};

    #[test]
    fn per_pixel_costs() {
        let res = LayerOp::Operator(OperatorKind::ResBlock);
        assert_eq!(per_pixel_flops(res, 4, 4), 288.0);
        assert_eq!(per_pixel_flops(res, 2, 4), 72.0 + 144.0 + 8.0);
        let dws = LayerOp::Operator(OperatorKind::DwsBlock);
        assert_eq!(per_pixel_flops(dws, 2, 4), 8.0 + 36.0 + 16.0);
        assert_eq!(op_flops(LayerOp::Conv { kernel: 7 }, 3, 8, (4, 4)), 49.0 * 24.0 * 16.0);
    }

    #[test]
    fn uniform_logits_expected_flops_matches_host_value() {
        let spec = build_translation_supernet_with(16, 2).unwrap();
        let params = ArchParams::uniform(&spec, DType::F32).unwrap();
        let t = expected_flops(&spec, &params, 16, 16, Condition::Joint).unwrap();
        let a: Vec<Vec<f64>> = params.alpha.iter().map(|_| vec![0.25; 4]).collect();
        let g: Vec<Vec<f64>> = params
            .gamma
            .iter()
            .map(|(i, _)| {
                let n = spec.layers[*i].width_candidates().len();
                vec![1.0 / n as f64; n]
            })
            .collect();
        let v = expected_flops_value(&spec, &a, &g, 16, 16).unwrap();
        let tv = t.to_scalar::<f64>().unwrap();
        assert!((tv - v).abs() <= 1e-9 * v, "{tv} vs {v}");
    }

    #[test]
    fn lambda_update_rules() {
        let cfg = BudgetConfig::translation(FlopsBounds { lower: 10.0, upper: 20.0 });
        assert_eq!(update_lambda(1e-17, 30.0, &cfg), 2e-17);
        assert_eq!(update_lambda(1e-17, 5.0, &cfg), 5e-18);
        assert_eq!(update_lambda(1e-17, 15.0, &cfg), 1e-17);
        assert_eq!(update_lambda(1e-17 * 1024.0, 30.0, &cfg), 1e-17 * 1024.0);
    }

    #[test]
    fn bad_bounds_rejected() {
        let cfg = BudgetConfig::translation(FlopsBounds { lower: 20.0, upper: 10.0 });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sr_report_has_every_layer() {
        let spec = build_sr_supernet_with(8, 2, 2).unwrap();
        let arch = Architecture::max_of(&spec, OperatorKind::Conv3x3);
        let r = derived_flops(&spec, &arch, 8, 8).unwrap();
        assert_eq!(r.layers.len(), spec.layers.len());
        assert!(r.to_text().starts_with("agd-flops v1\n"));
        assert_eq!(r.layers.last().unwrap().out_h, 32);
    }
}
