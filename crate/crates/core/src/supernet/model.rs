use candle_core::{DType, Tensor, Var};
use rand::Rng;
use sha2::{Digest, Sha256};

use super::kernel::{KernelKind, SuperKernel};
use super::params::{ForwardPlan, OpPlan, WidthRelax};
use crate::error::{invalid, Error, Result};
use crate::nn;
use crate::search_space::{FixedOp, LayerSpec, Norm, OpMode, OperatorKind, SupernetSpec, Upsample, WidthMode};

/// Weights of one operator at maximal width.
#[derive(Debug, Clone)]
pub enum OpWeights {
    Conv(SuperKernel),
    Res {
        conv1: SuperKernel,
        conv2: SuperKernel,
        proj: Option<SuperKernel>,
    },
    Dws {
        pw1: SuperKernel,
        dw: SuperKernel,
        pw2: SuperKernel,
    },
}

impl OpWeights {
    fn new(kind: OperatorKind, max_in: usize, max_out: usize, needs_proj: bool, bias: bool, dtype: DType, rng: &mut impl Rng) -> Result<Self> {
        let conv = |i, o, k, rng: &mut _| SuperKernel::new(KernelKind::Conv, i, o, k, bias, dtype, rng);
        Ok(match kind {
            OperatorKind::Conv1x1 => OpWeights::Conv(conv(max_in, max_out, 1, rng)?),
            OperatorKind::Conv3x3 => OpWeights::Conv(conv(max_in, max_out, 3, rng)?),
            OperatorKind::ResBlock => OpWeights::Res {
                conv1: conv(max_in, max_out, 3, rng)?,
                conv2: conv(max_out, max_out, 3, rng)?,
                proj: if needs_proj { Some(conv(max_in, max_out, 1, rng)?) } else { None },
            },
            OperatorKind::DwsBlock => OpWeights::Dws {
                pw1: conv(max_in, max_out, 1, rng)?,
                dw: SuperKernel::new(KernelKind::Depthwise, max_out, max_out, 3, bias, dtype, rng)?,
                pw2: conv(max_out, max_out, 1, rng)?,
            },
        })
    }

    fn kernels(&self) -> Vec<(&'static str, &SuperKernel)> {
        match self {
            OpWeights::Conv(k) => vec![("conv", k)],
            OpWeights::Res { conv1, conv2, proj } => {
                let mut v = vec![("conv1", conv1), ("conv2", conv2)];
                if let Some(p) = proj {
                    v.push(("proj", p));
                }
                v
            }
            OpWeights::Dws { pw1, dw, pw2 } => vec![("pw1", pw1), ("dw", dw), ("pw2", pw2)],
        }
    }

    fn kernels_mut(&mut self) -> Vec<&mut SuperKernel> {
        match self {
            OpWeights::Conv(k) => vec![k],
            OpWeights::Res { conv1, conv2, proj } => {
                let mut v = vec![conv1, conv2];
                if let Some(p) = proj {
                    v.push(p);
                }
                v
            }
            OpWeights::Dws { pw1, dw, pw2 } => vec![pw1, dw, pw2],
        }
    }
}

#[derive(Debug, Clone)]
pub enum LayerWeights {
    Fixed(SuperKernel),
    /// Indexed like `OperatorKind::ALL`; `None` for operators the layer cannot run.
    Ops(Vec<Option<OpWeights>>),
}

/// Weight-sharing supernet. Every layer stores its weights at maximal width;
/// a [`ForwardPlan`] picks operators and widths per pass.
#[derive(Debug, Clone)]
pub struct Supernet {
    pub spec: SupernetSpec,
    pub layers: Vec<LayerWeights>,
    pub dtype: DType,
}

impl Supernet {
    pub fn new(spec: &SupernetSpec, dtype: DType, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let max_in = spec.max_in_width(i);
            let max_out = layer.max_width();
            let bias = layer.norm == Norm::None;
            let weights = match layer.op_mode {
                OpMode::Fixed(FixedOp::Conv { kernel }) => {
                    let kind = if layer.upsample == Upsample::Transposed2x {
                        KernelKind::Transposed
                    } else {
                        KernelKind::Conv
                    };
                    LayerWeights::Fixed(SuperKernel::new(kind, max_in, max_out, kernel, bias, dtype, rng)?)
                }
                OpMode::Fixed(FixedOp::Operator(k)) => {
                    let proj = needs_proj(spec, i);
                    let mut ops: Vec<Option<OpWeights>> = vec![None, None, None, None];
                    ops[k.index()] = Some(OpWeights::new(k, max_in, max_out, proj, bias, dtype, rng)?);
                    LayerWeights::Ops(ops)
                }
                OpMode::Searchable => {
                    let proj = needs_proj(spec, i);
                    let ops = OperatorKind::ALL
                        .iter()
                        .map(|&k| OpWeights::new(k, max_in, max_out, proj, bias, dtype, rng).map(Some))
                        .collect::<Result<Vec<_>>>()?;
                    LayerWeights::Ops(ops)
                }
            };
            layers.push(weights);
        }
        Ok(Supernet {
            spec: spec.clone(),
            layers,
            dtype,
        })
    }

    /// `(name, kernel)` for every kernel, in a stable order.
    fn kernels(&self) -> Vec<(String, &SuperKernel)> {
        let mut out = Vec::new();
        for (i, lw) in self.layers.iter().enumerate() {
            match lw {
                LayerWeights::Fixed(k) => out.push((format!("layers.{i}.conv"), k)),
                LayerWeights::Ops(ops) => {
                    for (kind, op) in OperatorKind::ALL.iter().zip(ops) {
                        if let Some(op) = op {
                            for (part, k) in op.kernels() {
                                out.push((format!("layers.{i}.{}.{part}", kind.name()), k));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn kernels_mut(&mut self) -> Vec<&mut SuperKernel> {
        let mut out = Vec::new();
        for lw in self.layers.iter_mut() {
            match lw {
                LayerWeights::Fixed(k) => out.push(k),
                LayerWeights::Ops(ops) => {
                    for op in ops.iter_mut().flatten() {
                        out.extend(op.kernels_mut());
                    }
                }
            }
        }
        out
    }

    pub fn vars(&self) -> Vec<Var> {
        self.kernels()
            .into_iter()
            .flat_map(|(_, k)| k.vars().into_iter().map(|(_, v)| v.clone()).collect::<Vec<_>>())
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.kernels()
            .into_iter()
            .flat_map(|(name, k)| {
                k.vars()
                    .into_iter()
                    .map(|(part, v)| (format!("{name}.{part}"), v.as_tensor().clone()))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Copies weights in place from `get`, which must provide every tensor.
    pub fn load_named(&self, get: impl Fn(&str) -> Option<Tensor>) -> Result<()> {
        for (name, k) in self.kernels() {
            for (part, v) in k.vars() {
                let key = format!("{name}.{part}");
                let src = get(&key).ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                if src.dims() != v.dims() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {key} has shape {:?}, expected {:?}",
                        src.dims(),
                        v.dims()
                    )));
                }
                v.set(&src.to_dtype(self.dtype)?)?;
            }
        }
        Ok(())
    }

    /// A copy with independent weight storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut copy = self.clone();
        for k in copy.kernels_mut() {
            k.weight = Var::from_tensor(&k.weight.as_tensor().copy()?)?;
            if let Some(b) = &k.bias {
                k.bias = Some(Var::from_tensor(&b.as_tensor().copy()?)?);
            }
        }
        Ok(copy)
    }

    /// Applies `f` to every weight tensor in place.
    pub fn map_weights(&self, mut f: impl FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<()> {
        for (name, t) in self.named_tensors() {
            let new = f(&name, &t)?;
            let var = self
                .vars()
                .into_iter()
                .find(|v| v.as_tensor().id() == t.id())
                .expect("tensor came from these vars");
            var.set(&new)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.vars().iter().map(|v| v.elem_count()).sum()
    }

    /// Hex SHA-256 over parameter names and little-endian f32 values.
    pub fn weight_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Output of layer `i` for operator `kind` at width `width_out`.
    pub fn op_forward(&self, i: usize, kind: OperatorKind, x: &Tensor, width_out: usize) -> Result<Tensor> {
        self.op_forward_from(i, kind, x, x.dim(1)?, width_out)
    }

    fn op_forward_from(&self, i: usize, kind: OperatorKind, x: &Tensor, in_w: usize, width_out: usize) -> Result<Tensor> {
        let layer = &self.spec.layers[i];
        let op = match &self.layers[i] {
            LayerWeights::Ops(ops) => ops[kind.index()]
                .as_ref()
                .ok_or_else(|| invalid(format!("layer {} cannot run {kind}", layer.id)))?,
            LayerWeights::Fixed(_) => return Err(invalid(format!("layer {} is a fixed conv", layer.id))),
        };
        run_op(layer, op, x, in_w, width_out)
    }

    /// `sum_k p_k * op_k(x)` over all candidate operators.
    pub fn mixed_op_forward(&self, i: usize, x: &Tensor, probs: &Tensor, width_out: usize) -> Result<Tensor> {
        self.mixed_op_forward_from(i, x, x.dim(1)?, probs, width_out)
    }

    fn mixed_op_forward_from(&self, i: usize, x: &Tensor, in_w: usize, probs: &Tensor, width_out: usize) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for (k, &kind) in OperatorKind::ALL.iter().enumerate() {
            let y = self.op_forward_from(i, kind, x, in_w, width_out)?;
            let p = probs.narrow(0, k, 1)?.reshape((1, 1, 1, 1))?;
            let term = y.broadcast_mul(&p)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
        Ok(acc.expect("four operators"))
    }

    /// Layer `i` at `width_out`. `x` may carry zero channels beyond its
    /// logical width `in_w`.
    fn layer_forward(&self, i: usize, op: &OpPlan, x: &Tensor, in_w: usize, width_out: usize) -> Result<Tensor> {
        let layer = &self.spec.layers[i];
        match (&self.layers[i], op) {
            (LayerWeights::Fixed(k), _) => {
                let input = if layer.upsample == Upsample::Bilinear2x {
                    nn::upsample_bilinear2x(x)?
                } else {
                    x.clone()
                };
                let z = k.apply(&input, width_out, layer.stride)?;
                let z = if layer.norm == Norm::Instance { nn::instance_norm(&z)? } else { z };
                nn::activate(z, layer.activation)
            }
            (LayerWeights::Ops(_), OpPlan::Single(kind)) => self.op_forward_from(i, *kind, x, in_w, width_out),
            (LayerWeights::Ops(_), OpPlan::Mixed(p)) => self.mixed_op_forward_from(i, x, in_w, p, width_out),
            (LayerWeights::Ops(_), OpPlan::Fixed) => Err(invalid(format!("layer {} needs an operator", layer.id))),
        }
    }

    /// `sum_j weights_j * pad(layer_j(x))` over the candidate widths.
    fn relaxed_forward(&self, i: usize, op: &OpPlan, x: &Tensor, in_w: usize, relax: &WidthRelax) -> Result<Tensor> {
        let wmax = *relax.widths.iter().max().ok_or_else(|| invalid("no width candidates"))?;
        let shared = match self.layers[i] {
            LayerWeights::Fixed(_) => Some(self.layer_forward(i, op, x, in_w, wmax)?),
            LayerWeights::Ops(_) => None,
        };
        let mut acc: Option<Tensor> = None;
        for (j, &wj) in relax.widths.iter().enumerate() {
            let y = match &shared {
                Some(full) => full.narrow(1, 0, wj)?,
                None => self.layer_forward(i, op, x, in_w, wj)?,
            };
            let term = nn::pad_channels(&y, wmax)?.broadcast_mul(&relax.weights.narrow(0, j, 1)?.reshape((1, 1, 1, 1))?)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
        Ok(acc.expect("at least one candidate"))
    }

    pub fn forward(&self, x: &Tensor, plan: &ForwardPlan) -> Result<Tensor> {
        self.forward_with(x, plan, |_, y| Ok(y))
    }

    /// Forward pass; `hook(layer, output)` may replace each layer's output.
    pub fn forward_with(
        &self,
        x: &Tensor,
        plan: &ForwardPlan,
        mut hook: impl FnMut(usize, Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        let (_, c, h, w) = x
            .dims4()
            .map_err(|_| Error::Shape(format!("expected an NCHW input, got {:?}", x.dims())))?;
        if c != self.spec.input_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {c}",
                self.spec.input_channels
            )));
        }
        self.spec.layer_spatial_dims(h, w)?;
        if plan.layers.len() != self.spec.layers.len() {
            return Err(invalid("plan does not match the supernet"));
        }
        let mut saved: Vec<(usize, Tensor)> = Vec::new();
        let mut cur = x.clone();
        let mut cur_w = c;
        for (i, (layer, lp)) in self.spec.layers.iter().zip(&plan.layers).enumerate() {
            if lp.width == 0 || lp.width > layer.max_width() {
                return Err(invalid(format!("width {} out of range for {}", lp.width, layer.id)));
            }
            if let WidthMode::Fixed(wf) = layer.width_mode {
                if lp.width != wf {
                    return Err(invalid(format!("layer {} is fixed to width {wf}", layer.id)));
                }
            }
            for s in self.spec.skips.iter().filter(|s| s.from == i) {
                saved.push((s.to, cur.clone()));
            }
            let mut y = match &lp.relax {
                Some(r) => {
                    if r.widths.get(r.index) != Some(&lp.width) || r.weights.dim(0)? != r.widths.len() {
                        return Err(invalid(format!("inconsistent width relaxation for {}", layer.id)));
                    }
                    self.relaxed_forward(i, &lp.op, &cur, cur_w, r)?
                }
                None => self.layer_forward(i, &lp.op, &cur, cur_w, lp.width)?,
            };
            let mut k = 0;
            while k < saved.len() {
                if saved[k].0 == i {
                    let (_, s) = saved.remove(k);
                    let c = y.dim(1)?.max(s.dim(1)?);
                    y = (nn::pad_channels(&y, c)? + nn::pad_channels(&s, c)?)?;
                } else {
                    k += 1;
                }
            }
            cur = hook(i, y)?;
            cur_w = lp.width;
        }
        Ok(cur)
    }
}

/// A residual projection is needed when input and output widths can differ.
fn needs_proj(spec: &SupernetSpec, i: usize) -> bool {
    let layer = &spec.layers[i];
    let in_fixed = i == 0 || !spec.layers[i - 1].has_searchable_width();
    let out_fixed = !layer.has_searchable_width();
    !(in_fixed && out_fixed && spec.max_in_width(i) == layer.max_width())
}

fn norm(layer: &LayerSpec, x: Tensor) -> Result<Tensor> {
    match layer.norm {
        Norm::Instance => nn::instance_norm(&x),
        Norm::None => Ok(x),
    }
}

fn run_op(layer: &LayerSpec, op: &OpWeights, x: &Tensor, in_w: usize, width_out: usize) -> Result<Tensor> {
    let act = layer.activation;
    let identity = || -> Result<Tensor> { Ok(x.narrow(1, 0, width_out)?) };
    match op {
        OpWeights::Conv(k) => nn::activate(norm(layer, k.apply(x, width_out, 1)?)?, act),
        OpWeights::Res { conv1, conv2, proj } => {
            let h = nn::activate(norm(layer, conv1.apply(x, width_out, 1)?)?, act)?;
            let h = norm(layer, conv2.apply(&h, width_out, 1)?)?;
            let shortcut = if in_w == width_out {
                identity()?
            } else {
                let p = proj
                    .as_ref()
                    .ok_or_else(|| invalid(format!("layer {} has no projection", layer.id)))?;
                norm(layer, p.apply(x, width_out, 1)?)?
            };
            Ok((h + shortcut)?)
        }
        OpWeights::Dws { pw1, dw, pw2 } => {
            let h = nn::activate(norm(layer, pw1.apply(x, width_out, 1)?)?, act)?;
            let h = nn::activate(norm(layer, dw.apply(&h, width_out, 1)?)?, act)?;
            let h = norm(layer, pw2.apply(&h, width_out, 1)?)?;
            if in_w == width_out {
                Ok((h + identity()?)?)
            } else {
                Ok(h)
            }
        }
    }
}
