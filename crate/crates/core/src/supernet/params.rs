use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;

use super::gumbel::{sample_width, WidthSample};
use crate::arch::Architecture;
use crate::error::{invalid, Error, Result};
use crate::nn::{self, softmax1};
use crate::search_space::{FixedOp, OpMode, OperatorKind, SupernetSpec};

/// Architecture logits: `alpha` per searchable-operator layer (length 4) and
/// `gamma` per searchable-width layer (one logit per width candidate).
#[derive(Debug, Clone)]
pub struct ArchParams {
    pub alpha: Vec<(usize, Var)>,
    pub gamma: Vec<(usize, Var)>,
}

impl ArchParams {
    /// All-zero logits, i.e. uniform distributions.
    pub fn uniform(spec: &SupernetSpec, dtype: DType) -> Result<Self> {
        let alpha = spec
            .searchable_op_layers()
            .map(|i| Ok((i, Var::zeros(OperatorKind::ALL.len(), dtype, &Device::Cpu)?)))
            .collect::<Result<Vec<_>>>()?;
        let gamma = spec
            .searchable_width_layers()
            .map(|i| {
                let n = spec.layers[i].width_candidates().len();
                Ok((i, Var::zeros(n, dtype, &Device::Cpu)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ArchParams { alpha, gamma })
    }

    pub fn from_values(
        spec: &SupernetSpec,
        alpha: &[Vec<f64>],
        gamma: &[Vec<f64>],
        dtype: DType,
    ) -> Result<Self> {
        let template = Self::uniform(spec, dtype)?;
        if alpha.len() != template.alpha.len() || gamma.len() != template.gamma.len() {
            return Err(invalid(format!(
                "expected {} alpha and {} gamma vectors, got {} and {}",
                template.alpha.len(),
                template.gamma.len(),
                alpha.len(),
                gamma.len()
            )));
        }
        let build = |slots: &[(usize, Var)], values: &[Vec<f64>]| -> Result<Vec<(usize, Var)>> {
            slots
                .iter()
                .zip(values)
                .map(|((layer, v), vals)| {
                    if vals.len() != v.dim(0)? {
                        return Err(invalid(format!("layer {layer}: expected {} logits", v.dim(0)?)));
                    }
                    if vals.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFinite(format!("logits of layer {layer}")));
                    }
                    let t = nn::tensor_from_f64(vals.clone(), &[vals.len()], dtype, &Device::Cpu)?;
                    Ok((*layer, Var::from_tensor(&t)?))
                })
                .collect()
        };
        Ok(ArchParams {
            alpha: build(&template.alpha, alpha)?,
            gamma: build(&template.gamma, gamma)?,
        })
    }

    pub fn alpha_for(&self, layer: usize) -> Option<&Var> {
        self.alpha.iter().find(|(i, _)| *i == layer).map(|(_, v)| v)
    }

    pub fn gamma_for(&self, layer: usize) -> Option<&Var> {
        self.gamma.iter().find(|(i, _)| *i == layer).map(|(_, v)| v)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.alpha
            .iter()
            .chain(&self.gamma)
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn alpha_values(&self) -> Result<Vec<Vec<f64>>> {
        self.alpha.iter().map(|(_, v)| nn::to_f64_vec(v.as_tensor())).collect()
    }

    pub fn gamma_values(&self) -> Result<Vec<Vec<f64>>> {
        self.gamma.iter().map(|(_, v)| nn::to_f64_vec(v.as_tensor())).collect()
    }

    pub fn check_finite(&self) -> Result<()> {
        for v in self.alpha_values()?.iter().chain(self.gamma_values()?.iter()) {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("architecture parameters".into()));
            }
        }
        Ok(())
    }

    /// `(name, tensor)` pairs for checkpointing.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let a = self
            .alpha
            .iter()
            .map(|(i, v)| (format!("arch.alpha.{i}"), v.as_tensor().clone()));
        let g = self
            .gamma
            .iter()
            .map(|(i, v)| (format!("arch.gamma.{i}"), v.as_tensor().clone()));
        a.chain(g).collect()
    }

    pub fn load_named(&self, get: impl Fn(&str) -> Option<Tensor>) -> Result<()> {
        for (name, t) in self.named_tensors() {
            let src = get(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if src.dims() != t.dims() {
                return Err(Error::Checkpoint(format!("tensor {name} has the wrong shape")));
            }
            let var = self
                .alpha
                .iter()
                .chain(&self.gamma)
                .find(|(_, v)| v.as_tensor().id() == t.id())
                .map(|(_, v)| v)
                .expect("tensor came from these vars");
            var.set(&src.to_dtype(t.dtype())?)?;
        }
        Ok(())
    }

    /// Plan for one search-mode forward: widths drawn by Gumbel-Softmax,
    /// operators mixed by `softmax(alpha)`. With `track_grad` the plan
    /// carries straight-through width weights so the loss reaches `alpha` and `gamma`.
    pub fn search_plan(
        &self,
        spec: &SupernetSpec,
        temperature: f64,
        rng: &mut impl Rng,
        track_grad: bool,
    ) -> Result<(ForwardPlan, Vec<(usize, WidthSample)>)> {
        let mut samples = Vec::with_capacity(self.gamma.len());
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let op = self.mixed_op(spec, i, track_grad)?;
            let (width, relax) = match self.gamma_for(i) {
                Some(g) => {
                    let logits = nn::to_f64_vec(g.as_tensor())?;
                    let sample = sample_width(&logits, temperature, rng)?;
                    let width = layer.width_candidates()[sample.index];
                    let relax = if track_grad {
                        Some(WidthRelax {
                            weights: straight_through_one_hot(g, &sample, temperature)?,
                            widths: layer.width_candidates(),
                            index: sample.index,
                        })
                    } else {
                        None
                    };
                    samples.push((i, sample));
                    (width, relax)
                }
                None => (layer.max_width(), None),
            };
            layers.push(LayerPlan { op, width, relax });
        }
        Ok((ForwardPlan { layers }, samples))
    }

    /// Plan with explicit width indices (one per searchable-width layer, in
    /// layer order) and operator mixing by the current, detached `alpha`.
    pub fn fixed_width_plan(&self, spec: &SupernetSpec, width_indices: &[usize]) -> Result<ForwardPlan> {
        if width_indices.len() != self.gamma.len() {
            return Err(invalid("one width index per searchable-width layer is required"));
        }
        let mut idx = width_indices.iter();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let op = self.mixed_op(spec, i, false)?;
            let width = if layer.has_searchable_width() {
                let cands = layer.width_candidates();
                let k = *idx.next().expect("checked length");
                *cands
                    .get(k)
                    .ok_or_else(|| invalid(format!("width index {k} out of range for {}", layer.id)))?
            } else {
                layer.max_width()
            };
            layers.push(LayerPlan { op, width, relax: None });
        }
        Ok(ForwardPlan { layers })
    }

    fn mixed_op(&self, spec: &SupernetSpec, i: usize, track_grad: bool) -> Result<OpPlan> {
        Ok(match spec.layers[i].op_mode {
            OpMode::Searchable => {
                let alpha = self
                    .alpha_for(i)
                    .ok_or_else(|| invalid(format!("no alpha for layer {i}")))?;
                let probs = softmax1(alpha.as_tensor())?;
                OpPlan::Mixed(if track_grad { probs } else { probs.detach() })
            }
            OpMode::Fixed(FixedOp::Operator(k)) => OpPlan::Single(k),
            OpMode::Fixed(FixedOp::Conv { .. }) => OpPlan::Fixed,
        })
    }
}

/// Exactly the one-hot of the sample in value, with the gradient of the
/// relaxed probabilities.
fn straight_through_one_hot(gamma: &Var, sample: &WidthSample, temperature: f64) -> Result<Tensor> {
    let n = sample.noise.len();
    let noise = nn::tensor_from_f64(sample.noise.clone(), &[n], gamma.dtype(), &Device::Cpu)?;
    let soft = softmax1(&((gamma.as_tensor() + noise)? / temperature)?)?;
    let hard: Vec<f64> = (0..n).map(|j| if j == sample.index { 1.0 } else { 0.0 }).collect();
    let hard = nn::tensor_from_f64(hard, &[n], gamma.dtype(), &Device::Cpu)?;
    Ok((hard + (&soft - soft.detach())?)?)
}

/// Search-mode width relaxation of one layer. The forward runs every
/// candidate width, zero-pads each to the largest and sums them under
/// `weights`; only `index` contributes to the value, every candidate to the
/// gradient.
#[derive(Debug, Clone)]
pub struct WidthRelax {
    pub weights: Tensor,
    pub widths: Vec<usize>,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub enum OpPlan {
    /// Built-in stem/header convolution.
    Fixed,
    Single(OperatorKind),
    /// Probabilities over `OperatorKind::ALL`.
    Mixed(Tensor),
}

#[derive(Debug, Clone)]
pub struct LayerPlan {
    pub op: OpPlan,
    pub width: usize,
    pub relax: Option<WidthRelax>,
}

/// Per-layer operator and output width for one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPlan {
    pub layers: Vec<LayerPlan>,
}

impl ForwardPlan {
    /// Exactly one operator and width per layer, no sampling.
    pub fn derived(spec: &SupernetSpec, arch: &Architecture) -> Result<Self> {
        arch.validate(spec, crate::arch::WidthCheck::Free)?;
        let layers = spec
            .layers
            .iter()
            .zip(&arch.layers)
            .map(|(layer, choice)| LayerPlan {
                op: match (layer.op_mode, choice.op) {
                    (OpMode::Fixed(FixedOp::Conv { .. }), _) => OpPlan::Fixed,
                    (_, Some(k)) => OpPlan::Single(k),
                    (_, None) => unreachable!("validated"),
                },
                width: choice.width,
                relax: None,
            })
            .collect();
        Ok(ForwardPlan { layers })
    }

    /// For specs without searchable choices.
    pub fn concrete(spec: &SupernetSpec) -> Result<Self> {
        if spec.searchable_op_layers().count() + spec.searchable_width_layers().count() > 0 {
            return Err(invalid("spec still has searchable layers"));
        }
        let layers = spec
            .layers
            .iter()
            .map(|l| LayerPlan {
                op: match l.op_mode {
                    OpMode::Fixed(FixedOp::Operator(k)) => OpPlan::Single(k),
                    _ => OpPlan::Fixed,
                },
                width: l.max_width(),
                relax: None,
            })
            .collect();
        Ok(ForwardPlan { layers })
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.width).collect()
    }
}
