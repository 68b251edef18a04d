//! Concrete (operator, width) assignments for every layer of a supernet.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search_space::{FixedOp, OpMode, OperatorKind, SupernetSpec, Task, WidthMode};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
}

/// One resolved layer. `op` is `None` for layers whose operator is a
/// built-in stem/header convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerChoice {
    pub block_id: String,
    pub op: Option<OperatorKind>,
    pub width: usize,
}

/// How strictly an architecture is checked against its search space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WidthCheck {
    /// Widths must be members of each layer's candidate set.
    #[default]
    Candidates,
    /// Any positive width; used for reference networks outside the search
    /// space, such as the original CycleGAN generator.
    Free,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub task: Task,
    pub layers: Vec<LayerChoice>,
    /// Resolution at which this architecture was derived or measured.
    pub resolution: Option<(usize, usize)>,
    pub provenance: Option<Provenance>,
}

impl Architecture {
    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.width).collect()
    }

    pub fn validate(&self, spec: &SupernetSpec, check: WidthCheck) -> Result<()> {
        if self.task != spec.task {
            return Err(Error::Schema(format!(
                "architecture is for {} but the search space is {}",
                self.task, spec.task
            )));
        }
        if self.layers.len() != spec.layers.len() {
            return Err(Error::Schema(format!(
                "expected {} layers, got {}",
                spec.layers.len(),
                self.layers.len()
            )));
        }
        for (choice, layer) in self.layers.iter().zip(&spec.layers) {
            if choice.block_id != layer.id {
                return Err(Error::Schema(format!(
                    "expected block `{}`, got `{}`",
                    layer.id, choice.block_id
                )));
            }
            match (layer.op_mode, choice.op) {
                (OpMode::Searchable, Some(_)) => {}
                (OpMode::Searchable, None) => {
                    return Err(Error::Schema(format!("block {} needs an operator", layer.id)))
                }
                (OpMode::Fixed(FixedOp::Conv { .. }), None) => {}
                (OpMode::Fixed(FixedOp::Operator(k)), Some(op)) if k == op => {}
                (OpMode::Fixed(_), op) => {
                    return Err(Error::Schema(format!(
                        "block {} has a fixed operator, got {:?}",
                        layer.id, op
                    )))
                }
            }
            match layer.width_mode {
                WidthMode::Fixed(c) if c != choice.width => {
                    return Err(Error::Schema(format!(
                        "block {} is fixed to width {c}, got {}",
                        layer.id, choice.width
                    )))
                }
                WidthMode::Fixed(_) => {}
                WidthMode::Searchable { .. } => {
                    let ok = match check {
                        WidthCheck::Candidates => layer.width_candidates().contains(&choice.width),
                        WidthCheck::Free => choice.width > 0,
                    };
                    if !ok {
                        return Err(Error::Schema(format!(
                            "width {} is not a candidate of block {} (candidates {:?})",
                            choice.width,
                            layer.id,
                            layer.width_candidates()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Pins every searchable choice, producing the spec of a standalone network.
    pub fn concretize(&self, spec: &SupernetSpec) -> Result<SupernetSpec> {
        self.validate(spec, WidthCheck::Free)?;
        let mut concrete = spec.clone();
        for (layer, choice) in concrete.layers.iter_mut().zip(&self.layers) {
            if let (OpMode::Searchable, Some(op)) = (layer.op_mode, choice.op) {
                layer.op_mode = OpMode::Fixed(FixedOp::Operator(op));
            }
            layer.width_mode = WidthMode::Fixed(choice.width);
        }
        concrete.validate()?;
        Ok(concrete)
    }

    /// The largest architecture of a search space: full widths, and the
    /// given operator on every searchable layer.
    pub fn max_of(spec: &SupernetSpec, op: OperatorKind) -> Architecture {
        Self::uniform(spec, op, |l| l.max_width())
    }

    /// The smallest widths with the given operator.
    pub fn min_of(spec: &SupernetSpec, op: OperatorKind) -> Architecture {
        Self::uniform(spec, op, |l| l.width_candidates()[0])
    }

    fn uniform(
        spec: &SupernetSpec,
        op: OperatorKind,
        width: impl Fn(&crate::search_space::LayerSpec) -> usize,
    ) -> Architecture {
        let layers = spec
            .layers
            .iter()
            .map(|l| LayerChoice {
                block_id: l.id.clone(),
                op: match l.op_mode {
                    OpMode::Searchable => Some(op),
                    OpMode::Fixed(FixedOp::Operator(k)) => Some(k),
                    OpMode::Fixed(FixedOp::Conv { .. }) => None,
                },
                width: width(l),
            })
            .collect();
        Architecture {
            task: spec.task,
            layers,
            resolution: None,
            provenance: None,
        }
    }
}
