//! JSON file form of an [`Architecture`].

use serde::{Deserialize, Serialize};

use crate::arch::{Architecture, LayerChoice, Provenance, WidthCheck};
use crate::error::{Error, Result};
use crate::search_space::{FixedOp, OpMode, SpaceLayout, SupernetSpec, Task, WidthMode};

pub const SCHEMA_VERSION: u32 = 1;

/// Written in the `op` field of layers whose operator is a built-in conv.
pub const FIXED_OP: &str = "-";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validation {
    #[default]
    Candidates,
    Free,
}

impl From<Validation> for WidthCheck {
    fn from(v: Validation) -> Self {
        match v {
            Validation::Candidates => WidthCheck::Candidates,
            Validation::Free => WidthCheck::Free,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockEntry {
    pub block_id: String,
    pub op: String,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSchema {
    pub version: u32,
    pub task: Task,
    pub search_space: SpaceLayout,
    #[serde(default)]
    pub validation: Validation,
    pub blocks: Vec<BlockEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

pub fn export_architecture(arch: &Architecture, layout: SpaceLayout, validation: Validation) -> Result<String> {
    let schema = ArchitectureSchema {
        version: SCHEMA_VERSION,
        task: arch.task,
        search_space: layout,
        validation,
        blocks: arch
            .layers
            .iter()
            .map(|l| BlockEntry {
                block_id: l.block_id.clone(),
                op: l.op.map(|k| k.name().to_string()).unwrap_or_else(|| FIXED_OP.into()),
                width: l.width,
            })
            .collect(),
        resolution: arch.resolution.map(|(h, w)| [h, w]),
        provenance: arch.provenance.clone(),
    };
    serde_json::to_string_pretty(&schema).map_err(|e| Error::Schema(e.to_string()))
}

/// Parses and validates a schema, returning the rebuilt search space and the
/// architecture. Layers whose operator and width are both fixed may be omitted.
pub fn import_architecture(text: &str) -> Result<(SupernetSpec, Architecture)> {
    let schema: ArchitectureSchema = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    if schema.version != SCHEMA_VERSION {
        return Err(Error::Schema(format!("unsupported schema version {}", schema.version)));
    }
    if schema.task != schema.search_space.task() {
        return Err(Error::Schema(format!(
            "task {} does not match the search space layout",
            schema.task
        )));
    }
    let spec = schema.search_space.build().map_err(|e| Error::Schema(e.to_string()))?;
    for (n, b) in schema.blocks.iter().enumerate() {
        if spec.layer_index(&b.block_id).is_none() {
            return Err(Error::Schema(format!("unknown block `{}`", b.block_id)));
        }
        if schema.blocks[..n].iter().any(|o| o.block_id == b.block_id) {
            return Err(Error::Schema(format!("duplicate block `{}`", b.block_id)));
        }
    }
    let mut layers = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        let entry = schema.blocks.iter().find(|b| b.block_id == layer.id);
        let choice = match entry {
            Some(b) => LayerChoice {
                block_id: b.block_id.clone(),
                op: if b.op == FIXED_OP {
                    None
                } else {
                    Some(b.op.parse().map_err(|e: Error| Error::Schema(e.to_string()))?)
                },
                width: b.width,
            },
            None => match (layer.op_mode, layer.width_mode) {
                (OpMode::Fixed(fixed), WidthMode::Fixed(w)) => LayerChoice {
                    block_id: layer.id.clone(),
                    op: match fixed {
                        FixedOp::Operator(k) => Some(k),
                        FixedOp::Conv { .. } => None,
                    },
                    width: w,
                },
                _ => return Err(Error::Schema(format!("missing block `{}`", layer.id))),
            },
        };
        layers.push(choice);
    }
    let arch = Architecture {
        task: schema.task,
        layers,
        resolution: schema.resolution.map(|[h, w]| (h, w)),
        provenance: schema.provenance,
    };
    arch.validate(&spec, schema.validation.into())?;
    Ok((spec, arch))
}

pub fn import_architecture_file(path: &std::path::Path) -> Result<(SupernetSpec, Architecture)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    import_architecture(&text)
}
