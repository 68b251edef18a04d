//! Operator set, width candidates and the two application-specific supernet
//! layouts (image translation and 4x super resolution).
//!
//! A [`SupernetSpec`] is a purely structural description: an ordered list of
//! layers plus the additive skip connections between them. Weights live in
//! [`crate::supernet::Supernet`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// The four candidate operators of every searchable layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OperatorKind {
    Conv1x1,
    Conv3x3,
    /// Two 3x3 convolutions with an additive skip.
    ResBlock,
    /// 1x1 conv, depthwise 3x3 conv, 1x1 conv, with an additive skip.
    DwsBlock,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 4] = [
        OperatorKind::Conv1x1,
        OperatorKind::Conv3x3,
        OperatorKind::ResBlock,
        OperatorKind::DwsBlock,
    ];

    pub fn index(self) -> usize {
        match self {
            OperatorKind::Conv1x1 => 0,
            OperatorKind::Conv3x3 => 1,
            OperatorKind::ResBlock => 2,
            OperatorKind::DwsBlock => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::Conv1x1 => "Conv1x1",
            OperatorKind::Conv3x3 => "Conv3x3",
            OperatorKind::ResBlock => "ResBlock",
            OperatorKind::DwsBlock => "DwsBlock",
        }
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OperatorKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown operator `{s}`")))
    }
}

/// Fraction of a layer's maximal width that is actually used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ExpansionRatio {
    OneThird,
    Half,
    ThreeQuarters,
    FiveSixths,
    One,
}

impl ExpansionRatio {
    /// Ascending.
    pub const ALL: [ExpansionRatio; 5] = [
        ExpansionRatio::OneThird,
        ExpansionRatio::Half,
        ExpansionRatio::ThreeQuarters,
        ExpansionRatio::FiveSixths,
        ExpansionRatio::One,
    ];

    /// (numerator, denominator).
    pub fn fraction(self) -> (usize, usize) {
        match self {
            ExpansionRatio::OneThird => (1, 3),
            ExpansionRatio::Half => (1, 2),
            ExpansionRatio::ThreeQuarters => (3, 4),
            ExpansionRatio::FiveSixths => (5, 6),
            ExpansionRatio::One => (1, 1),
        }
    }

    pub fn value(self) -> f64 {
        let (n, d) = self.fraction();
        n as f64 / d as f64
    }

    /// `ceil(ratio * max / 8) * 8`, computed in integers.
    pub fn channels(self, max_channels: usize) -> usize {
        let (n, d) = self.fraction();
        (n * max_channels).div_ceil(8 * d) * 8
    }
}

/// Rounded, deduplicated, ascending width candidates for a layer whose
/// superkernel holds `max_channels` channels.
pub fn candidate_widths(max_channels: usize) -> Result<Vec<usize>> {
    if max_channels == 0 || max_channels % 8 != 0 {
        return Err(invalid(format!(
            "maximal width must be a positive multiple of 8, got {max_channels}"
        )));
    }
    Ok(widths_for(max_channels))
}

fn widths_for(max_channels: usize) -> Vec<usize> {
    let mut widths: Vec<usize> = ExpansionRatio::ALL
        .iter()
        .map(|r| r.channels(max_channels))
        .collect();
    widths.dedup();
    widths
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Translation,
    SuperResolution,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Translation => "translation",
            Task::SuperResolution => "super_resolution",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    Stem,
    Body,
    Header,
}

/// A non-searchable operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixedOp {
    /// Plain k x k convolution (transposed when the layer upsamples by `Transposed2x`).
    Conv { kernel: usize },
    /// One of the candidate operators, pinned. Used by concrete (derived) networks.
    Operator(OperatorKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpMode {
    Fixed(FixedOp),
    Searchable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WidthMode {
    Fixed(usize),
    Searchable { max_channels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Upsample {
    None,
    Transposed2x,
    Bilinear2x,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    Instance,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub id: String,
    pub role: LayerRole,
    pub op_mode: OpMode,
    pub width_mode: WidthMode,
    pub stride: usize,
    pub upsample: Upsample,
    pub norm: Norm,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn max_width(&self) -> usize {
        match self.width_mode {
            WidthMode::Fixed(c) => c,
            WidthMode::Searchable { max_channels } => max_channels,
        }
    }

    /// Output width candidates; a single entry for fixed widths.
    pub fn width_candidates(&self) -> Vec<usize> {
        match self.width_mode {
            WidthMode::Fixed(c) => vec![c],
            WidthMode::Searchable { max_channels } => widths_for(max_channels),
        }
    }

    pub fn has_searchable_op(&self) -> bool {
        matches!(self.op_mode, OpMode::Searchable)
    }

    pub fn has_searchable_width(&self) -> bool {
        matches!(self.width_mode, WidthMode::Searchable { .. })
    }

    /// Operators this layer can run, in `OperatorKind::ALL` order for searchable layers.
    pub fn operator_candidates(&self) -> Vec<LayerOp> {
        match self.op_mode {
            OpMode::Searchable => OperatorKind::ALL.iter().map(|&k| LayerOp::Operator(k)).collect(),
            OpMode::Fixed(FixedOp::Operator(k)) => vec![LayerOp::Operator(k)],
            OpMode::Fixed(FixedOp::Conv { kernel }) => vec![match self.upsample {
                Upsample::Transposed2x => LayerOp::TransposedConv { kernel },
                _ => LayerOp::Conv { kernel },
            }],
        }
    }
}

/// A concrete computation a layer may perform, as seen by the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerOp {
    Conv { kernel: usize },
    TransposedConv { kernel: usize },
    Operator(OperatorKind),
}

impl fmt::Display for LayerOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerOp::Conv { kernel } => write!(f, "Conv{kernel}x{kernel}"),
            LayerOp::TransposedConv { kernel } => write!(f, "TConv{kernel}x{kernel}"),
            LayerOp::Operator(k) => write!(f, "{k}"),
        }
    }
}

/// The input of layer `from` is added to the output of layer `to` (`from <= to`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkipSpec {
    pub from: usize,
    pub to: usize,
}

/// Constructor arguments, kept so a spec can be rebuilt from a schema file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "snake_case")]
pub enum SpaceLayout {
    Translation {
        max_width: usize,
        body_layers: usize,
    },
    SuperResolution {
        max_width: usize,
        groups: usize,
        layers_per_group: usize,
    },
}

impl SpaceLayout {
    pub fn task(&self) -> Task {
        match self {
            SpaceLayout::Translation { .. } => Task::Translation,
            SpaceLayout::SuperResolution { .. } => Task::SuperResolution,
        }
    }

    pub fn build(&self) -> Result<SupernetSpec> {
        match *self {
            SpaceLayout::Translation {
                max_width,
                body_layers,
            } => build_translation_supernet_with(max_width, body_layers),
            SpaceLayout::SuperResolution {
                max_width,
                groups,
                layers_per_group,
            } => build_sr_supernet_with(max_width, groups, layers_per_group),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupernetSpec {
    pub task: Task,
    pub layout: SpaceLayout,
    pub layers: Vec<LayerSpec>,
    pub skips: Vec<SkipSpec>,
    pub input_channels: usize,
    pub output_channels: usize,
    pub sr_scale: Option<usize>,
}

impl SupernetSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.has_searchable_op() && layer.role != LayerRole::Body {
                return Err(invalid(format!("layer {} has a searchable op outside the body", layer.id)));
            }
            if layer.stride != 1 && layer.stride != 2 {
                return Err(invalid(format!("layer {} has stride {}", layer.id, layer.stride)));
            }
            if layer.upsample != Upsample::None && layer.stride != 1 {
                return Err(invalid(format!("upsampling layer {} must have stride 1", layer.id)));
            }
            if layer.max_width() == 0 {
                return Err(invalid(format!("layer {} has zero width", layer.id)));
            }
            if i + 1 == self.layers.len() && layer.width_mode != WidthMode::Fixed(self.output_channels) {
                return Err(invalid("last layer must be fixed to the output channels"));
            }
        }
        for skip in &self.skips {
            if skip.from > skip.to || skip.to >= self.layers.len() {
                return Err(invalid(format!("bad skip {skip:?}")));
            }
            let in_w = self.max_in_width(skip.from);
            let out = &self.layers[skip.to];
            if out.width_mode != WidthMode::Fixed(in_w) {
                return Err(invalid(format!(
                    "skip into {} needs a fixed width of {in_w}",
                    out.id
                )));
            }
        }
        Ok(())
    }

    /// Maximal input width of layer `i`.
    pub fn max_in_width(&self, i: usize) -> usize {
        if i == 0 {
            self.input_channels
        } else {
            self.layers[i - 1].max_width()
        }
    }

    pub fn searchable_op_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.has_searchable_op())
            .map(|(i, _)| i)
    }

    pub fn searchable_width_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.has_searchable_width())
            .map(|(i, _)| i)
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    /// Output spatial size for an input of `h x w`, or an error when the
    /// input is too small for the stride pattern.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let dims = self.layer_spatial_dims(h, w)?;
        Ok(dims.last().map(|d| d.1).unwrap_or((h, w)))
    }

    /// (input hw, output hw) of every layer.
    pub fn layer_spatial_dims(&self, h: usize, w: usize) -> Result<Vec<((usize, usize), (usize, usize))>> {
        let total_stride: usize = self.layers.iter().map(|l| l.stride).product();
        if h < total_stride.max(1) || w < total_stride.max(1) {
            return Err(Error::Shape(format!(
                "input {h}x{w} is too small for a total downsampling factor of {total_stride}"
            )));
        }
        let mut cur = (h, w);
        let mut dims = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = match layer.upsample {
                Upsample::None => (cur.0.div_ceil(layer.stride), cur.1.div_ceil(layer.stride)),
                Upsample::Transposed2x | Upsample::Bilinear2x => (cur.0 * 2, cur.1 * 2),
            };
            dims.push((cur, out));
            cur = out;
        }
        Ok(dims)
    }
}

/// Translation supernet with the default nine searchable body layers.
pub fn build_translation_supernet(base_max_width: usize) -> Result<SupernetSpec> {
    build_translation_supernet_with(base_max_width, 9)
}

/// CycleGAN-shaped translation supernet: 7x7 stem conv, two stride-2 3x3
/// convs, `body_layers` searchable layers, two stride-2 transposed 3x3 convs
/// and a 7x7 output conv. Every width except the RGB output is searchable
/// with maximum `base_max_width`.
pub fn build_translation_supernet_with(base_max_width: usize, body_layers: usize) -> Result<SupernetSpec> {
    candidate_widths(base_max_width)?;
    if body_layers == 0 {
        return Err(invalid("translation supernet needs at least one body layer"));
    }
    let searchable = WidthMode::Searchable {
        max_channels: base_max_width,
    };
    let fixed_conv = |id: String, kernel: usize, stride: usize, upsample: Upsample, role: LayerRole| LayerSpec {
        id,
        role,
        op_mode: OpMode::Fixed(FixedOp::Conv { kernel }),
        width_mode: searchable,
        stride,
        upsample,
        norm: Norm::Instance,
        activation: Activation::Relu,
    };
    let mut layers = vec![
        fixed_conv("Stem0".into(), 7, 1, Upsample::None, LayerRole::Stem),
        fixed_conv("Stem1".into(), 3, 2, Upsample::None, LayerRole::Stem),
        fixed_conv("Stem2".into(), 3, 2, Upsample::None, LayerRole::Stem),
    ];
    for b in 1..=body_layers {
        layers.push(LayerSpec {
            id: format!("B{b}"),
            role: LayerRole::Body,
            op_mode: OpMode::Searchable,
            width_mode: searchable,
            stride: 1,
            upsample: Upsample::None,
            norm: Norm::Instance,
            activation: Activation::Relu,
        });
    }
    layers.push(fixed_conv("Header1".into(), 3, 1, Upsample::Transposed2x, LayerRole::Header));
    layers.push(fixed_conv("Header2".into(), 3, 1, Upsample::Transposed2x, LayerRole::Header));
    layers.push(LayerSpec {
        id: "Header3".into(),
        role: LayerRole::Header,
        op_mode: OpMode::Fixed(FixedOp::Conv { kernel: 7 }),
        width_mode: WidthMode::Fixed(3),
        stride: 1,
        upsample: Upsample::None,
        norm: Norm::None,
        activation: Activation::Tanh,
    });
    let spec = SupernetSpec {
        task: Task::Translation,
        layout: SpaceLayout::Translation {
            max_width: base_max_width,
            body_layers,
        },
        layers,
        skips: Vec::new(),
        input_channels: 3,
        output_channels: 3,
        sr_scale: None,
    };
    spec.validate()?;
    Ok(spec)
}

/// SR supernet with the default five residual-in-residual groups of five layers.
pub fn build_sr_supernet(body_max_width: usize) -> Result<SupernetSpec> {
    build_sr_supernet_with(body_max_width, 5, 5)
}

/// ESRGAN-style frame around `groups` residual-in-residual groups of
/// `layers_per_group` searchable layers. The last layer of each group is
/// pinned to the full body width so its group skip is well defined. No
/// normalization anywhere; 4x upscaling via two bilinear-upsample + conv stages.
pub fn build_sr_supernet_with(body_max_width: usize, groups: usize, layers_per_group: usize) -> Result<SupernetSpec> {
    candidate_widths(body_max_width)?;
    if groups == 0 || layers_per_group == 0 {
        return Err(invalid("super-resolution supernet needs at least one group of one layer"));
    }
    let w = body_max_width;
    let conv = |id: &str, width: usize, upsample: Upsample, activation: Activation, role: LayerRole| LayerSpec {
        id: id.to_string(),
        role,
        op_mode: OpMode::Fixed(FixedOp::Conv { kernel: 3 }),
        width_mode: WidthMode::Fixed(width),
        stride: 1,
        upsample,
        norm: Norm::None,
        activation,
    };
    let mut layers = vec![conv("Stem", w, Upsample::None, Activation::Identity, LayerRole::Stem)];
    let mut skips = Vec::new();
    for g in 1..=groups {
        let first = layers.len();
        for j in 1..=layers_per_group {
            let width_mode = if j == layers_per_group {
                WidthMode::Fixed(w)
            } else {
                WidthMode::Searchable { max_channels: w }
            };
            layers.push(LayerSpec {
                id: format!("RiR{g}.OP{j}"),
                role: LayerRole::Body,
                op_mode: OpMode::Searchable,
                width_mode,
                stride: 1,
                upsample: Upsample::None,
                norm: Norm::None,
                activation: Activation::LeakyRelu,
            });
        }
        skips.push(SkipSpec {
            from: first,
            to: layers.len() - 1,
        });
    }
    layers.push(conv("Trunk", w, Upsample::None, Activation::Identity, LayerRole::Header));
    skips.push(SkipSpec {
        from: 1,
        to: layers.len() - 1,
    });
    layers.push(conv("Up1", w, Upsample::Bilinear2x, Activation::LeakyRelu, LayerRole::Header));
    layers.push(conv("Up2", w, Upsample::Bilinear2x, Activation::LeakyRelu, LayerRole::Header));
    layers.push(conv("HR", w, Upsample::None, Activation::LeakyRelu, LayerRole::Header));
    layers.push(conv("Final", 3, Upsample::None, Activation::Identity, LayerRole::Header));
    let spec = SupernetSpec {
        task: Task::SuperResolution,
        layout: SpaceLayout::SuperResolution {
            max_width: w,
            groups,
            layers_per_group,
        },
        layers,
        skips,
        input_channels: 3,
        output_channels: 3,
        sr_scale: Some(4),
    };
    spec.validate()?;
    Ok(spec)
}
