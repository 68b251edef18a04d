//! Synthetic desk-scale tasks: procedural textures and a seeded frozen teacher.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::Architecture;
use crate::distill::TeacherModel;
use crate::engine::{stream_rng, Dataset};
use crate::error::{invalid, Result};
use crate::nn;
use crate::search_space::{build_sr_supernet_with, build_translation_supernet_with, OperatorKind, SupernetSpec};
use crate::supernet::{ForwardPlan, Supernet};

pub const TOY_SAMPLES: usize = 256;
pub const TOY_SIZE: usize = 16;

const TEACHER_STREAM: u64 = 100;
const TEXTURE_STREAM: u64 = 101;
const HELD_OUT_STREAM: u64 = 102;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    TranslationToy,
    SrToy,
}

impl ToyKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "translation_toy" => Ok(ToyKind::TranslationToy),
            "sr_toy" => Ok(ToyKind::SrToy),
            _ => Err(invalid(format!("unknown toy task `{s}`"))),
        }
    }

    /// Student search space of the preset.
    pub fn spec(self) -> Result<SupernetSpec> {
        match self {
            ToyKind::TranslationToy => build_translation_supernet_with(32, 3),
            ToyKind::SrToy => build_sr_supernet_with(24, 2, 2),
        }
    }
}

pub struct ToyTask {
    pub spec: SupernetSpec,
    pub teacher: TeacherModel,
    pub teacher_arch: Architecture,
    pub data: Dataset,
}

/// Preset toy task with [`TOY_SAMPLES`] 16x16 inputs.
pub fn make_toy_task(kind: ToyKind, seed: u64) -> Result<ToyTask> {
    make_toy_task_with(&kind.spec()?, TOY_SAMPLES, TOY_SIZE, seed, DType::F32)
}

pub fn make_toy_task_with(spec: &SupernetSpec, samples: usize, size: usize, seed: u64, dtype: DType) -> Result<ToyTask> {
    let (teacher, teacher_arch) = toy_teacher(spec, seed, dtype)?;
    let inputs = textures(samples, spec.input_channels, size, size, seed, TEXTURE_STREAM, dtype)?;
    let targets = precompute_targets(&teacher, &inputs)?;
    Ok(ToyTask {
        spec: spec.clone(),
        teacher,
        teacher_arch,
        data: Dataset::new(inputs, targets)?,
    })
}

/// A separate draw of textures for evaluation, labelled by `teacher`.
pub fn held_out(teacher: &TeacherModel, samples: usize, size: usize, seed: u64) -> Result<Dataset> {
    let spec = &teacher.net().spec;
    let inputs = textures(samples, spec.input_channels, size, size, seed, HELD_OUT_STREAM, teacher.net().dtype)?;
    let targets = precompute_targets(teacher, &inputs)?;
    Dataset::new(inputs, targets)
}

/// The full-width all-ResBlock network of `spec` with seeded random weights.
pub fn toy_teacher(spec: &SupernetSpec, seed: u64, dtype: DType) -> Result<(TeacherModel, Architecture)> {
    let arch = Architecture::max_of(spec, OperatorKind::ResBlock);
    let concrete = arch.concretize(spec)?;
    let net = Supernet::new(&concrete, dtype, &mut stream_rng(seed, TEACHER_STREAM))?;
    let plan = ForwardPlan::concrete(&concrete)?;
    Ok((TeacherModel::new(net, plan), arch))
}

pub fn precompute_targets(teacher: &TeacherModel, inputs: &Tensor) -> Result<Tensor> {
    let n = inputs.dims()[0];
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < n {
        let len = 32.min(n - start);
        chunks.push(teacher.forward(&inputs.narrow(0, start, len)?)?);
        start += len;
    }
    Ok(Tensor::cat(&chunks, 0)?)
}

/// `n` procedural colour textures in `[-1, 1]`: a few random sinusoidal
/// gratings and soft blobs per image, squashed by `tanh`.
pub fn textures(n: usize, c: usize, h: usize, w: usize, seed: u64, stream: u64, dtype: DType) -> Result<Tensor> {
    let mut rng = stream_rng(seed, stream);
    let mut data = Vec::with_capacity(n * c * h * w);
    for _ in 0..n {
        let gratings: Vec<(f64, f64, f64, Vec<f64>)> = (0..3)
            .map(|_| {
                let theta = rng.random_range(0.0..PI);
                let freq = rng.random_range(0.5..4.0) * 2.0 * PI / h.max(w) as f64;
                let phase = rng.random_range(0.0..2.0 * PI);
                let amps = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
                (theta, freq, phase, amps)
            })
            .collect();
        let blobs: Vec<(f64, f64, f64, Vec<f64>)> = (0..2)
            .map(|_| {
                let cy = rng.random_range(0.0..h as f64);
                let cx = rng.random_range(0.0..w as f64);
                let r = rng.random_range(1.5..(h.min(w) as f64 / 2.0).max(2.0));
                let amps = (0..c).map(|_| rng.random_range(-1.5..1.5)).collect();
                (cy, cx, r, amps)
            })
            .collect();
        let bias: Vec<f64> = (0..c).map(|_| rng.random_range(-0.3..0.3)).collect();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (yf, xf) = (y as f64, x as f64);
                    let mut v = bias[ch];
                    for (theta, freq, phase, amps) in &gratings {
                        let t = xf * theta.cos() + yf * theta.sin();
                        v += amps[ch] * (freq * t + phase).sin();
                    }
                    for (cy, cx, r, amps) in &blobs {
                        let d2 = (yf - cy).powi(2) + (xf - cx).powi(2);
                        v += amps[ch] * (-d2 / (2.0 * r * r)).exp();
                    }
                    data.push(v.tanh());
                }
            }
        }
    }
    nn::tensor_from_f64(data, &[n, c, h, w], dtype, &Device::Cpu)
}
