//! TOML run configuration. Unknown keys are errors; the seed is mandatory.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::Architecture;
use crate::budget::{self, BudgetConfig, FlopsBounds};
use crate::distill::{DistillConfig, ExtractorSpec};
use crate::engine::TrainSettings;
use crate::error::{Error, Result};
use crate::harness::toy::{ToyKind, TOY_SAMPLES, TOY_SIZE};
use crate::optim::{LrSchedule, OptimizerConfig};
use crate::search_space::{OperatorKind, SpaceLayout, SupernetSpec, Task};
use crate::supernet::TemperatureSchedule;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundsKind {
    /// Fractions of the FLOPs of the largest architecture in the search space.
    FractionOfMax,
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSpec {
    pub kind: BoundsKind,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSection {
    pub lambda0: f64,
    pub omega1: f64,
    pub omega2: f64,
    /// Evaluation resolution of the budget.
    pub height: usize,
    pub width: usize,
    pub bounds: BoundsSpec,
    #[serde(default = "default_span")]
    pub lambda_span: f64,
    #[serde(default = "default_interval")]
    pub check_interval: usize,
}

fn default_span() -> f64 {
    1024.0
}

fn default_interval() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Procedural textures labelled by the teacher.
    Toy {
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default = "default_size")]
        size: usize,
    },
    /// A checkpoint holding an `inputs` tensor `[n, c, h, w]` in `[-1, 1]`
    /// and optionally `targets`.
    Tensors { path: PathBuf },
    /// PNG/JPEG files, resized to `size x size` and mapped to `[-1, 1]`.
    ImageFolder { path: PathBuf, size: usize },
}

fn default_samples() -> usize {
    TOY_SAMPLES
}

fn default_size() -> usize {
    TOY_SIZE
}

/// A frozen teacher stored as an architecture schema plus weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub arch: PathBuf,
    pub weights: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_eval_samples")]
    pub samples: usize,
}

fn default_eval_samples() -> usize {
    32
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            samples: default_eval_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub task: Task,
    pub search_space: SpaceLayout,
    #[serde(default)]
    pub precision: Precision,
    pub budget: BudgetSection,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub extractor: ExtractorSpec,
    pub train: TrainSettings,
    pub data: DataSpec,
    #[serde(default)]
    pub teacher: Option<TeacherSpec>,
    #[serde(default)]
    pub eval: EvalSection,
}

/// A parsed config with its hash and the pieces derived from it.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub hash: String,
    pub spec: SupernetSpec,
    pub budget: BudgetConfig,
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, validates and resolves relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes.clone()).map_err(|_| Error::Config("config is not UTF-8".into()))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.resolve(hash_bytes(&bytes))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataSpec::Tensors { path } | DataSpec::ImageFolder { path, .. } => fix(path),
            DataSpec::Toy { .. } => {}
        }
        if let Some(t) = &mut self.teacher {
            fix(&mut t.arch);
            fix(&mut t.weights);
        }
        if let ExtractorSpec::External { path } = &mut self.extractor {
            fix(path);
        }
    }

    /// Validates an in-memory config; `hash` identifies it in provenance.
    pub fn resolve(self, hash: String) -> Result<LoadedConfig> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        if self.task != self.search_space.task() {
            return Err(Error::Config(format!(
                "task {} does not match the search_space layout",
                self.task
            )));
        }
        let spec = self.search_space.build().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        self.distill.validate()?;
        let missing = |p: &Path| -> Result<()> {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::Config(format!("path {} does not exist", p.display())))
            }
        };
        match &self.data {
            DataSpec::Toy { samples, size } => {
                if *samples < 2 || *size == 0 {
                    return Err(Error::Config("toy data needs at least 2 samples of positive size".into()));
                }
            }
            DataSpec::Tensors { path } | DataSpec::ImageFolder { path, .. } => {
                missing(path)?;
                if self.teacher.is_none() {
                    return Err(Error::Config("non-toy data needs a [teacher] section".into()));
                }
            }
        }
        if let Some(t) = &self.teacher {
            missing(&t.arch)?;
            missing(&t.weights)?;
        }
        if let ExtractorSpec::External { path } = &self.extractor {
            missing(path)?;
        }
        let b = &self.budget;
        let (lower, upper) = match b.bounds.kind {
            BoundsKind::Absolute => (b.bounds.lower, b.bounds.upper),
            BoundsKind::FractionOfMax => {
                let max = max_flops(&spec, b.height, b.width)?;
                (b.bounds.lower * max, b.bounds.upper * max)
            }
        };
        let budget = BudgetConfig {
            lambda0: b.lambda0,
            omega1: b.omega1,
            omega2: b.omega2,
            bounds: FlopsBounds { lower, upper },
            height: b.height,
            width: b.width,
            lambda_span: b.lambda_span,
            check_interval: b.check_interval,
        };
        budget.validate()?;
        Ok(LoadedConfig {
            config: self,
            hash,
            spec,
            budget,
        })
    }

    /// Desk-scale preset for a toy task.
    pub fn toy(kind: ToyKind, seed: u64) -> Self {
        match kind {
            ToyKind::TranslationToy => RunConfig {
                version: CONFIG_VERSION,
                seed,
                task: Task::Translation,
                search_space: SpaceLayout::Translation {
                    max_width: 32,
                    body_layers: 3,
                },
                precision: Precision::F32,
                budget: BudgetSection {
                    lambda0: 1e-10,
                    omega1: 0.25,
                    omega2: 0.75,
                    height: TOY_SIZE,
                    width: TOY_SIZE,
                    bounds: BoundsSpec {
                        kind: BoundsKind::FractionOfMax,
                        lower: 0.4,
                        upper: 0.6,
                    },
                    lambda_span: 1024.0,
                    check_interval: 1,
                },
                distill: DistillConfig::standard(),
                extractor: ExtractorSpec::default(),
                train: TrainSettings {
                    pretrain_epochs: 5,
                    search_epochs: 30,
                    retrain_epochs: 40,
                    batch_size: 16,
                    weight_optimizer: OptimizerConfig::Adam { lr: 2e-3 },
                    weight_schedule: LrSchedule::Linear { hold_epochs: 0 },
                    arch_lr: 3e-2,
                    temperature: TemperatureSchedule::default(),
                },
                data: DataSpec::Toy {
                    samples: TOY_SAMPLES,
                    size: TOY_SIZE,
                },
                teacher: None,
                eval: EvalSection::default(),
            },
            ToyKind::SrToy => RunConfig {
                version: CONFIG_VERSION,
                seed,
                task: Task::SuperResolution,
                search_space: SpaceLayout::SuperResolution {
                    max_width: 24,
                    groups: 2,
                    layers_per_group: 2,
                },
                precision: Precision::F32,
                budget: BudgetSection {
                    lambda0: 1e-10,
                    omega1: 2.0 / 7.0,
                    omega2: 5.0 / 7.0,
                    height: TOY_SIZE,
                    width: TOY_SIZE,
                    bounds: BoundsSpec {
                        kind: BoundsKind::FractionOfMax,
                        lower: 0.4,
                        upper: 0.6,
                    },
                    lambda_span: 1024.0,
                    check_interval: 1,
                },
                distill: DistillConfig::standard(),
                extractor: ExtractorSpec::default(),
                train: TrainSettings {
                    pretrain_epochs: 5,
                    search_epochs: 30,
                    retrain_epochs: 40,
                    batch_size: 16,
                    weight_optimizer: OptimizerConfig::Adam { lr: 1e-3 },
                    weight_schedule: LrSchedule::Step {
                        milestones: vec![10, 20, 30],
                        factor: 0.5,
                    },
                    arch_lr: 3e-2,
                    temperature: TemperatureSchedule::default(),
                },
                data: DataSpec::Toy {
                    samples: TOY_SAMPLES,
                    size: TOY_SIZE,
                },
                teacher: None,
                eval: EvalSection::default(),
            },
        }
    }
}

/// FLOPs of the most expensive architecture in the search space.
pub fn max_flops(spec: &SupernetSpec, h: usize, w: usize) -> Result<f64> {
    let mut best: f64 = 0.0;
    for op in OperatorKind::ALL {
        let arch = Architecture::max_of(spec, op);
        best = best.max(budget::derived_flops(spec, &arch, h, w)?.total);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_preset_round_trips_through_toml() {
        let cfg = RunConfig::toy(ToyKind::TranslationToy, 7);
        let text = cfg.to_toml().unwrap();
        assert!(text.starts_with("version = 1"));
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        let loaded = cfg.resolve("h".into()).unwrap();
        assert!(loaded.budget.bounds.lower < loaded.budget.bounds.upper);
    }

    #[test]
    fn unknown_keys_and_missing_seed_fail() {
        let text = RunConfig::toy(ToyKind::SrToy, 1).to_toml().unwrap();
        let typo = text.replacen("seed = 1", "seed = 1\nsede = 2", 1);
        assert!(matches!(RunConfig::from_toml(&typo), Err(Error::Config(_))));
        let no_seed = text.replacen("seed = 1\n", "", 1);
        assert!(RunConfig::from_toml(&no_seed).is_err());
    }

    #[test]
    fn inverted_bounds_fail() {
        let mut cfg = RunConfig::toy(ToyKind::TranslationToy, 7);
        cfg.budget.bounds.lower = 0.7;
        assert!(cfg.resolve("h".into()).is_err());
    }
}
