//! The search procedure: sandwich-rule pretraining, alternating weight and
//! architecture updates under the budget, derivation and retraining.

use std::fmt;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{Architecture, LayerChoice};
use crate::budget::{self, BudgetConfig};
use crate::distill::{distance, DistillConfig, FeatureExtractor};
use crate::error::{invalid, Error, Result};
use crate::harness::metrics::EpochRecord;
use crate::nn;
use crate::optim::{Adam, LrSchedule, Optimizer, OptimizerConfig};
use crate::search_space::{LayerOp, OpMode, OperatorKind, SupernetSpec};
use crate::supernet::{ArchParams, ForwardPlan, Supernet, TemperatureSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Search,
    TrainFromScratch,
    Done,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Search => "search",
            Phase::TrainFromScratch => "train_from_scratch",
            Phase::Done => "done",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "search" => Ok(Phase::Search),
            "train_from_scratch" => Ok(Phase::TrainFromScratch),
            "done" => Ok(Phase::Done),
            _ => Err(invalid(format!("unknown phase `{s}`"))),
        }
    }

    fn stream(self) -> u64 {
        match self {
            Phase::Pretrain => 2,
            Phase::Search => 3,
            Phase::TrainFromScratch => 4,
            Phase::Done => 5,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const INIT_STREAM: u64 = 0;
const SPLIT_STREAM: u64 = 1;
const RETRAIN_INIT_STREAM: u64 = 6;

/// Seeded generator for one named stream of a run.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Inputs and precomputed teacher outputs, stacked along dim 0.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Tensor) -> Result<Self> {
        if inputs.dims4()?.0 != targets.dims4()?.0 {
            return Err(Error::Shape("inputs and targets differ in count".into()));
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let idx = Tensor::from_vec(
            indices.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            indices.len(),
            &Device::Cpu,
        )?;
        Ok((self.inputs.index_select(&idx, 0)?, self.targets.index_select(&idx, 0)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub chi1: Vec<usize>,
    pub chi2: Vec<usize>,
}

/// Seeded shuffle of `0..n` cut into halves; `chi1` takes the extra element.
pub fn split_dataset(n: usize, seed: u64) -> DatasetSplit {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, SPLIT_STREAM));
    let chi2 = idx.split_off(n.div_ceil(2));
    DatasetSplit { chi1: idx, chi2 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub pretrain_epochs: usize,
    pub search_epochs: usize,
    pub retrain_epochs: usize,
    pub batch_size: usize,
    pub weight_optimizer: OptimizerConfig,
    #[serde(default)]
    pub weight_schedule: LrSchedule,
    #[serde(default = "default_arch_lr")]
    pub arch_lr: f64,
    #[serde(default)]
    pub temperature: TemperatureSchedule,
}

fn default_arch_lr() -> f64 {
    3e-4
}

impl TrainSettings {
    pub fn translation() -> Self {
        TrainSettings {
            pretrain_epochs: 50,
            search_epochs: 50,
            retrain_epochs: 200,
            batch_size: 2,
            weight_optimizer: OptimizerConfig::Sgd { lr: 0.1, momentum: 0.9 },
            weight_schedule: LrSchedule::Linear { hold_epochs: 0 },
            arch_lr: 3e-4,
            temperature: TemperatureSchedule::default(),
        }
    }

    pub fn super_resolution() -> Self {
        TrainSettings {
            pretrain_epochs: 100,
            search_epochs: 100,
            retrain_epochs: 100,
            batch_size: 16,
            weight_optimizer: OptimizerConfig::Adam { lr: 1e-4 },
            weight_schedule: LrSchedule::Step {
                milestones: vec![25, 50, 75],
                factor: 0.5,
            },
            arch_lr: 3e-4,
            temperature: TemperatureSchedule::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.arch_lr > 0.0 && self.arch_lr.is_finite()) {
            return Err(Error::Config("arch_lr must be positive".into()));
        }
        self.weight_optimizer.validate()
    }

    pub fn epochs(&self, phase: Phase) -> usize {
        match phase {
            Phase::Pretrain => self.pretrain_epochs,
            Phase::Search => self.search_epochs,
            Phase::TrainFromScratch => self.retrain_epochs,
            Phase::Done => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateKind {
    Weights,
    Arch,
}

/// Sample indices that fed one update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchRecord {
    pub phase: Phase,
    pub update: UpdateKind,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaCheck {
    pub epoch: usize,
    pub derived_flops: f64,
    pub lambda_before: f64,
    pub lambda_after: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLoss {
    pub total: f64,
    pub content: f64,
    pub perceptual: f64,
    pub tv: f64,
}

impl StepLoss {
    fn add(&mut self, o: &StepLoss) {
        self.total += o.total;
        self.content += o.content;
        self.perceptual += o.perceptual;
        self.tv += o.tv;
    }

    fn scaled(&self, k: f64) -> StepLoss {
        StepLoss {
            total: self.total * k,
            content: self.content * k,
            perceptual: self.perceptual * k,
            tv: self.tv * k,
        }
    }
}

/// Everything the pretrain and search phases mutate.
pub struct SearchState {
    pub phase: Phase,
    pub net: Supernet,
    pub arch: ArchParams,
    pub lambda: f64,
    /// Epochs completed within the current phase.
    pub epoch: usize,
    pub settings: TrainSettings,
    pub budget: BudgetConfig,
    pub distill: DistillConfig,
    pub extractor: FeatureExtractor,
    pub seed: u64,
    pub batch_log: Option<Vec<BatchRecord>>,
    pub lambda_history: Vec<LambdaCheck>,
    /// Number of weight-optimizer steps taken so far.
    pub weight_steps: usize,
    w_opt: Optimizer,
    arch_opt: Option<Adam>,
    rng: ChaCha8Rng,
}

impl SearchState {
    pub fn new(
        spec: &SupernetSpec,
        settings: TrainSettings,
        budget: BudgetConfig,
        distill: DistillConfig,
        extractor: FeatureExtractor,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        settings.validate()?;
        budget.validate()?;
        distill.validate()?;
        let net = Supernet::new(spec, dtype, &mut stream_rng(seed, INIT_STREAM))?;
        let arch = ArchParams::uniform(spec, dtype)?;
        let w_opt = settings.weight_optimizer.build(net.vars())?;
        Ok(SearchState {
            phase: Phase::Pretrain,
            lambda: budget.lambda0,
            epoch: 0,
            w_opt,
            arch_opt: None,
            rng: stream_rng(seed, Phase::Pretrain.stream()),
            net,
            arch,
            settings,
            budget,
            distill,
            extractor,
            seed,
            batch_log: None,
            lambda_history: Vec::new(),
            weight_steps: 0,
        })
    }

    pub fn spec(&self) -> &SupernetSpec {
        &self.net.spec
    }

    /// Enters `phase` with a fresh epoch counter, optimizer state and rng stream.
    pub fn begin_phase(&mut self, phase: Phase) -> Result<()> {
        self.phase = phase;
        self.epoch = 0;
        self.rng = stream_rng(self.seed, phase.stream());
        self.w_opt = self.settings.weight_optimizer.build(self.net.vars())?;
        self.arch_opt = if phase == Phase::Search {
            Some(Adam::new(self.arch.vars(), self.settings.arch_lr)?)
        } else {
            None
        };
        Ok(())
    }

    fn require(&self, expected: Phase) -> Result<()> {
        if self.phase != expected {
            return Err(Error::WrongPhase {
                expected,
                actual: self.phase,
            });
        }
        Ok(())
    }

    fn log_batch(&mut self, update: UpdateKind, indices: &[usize]) {
        let phase = self.phase;
        if let Some(log) = self.batch_log.as_mut() {
            log.push(BatchRecord {
                phase,
                update,
                indices: indices.to_vec(),
            });
        }
    }

    fn distance_of(&self, out: &Tensor, target: &Tensor) -> Result<(Tensor, StepLoss)> {
        let d = distance(out, target, &self.extractor, &self.distill)?;
        let (content, perceptual, tv, total) = d.values()?;
        if !total.is_finite() {
            return Err(Error::NonFinite("distillation loss".into()));
        }
        Ok((
            d.total,
            StepLoss {
                total,
                content,
                perceptual,
                tv,
            },
        ))
    }

    fn weight_step(&mut self, out: &Tensor, target: &Tensor) -> Result<StepLoss> {
        let (loss, values) = self.distance_of(out, target)?;
        let grads = loss.backward()?;
        self.w_opt.step(&grads)?;
        self.weight_steps += 1;
        Ok(values)
    }

    /// Width indices of the four sandwich configurations for this batch.
    fn sandwich_configs(&mut self) -> [Vec<usize>; 4] {
        let counts: Vec<usize> = self
            .arch
            .gamma
            .iter()
            .map(|(i, _)| self.net.spec.layers[*i].width_candidates().len())
            .collect();
        let max = counts.iter().map(|n| n - 1).collect();
        let min = vec![0; counts.len()];
        let r1 = counts.iter().map(|&n| self.rng.random_range(0..n)).collect();
        let r2 = counts.iter().map(|&n| self.rng.random_range(0..n)).collect();
        [max, min, r1, r2]
    }

    /// Four sequential weight updates at the largest, smallest and two random
    /// width configurations, operators mixed by the uniform `alpha`.
    pub fn pretrain_step(&mut self, data: &Dataset, indices: &[usize]) -> Result<StepLoss> {
        self.require(Phase::Pretrain)?;
        let (x, t) = data.batch(indices)?;
        let mut mean = StepLoss::default();
        for widths in self.sandwich_configs() {
            let plan = self.arch.fixed_width_plan(self.spec(), &widths)?;
            let out = self.net.forward(&x, &plan)?;
            self.log_batch(UpdateKind::Weights, indices);
            mean.add(&self.weight_step(&out, &t)?);
        }
        Ok(mean.scaled(0.25))
    }

    /// One weight update on `batch1`, then one joint architecture update on
    /// `batch2` against distance plus the decoupled budget term.
    pub fn search_step(&mut self, data: &Dataset, batch1: &[usize], batch2: &[usize]) -> Result<StepLoss> {
        self.require(Phase::Search)?;
        let tau = self.settings.temperature.at(self.epoch);

        let (x1, t1) = data.batch(batch1)?;
        let (plan, _) = self.arch.search_plan(&self.net.spec, tau, &mut self.rng, false)?;
        let out = self.net.forward(&x1, &plan)?;
        self.log_batch(UpdateKind::Weights, batch1);
        let w_loss = self.weight_step(&out, &t1)?;

        let (x2, t2) = data.batch(batch2)?;
        let (plan, _) = self.arch.search_plan(&self.net.spec, tau, &mut self.rng, true)?;
        let out = self.net.forward(&x2, &plan)?;
        let (d, _) = self.distance_of(&out, &t2)?;
        let b = budget::budget_term(&self.net.spec, &self.arch, &self.budget, self.lambda)?;
        let loss = (d + b.to_dtype(self.net.dtype)?)?;
        self.log_batch(UpdateKind::Arch, batch2);
        let grads = loss.backward()?;
        self.arch_opt
            .as_mut()
            .expect("search phase has an architecture optimizer")
            .step(&grads)?;
        self.arch.check_finite()?;
        Ok(w_loss)
    }

    fn set_epoch_lr(&mut self) {
        let total = self.settings.epochs(self.phase);
        let lr = self
            .settings
            .weight_schedule
            .at(self.settings.weight_optimizer.lr(), self.epoch, total);
        self.w_opt.set_lr(lr);
    }

    fn batches(&mut self, indices: &[usize]) -> Vec<Vec<usize>> {
        let mut order = indices.to_vec();
        order.shuffle(&mut self.rng);
        order.chunks(self.settings.batch_size).map(|c| c.to_vec()).collect()
    }

    pub fn pretrain_epoch(&mut self, data: &Dataset, split: &DatasetSplit) -> Result<EpochRecord> {
        self.require(Phase::Pretrain)?;
        self.set_epoch_lr();
        let batches = self.batches(&split.chi1);
        let mut mean = StepLoss::default();
        for b in &batches {
            mean.add(&self.pretrain_step(data, b)?);
        }
        self.epoch += 1;
        let derived = self.derived_flops()?;
        Ok(self.record(mean.scaled(1.0 / batches.len().max(1) as f64), derived))
    }

    /// Pairs `chi1` and `chi2` batches; then revisits lambda on the argmax architecture.
    pub fn search_epoch(&mut self, data: &Dataset, split: &DatasetSplit) -> Result<EpochRecord> {
        self.require(Phase::Search)?;
        self.set_epoch_lr();
        let b1 = self.batches(&split.chi1);
        let b2 = self.batches(&split.chi2);
        let n = b1.len().min(b2.len());
        let mut mean = StepLoss::default();
        for (a, b) in b1.iter().zip(&b2) {
            mean.add(&self.search_step(data, a, b)?);
        }
        self.epoch += 1;
        let derived = self.derived_flops()?;
        if self.epoch % self.budget.check_interval == 0 {
            let before = self.lambda;
            self.lambda = budget::update_lambda(before, derived, &self.budget);
            self.lambda_history.push(LambdaCheck {
                epoch: self.epoch,
                derived_flops: derived,
                lambda_before: before,
                lambda_after: self.lambda,
            });
        }
        Ok(self.record(mean.scaled(1.0 / n.max(1) as f64), derived))
    }

    pub fn derive(&self) -> Result<Architecture> {
        derive(self.spec(), &self.arch)
    }

    /// FLOPs of the current argmax architecture at the budget resolution.
    pub fn derived_flops(&self) -> Result<f64> {
        let arch = self.derive()?;
        Ok(budget::derived_flops(self.spec(), &arch, self.budget.height, self.budget.width)?.total)
    }

    fn record(&self, loss: StepLoss, derived: f64) -> EpochRecord {
        EpochRecord {
            phase: self.phase,
            epoch: self.epoch,
            loss: loss.total,
            content: loss.content,
            perceptual: loss.perceptual,
            tv: loss.tv,
            lambda: self.lambda,
            derived_gflops: derived / 1e9,
        }
    }
}

/// Argmax operator and width per layer. Ties go to the operator with fewer
/// per-pixel FLOPs at the layer's maximal widths and to the narrower width.
pub fn derive(spec: &SupernetSpec, params: &ArchParams) -> Result<Architecture> {
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        let op = match layer.op_mode {
            OpMode::Searchable => {
                let logits = nn::to_f64_vec(
                    params
                        .alpha_for(i)
                        .ok_or_else(|| invalid(format!("no alpha for layer {i}")))?
                        .as_tensor(),
                )?;
                let cost = |k: usize| {
                    budget::per_pixel_flops(
                        LayerOp::Operator(OperatorKind::ALL[k]),
                        spec.max_in_width(i),
                        layer.max_width(),
                    )
                };
                let best = (0..logits.len())
                    .reduce(|b, k| {
                        if logits[k] > logits[b] || (logits[k] == logits[b] && cost(k) < cost(b)) {
                            k
                        } else {
                            b
                        }
                    })
                    .expect("four operators");
                Some(OperatorKind::ALL[best])
            }
            OpMode::Fixed(crate::search_space::FixedOp::Operator(k)) => Some(k),
            OpMode::Fixed(_) => None,
        };
        let width = match params.gamma_for(i) {
            Some(g) => {
                let logits = nn::to_f64_vec(g.as_tensor())?;
                layer.width_candidates()[crate::supernet::gumbel::argmax(&logits)]
            }
            None => layer.max_width(),
        };
        layers.push(LayerChoice {
            block_id: layer.id.clone(),
            op,
            width,
        });
    }
    Ok(Architecture {
        task: spec.task,
        layers,
        resolution: None,
        provenance: None,
    })
}

/// Fresh standalone network for `arch`, trained on the whole dataset.
/// Returns the trained network, its plan and one record per epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_from_scratch(
    spec: &SupernetSpec,
    arch: &Architecture,
    data: &Dataset,
    settings: &TrainSettings,
    distill: &DistillConfig,
    extractor: &FeatureExtractor,
    seed: u64,
    dtype: DType,
) -> Result<(Supernet, ForwardPlan, Vec<EpochRecord>)> {
    arch.validate(spec, crate::arch::WidthCheck::Candidates)?;
    let concrete = arch.concretize(spec)?;
    let net = Supernet::new(&concrete, dtype, &mut stream_rng(seed, RETRAIN_INIT_STREAM))?;
    let plan = ForwardPlan::concrete(&concrete)?;
    let mut opt = settings.weight_optimizer.build(net.vars())?;
    let mut rng = stream_rng(seed, Phase::TrainFromScratch.stream());
    let flops = budget::derived_flops(spec, arch, data.inputs.dims()[2], data.inputs.dims()[3])?.total;
    let all: Vec<usize> = (0..data.len()).collect();
    let total_epochs = settings.retrain_epochs;
    let mut records = Vec::with_capacity(total_epochs);
    for epoch in 0..total_epochs {
        opt.set_lr(settings.weight_schedule.at(settings.weight_optimizer.lr(), epoch, total_epochs));
        let mut order = all.clone();
        order.shuffle(&mut rng);
        let mut mean = StepLoss::default();
        let mut n = 0;
        for b in order.chunks(settings.batch_size) {
            let (x, t) = data.batch(b)?;
            let out = net.forward(&x, &plan)?;
            let d = distance(&out, &t, extractor, distill)?;
            let (content, perceptual, tv, total) = d.values()?;
            if !total.is_finite() {
                return Err(Error::PhaseFailed {
                    phase: Phase::TrainFromScratch,
                    epoch: epoch + 1,
                    source: Box::new(Error::NonFinite("distillation loss".into())),
                });
            }
            opt.step(&d.total.backward()?)?;
            mean.add(&StepLoss {
                total,
                content,
                perceptual,
                tv,
            });
            n += 1;
        }
        let m = mean.scaled(1.0 / n.max(1) as f64);
        records.push(EpochRecord {
            phase: Phase::TrainFromScratch,
            epoch: epoch + 1,
            loss: m.total,
            content: m.content,
            perceptual: m.perceptual,
            tv: m.tv,
            lambda: 0.0,
            derived_gflops: flops / 1e9,
        });
    }
    Ok((net, plan, records))
}

/// Mean of `values` over trailing windows of `window`.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window.max(1));
            let w = &values[lo..=i];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect()
}
