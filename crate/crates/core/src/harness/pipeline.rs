//! Phase drivers shared by the command line and [`run`]: data and teacher
//! loading, checkpoints at phase boundaries and the metrics log.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};

use crate::arch::{Architecture, Provenance};
use crate::budget::{self, FlopsReport};
use crate::distill::{FeatureExtractor, TeacherModel};
use crate::engine::{self, split_dataset, Dataset, Phase, SearchState};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{write_atomic, Checkpoint, CheckpointMeta};
use crate::harness::config::{DataSpec, LoadedConfig, TeacherSpec};
use crate::harness::metrics::{format_log, EpochRecord};
use crate::harness::schema::{export_architecture, import_architecture_file, Validation};
use crate::harness::toy;
use crate::nn;
use crate::supernet::{ForwardPlan, Supernet};

pub const PRETRAIN_CKPT: &str = "pretrain.safetensors";
pub const SEARCH_CKPT: &str = "search.safetensors";
pub const ARCH_FILE: &str = "arch.json";
pub const FLOPS_FILE: &str = "flops.txt";
pub const STUDENT_CKPT: &str = "student.safetensors";
pub const METRICS_FILE: &str = "metrics.log";
pub const LOCK_FILE: &str = ".agd.lock";

/// Exclusive hold on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Teacher, labelled training data and perceptual extractor of a run.
pub struct Prepared {
    pub teacher: TeacherModel,
    pub data: Dataset,
    pub extractor: FeatureExtractor,
    pub input_size: (usize, usize),
}

pub fn load_teacher(spec: &TeacherSpec, dtype: DType) -> Result<TeacherModel> {
    let (tspec, tarch) = import_architecture_file(&spec.arch)?;
    let concrete = tarch.concretize(&tspec)?;
    let net = Supernet::new(&concrete, dtype, &mut engine::stream_rng(0, 0))?;
    let ck = Checkpoint::load(&spec.weights)?;
    net.load_named(|k| ck.get(k))?;
    Ok(TeacherModel::new(net, ForwardPlan::concrete(&concrete)?))
}

fn load_image_folder(dir: &Path, size: usize, dtype: DType) -> Result<Tensor> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no PNG or JPEG images in {}", dir.display())));
    }
    let mut data = Vec::with_capacity(files.len() * 3 * size * size);
    for f in &files {
        let img = image::open(f)
            .map_err(|e| Error::Config(format!("{}: {e}", f.display())))?
            .resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle)
            .to_rgb8();
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    data.push(img.get_pixel(x as u32, y as u32)[c] as f64 / 127.5 - 1.0);
                }
            }
        }
    }
    nn::tensor_from_f64(data, &[files.len(), 3, size, size], dtype, &Device::Cpu)
}

pub fn prepare(loaded: &LoadedConfig) -> Result<Prepared> {
    let cfg = &loaded.config;
    let dtype = cfg.precision.dtype();
    let extractor = FeatureExtractor::from_spec(&cfg.extractor, loaded.spec.output_channels, dtype)?;
    let (teacher, data) = match &cfg.data {
        DataSpec::Toy { samples, size } => {
            let task = toy::make_toy_task_with(&loaded.spec, *samples, *size, cfg.seed, dtype)?;
            (task.teacher, task.data)
        }
        DataSpec::Tensors { path } => {
            let teacher = load_teacher(cfg.teacher.as_ref().expect("validated"), dtype)?;
            let ck = Checkpoint::load(path)?;
            let inputs = ck
                .get("inputs")
                .ok_or_else(|| Error::Config(format!("{} has no `inputs` tensor", path.display())))?
                .to_dtype(dtype)?;
            let targets = match ck.get("targets") {
                Some(t) => t.to_dtype(dtype)?,
                None => toy::precompute_targets(&teacher, &inputs)?,
            };
            (teacher, Dataset::new(inputs, targets)?)
        }
        DataSpec::ImageFolder { path, size } => {
            let teacher = load_teacher(cfg.teacher.as_ref().expect("validated"), dtype)?;
            let inputs = load_image_folder(path, *size, dtype)?;
            let targets = toy::precompute_targets(&teacher, &inputs)?;
            (teacher, Dataset::new(inputs, targets)?)
        }
    };
    let (_, _, h, w) = data.inputs.dims4()?;
    if data.len() < 2 {
        return Err(Error::Config("the dataset needs at least two samples".into()));
    }
    let expected = loaded.spec.output_size(h, w)?;
    let (_, _, th, tw) = data.targets.dims4()?;
    if (th, tw) != expected {
        return Err(Error::Shape(format!(
            "teacher outputs are {th}x{tw} but the search space produces {}x{}",
            expected.0, expected.1
        )));
    }
    Ok(Prepared {
        teacher,
        data,
        extractor,
        input_size: (h, w),
    })
}

pub fn new_state(loaded: &LoadedConfig, prepared: &Prepared) -> Result<SearchState> {
    let cfg = &loaded.config;
    SearchState::new(
        &loaded.spec,
        cfg.train.clone(),
        loaded.budget.clone(),
        cfg.distill.clone(),
        prepared.extractor.clone(),
        cfg.seed,
        cfg.precision.dtype(),
    )
}

pub fn state_checkpoint(state: &SearchState, hash: &str) -> Checkpoint {
    let tensors: BTreeMap<String, Tensor> = state
        .net
        .named_tensors()
        .into_iter()
        .chain(state.arch.named_tensors())
        .collect();
    Checkpoint {
        meta: CheckpointMeta {
            phase: state.phase,
            epoch: state.epoch,
            config_hash: hash.to_string(),
            lambda: state.lambda,
            extra: BTreeMap::new(),
        },
        tensors,
    }
}

pub fn restore_state(state: &mut SearchState, ck: &Checkpoint, hash: &str, expected: Phase) -> Result<()> {
    if ck.meta.config_hash != hash {
        return Err(Error::Checkpoint(format!(
            "checkpoint was written by config {} but the current config is {hash}",
            ck.meta.config_hash
        )));
    }
    if ck.meta.phase != expected {
        return Err(Error::WrongPhase {
            expected,
            actual: ck.meta.phase,
        });
    }
    state.net.load_named(|k| ck.get(k))?;
    state.arch.load_named(|k| ck.get(k))?;
    state.lambda = ck.meta.lambda;
    Ok(())
}

fn wrap(phase: Phase, epoch: usize) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        e @ Error::PhaseFailed { .. } => e,
        e => Error::PhaseFailed {
            phase,
            epoch,
            source: Box::new(e),
        },
    }
}

pub fn run_pretrain(state: &mut SearchState, data: &Dataset) -> Result<Vec<EpochRecord>> {
    state.begin_phase(Phase::Pretrain)?;
    let split = split_dataset(data.len(), state.seed);
    let mut records = Vec::new();
    for epoch in 0..state.settings.pretrain_epochs {
        let r = state.pretrain_epoch(data, &split).map_err(wrap(Phase::Pretrain, epoch + 1))?;
        log::info!("{}", r.to_line());
        records.push(r);
    }
    Ok(records)
}

pub fn run_search(state: &mut SearchState, data: &Dataset) -> Result<Vec<EpochRecord>> {
    state.begin_phase(Phase::Search)?;
    let split = split_dataset(data.len(), state.seed);
    let mut records = Vec::new();
    for epoch in 0..state.settings.search_epochs {
        let r = state.search_epoch(data, &split).map_err(wrap(Phase::Search, epoch + 1))?;
        log::info!("{}", r.to_line());
        records.push(r);
    }
    Ok(records)
}

/// Argmax architecture with provenance and its FLOPs at the budget resolution.
pub fn run_derive(state: &SearchState, hash: &str) -> Result<(Architecture, FlopsReport)> {
    let mut arch = state.derive()?;
    arch.resolution = Some((state.budget.height, state.budget.width));
    arch.provenance = Some(Provenance {
        config_hash: hash.to_string(),
        seed: state.seed,
        epoch: state.epoch,
    });
    let report = budget::derived_flops(state.spec(), &arch, state.budget.height, state.budget.width)?;
    Ok((arch, report))
}

pub struct TrainedStudent {
    pub net: Supernet,
    pub plan: ForwardPlan,
    pub records: Vec<EpochRecord>,
}

pub fn run_train(loaded: &LoadedConfig, prepared: &Prepared, arch: &Architecture) -> Result<TrainedStudent> {
    let cfg = &loaded.config;
    let (net, plan, records) = engine::train_from_scratch(
        &loaded.spec,
        arch,
        &prepared.data,
        &cfg.train,
        &cfg.distill,
        &prepared.extractor,
        cfg.seed,
        cfg.precision.dtype(),
    )?;
    Ok(TrainedStudent { net, plan, records })
}

pub fn student_checkpoint(student: &Supernet, hash: &str, epoch: usize) -> Checkpoint {
    Checkpoint {
        meta: CheckpointMeta {
            phase: Phase::Done,
            epoch,
            config_hash: hash.to_string(),
            lambda: 0.0,
            extra: BTreeMap::new(),
        },
        tensors: student.named_tensors().into_iter().collect(),
    }
}

/// Appends records to the metrics log of `dir`.
pub fn append_metrics(dir: &Path, records: &[EpochRecord]) -> Result<()> {
    let path = dir.join(METRICS_FILE);
    let mut text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(&path, e)),
    };
    text.push_str(&format_log(records));
    write_atomic(&path, text.as_bytes())
}

pub fn write_arch(dir: &Path, spec: &crate::search_space::SupernetSpec, arch: &Architecture, report: &FlopsReport) -> Result<()> {
    let text = export_architecture(arch, spec.layout, Validation::Candidates)?;
    write_atomic(&dir.join(ARCH_FILE), text.as_bytes())?;
    write_atomic(&dir.join(FLOPS_FILE), report.to_text().as_bytes())
}

/// Everything a full run produces.
pub struct RunOutput {
    pub arch: Architecture,
    pub report: FlopsReport,
    pub student: TrainedStudent,
    pub records: Vec<EpochRecord>,
    pub lambda_history: Vec<engine::LambdaCheck>,
    pub teacher: TeacherModel,
}

/// Pretrain, search, derive and retrain. With `out`, checkpoints, the
/// architecture, the FLOPs report and the metrics log are written there.
pub fn run(loaded: &LoadedConfig, out: Option<&Path>) -> Result<RunOutput> {
    let prepared = prepare(loaded)?;
    let mut state = new_state(loaded, &prepared)?;
    let mut records = run_pretrain(&mut state, &prepared.data)?;
    if let Some(dir) = out {
        state_checkpoint(&state, &loaded.hash).save(&dir.join(PRETRAIN_CKPT))?;
        append_metrics(dir, &records)?;
    }
    let search = run_search(&mut state, &prepared.data)?;
    if let Some(dir) = out {
        state_checkpoint(&state, &loaded.hash).save(&dir.join(SEARCH_CKPT))?;
        append_metrics(dir, &search)?;
    }
    records.extend(search);
    let (arch, report) = run_derive(&state, &loaded.hash)?;
    if let Some(dir) = out {
        write_arch(dir, &loaded.spec, &arch, &report)?;
    }
    let student = run_train(loaded, &prepared, &arch)?;
    if let Some(dir) = out {
        student_checkpoint(&student.net, &loaded.hash, student.records.len()).save(&dir.join(STUDENT_CKPT))?;
        append_metrics(dir, &student.records)?;
    }
    records.extend(student.records.iter().cloned());
    Ok(RunOutput {
        arch,
        report,
        student,
        records,
        lambda_history: state.lambda_history.clone(),
        teacher: prepared.teacher,
    })
}

/// Loads a trained student from its architecture schema and checkpoint.
pub fn load_student(arch_path: &Path, weights: &Path, dtype: DType) -> Result<(Supernet, ForwardPlan)> {
    let (spec, arch) = import_architecture_file(arch_path)?;
    let concrete = arch.concretize(&spec)?;
    let net = Supernet::new(&concrete, dtype, &mut engine::stream_rng(0, 0))?;
    let ck = Checkpoint::load(weights)?;
    net.load_named(|k| ck.get(k))?;
    Ok((net, ForwardPlan::concrete(&concrete)?))
}
