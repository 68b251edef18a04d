//! Command-line front end. Errors are reported as one machine-parseable line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::budget;
use crate::distill::distance;
use crate::engine::{Phase, SearchState};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{write_atomic, Checkpoint, CheckpointMeta};
use crate::harness::config::{hash_bytes, RunConfig, LoadedConfig};
use crate::harness::pipeline::{self, DirLock};
use crate::harness::psnr::psnr_signed_unit;
use crate::harness::schema::{export_architecture, import_architecture_file, Validation};
use crate::harness::toy::{self, ToyKind};
use crate::nn;
use crate::quantize::{quantize_model, simulate_quantized_forward, QuantBits};

#[derive(Debug, Parser)]
#[command(name = "agd", version, about = "Search compact generators under a FLOPs budget by distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for checkpoints, exports and logs.
    #[arg(long, default_value = "agd-out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sandwich-rule pretraining of the supernet.
    Pretrain(Common),
    /// Alternating weight and architecture search.
    Search(Common),
    /// Export the argmax architecture and its FLOPs report.
    Derive(Common),
    /// Train the derived architecture from scratch.
    Train {
        #[command(flatten)]
        common: Common,
        /// Architecture schema; defaults to the derived one in the output directory.
        #[arg(long)]
        arch: Option<PathBuf>,
    },
    /// PSNR and distillation distance of the student on held-out inputs.
    Eval(Common),
    /// FLOPs report for an architecture schema.
    Flops {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Quantize the student weights.
    Quantize {
        #[command(flatten)]
        common: Common,
        /// Bit width (1-8) or `float`.
        #[arg(long, default_value = "8")]
        bits: String,
    },
    /// Write a toy task: config, teacher and dataset.
    Toy {
        /// `translation_toy` or `sr_toy`.
        #[arg(long, default_value = "translation_toy")]
        kind: String,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "agd-toy")]
        out: PathBuf,
        /// Accepted for uniformity; the toy preset defines its own configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// All phases in sequence.
    Run(Common),
}

/// Formats an error as `error: kind=<kind> msg="<message>"`.
pub fn error_line(e: &Error) -> String {
    let mut msg = e.to_string();
    let mut src = std::error::Error::source(e);
    while let Some(s) = src {
        let s_text = s.to_string();
        if !msg.contains(&s_text) {
            msg.push_str(": ");
            msg.push_str(&s_text);
        }
        src = s.source();
    }
    format!("error: kind={} msg={:?}", e.kind(), msg)
}

fn load_config(common: &Common) -> Result<LoadedConfig> {
    let bytes = std::fs::read(&common.config).map_err(|e| Error::io(&common.config, e))?;
    let mut loaded = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        if seed != loaded.config.seed {
            loaded.config.seed = seed;
            let mut tagged = bytes;
            tagged.extend_from_slice(format!("\nseed-override = {seed}\n").as_bytes());
            loaded.hash = hash_bytes(&tagged);
        }
    }
    Ok(loaded)
}

fn prepared_state(loaded: &LoadedConfig) -> Result<(pipeline::Prepared, SearchState)> {
    let prepared = pipeline::prepare(loaded)?;
    let state = pipeline::new_state(loaded, &prepared)?;
    Ok((prepared, state))
}

fn restore(state: &mut SearchState, dir: &Path, file: &str, hash: &str, phase: Phase) -> Result<()> {
    let ck = Checkpoint::load(&dir.join(file))?;
    pipeline::restore_state(state, &ck, hash, phase)
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(c) => {
            let _lock = DirLock::acquire(&c.out)?;
            let loaded = load_config(&c)?;
            let (prepared, mut state) = prepared_state(&loaded)?;
            let records = pipeline::run_pretrain(&mut state, &prepared.data)?;
            pipeline::state_checkpoint(&state, &loaded.hash).save(&c.out.join(pipeline::PRETRAIN_CKPT))?;
            pipeline::append_metrics(&c.out, &records)?;
        }
        Command::Search(c) => {
            let _lock = DirLock::acquire(&c.out)?;
            let loaded = load_config(&c)?;
            let (prepared, mut state) = prepared_state(&loaded)?;
            restore(&mut state, &c.out, pipeline::PRETRAIN_CKPT, &loaded.hash, Phase::Pretrain)?;
            let records = pipeline::run_search(&mut state, &prepared.data)?;
            pipeline::state_checkpoint(&state, &loaded.hash).save(&c.out.join(pipeline::SEARCH_CKPT))?;
            pipeline::append_metrics(&c.out, &records)?;
        }
        Command::Derive(c) => {
            let _lock = DirLock::acquire(&c.out)?;
            let loaded = load_config(&c)?;
            let (_, mut state) = prepared_state(&loaded)?;
            if c.out.join(pipeline::SEARCH_CKPT).exists() {
                restore(&mut state, &c.out, pipeline::SEARCH_CKPT, &loaded.hash, Phase::Search)?;
            } else {
                log::warn!("no search checkpoint in {}; deriving from the initial state", c.out.display());
            }
            let (arch, report) = pipeline::run_derive(&state, &loaded.hash)?;
            pipeline::write_arch(&c.out, &loaded.spec, &arch, &report)?;
            print!("{}", report.to_text());
        }
        Command::Train { common: c, arch } => {
            let _lock = DirLock::acquire(&c.out)?;
            let loaded = load_config(&c)?;
            let arch_path = arch.unwrap_or_else(|| c.out.join(pipeline::ARCH_FILE));
            let (spec, arch) = import_architecture_file(&arch_path)?;
            if spec != loaded.spec {
                return Err(Error::Schema("architecture search space differs from the config".into()));
            }
            let prepared = pipeline::prepare(&loaded)?;
            let student = pipeline::run_train(&loaded, &prepared, &arch)?;
            if arch_path != c.out.join(pipeline::ARCH_FILE) {
                let text = export_architecture(&arch, spec.layout, Validation::Candidates)?;
                write_atomic(&c.out.join(pipeline::ARCH_FILE), text.as_bytes())?;
            }
            pipeline::student_checkpoint(&student.net, &loaded.hash, student.records.len())
                .save(&c.out.join(pipeline::STUDENT_CKPT))?;
            pipeline::append_metrics(&c.out, &student.records)?;
        }
        Command::Eval(c) => {
            let loaded = load_config(&c)?;
            let dtype = loaded.config.precision.dtype();
            let (net, plan) = pipeline::load_student(
                &c.out.join(pipeline::ARCH_FILE),
                &c.out.join(pipeline::STUDENT_CKPT),
                dtype,
            )?;
            let prepared = pipeline::prepare(&loaded)?;
            let (h, w) = prepared.input_size;
            if h != w {
                return Err(Error::Shape("held-out evaluation needs square inputs".into()));
            }
            let held = toy::held_out(&prepared.teacher, loaded.config.eval.samples, h, loaded.config.seed)?;
            let out = net.forward(&held.inputs, &plan)?;
            let d = distance(&out, &held.targets, &prepared.extractor, &loaded.config.distill)?;
            let psnr = psnr_signed_unit(&out, &held.targets)?;
            println!(
                "{{\"version\":1,\"samples\":{},\"psnr_db\":{},\"distance\":{}}}",
                held.len(),
                psnr,
                nn::scalar(&d.total)?
            );
        }
        Command::Flops { arch, height, width, .. } => {
            let (spec, arch) = import_architecture_file(&arch)?;
            let report = budget::derived_flops(&spec, &arch, height, width)?;
            print!("{}", report.to_text());
        }
        Command::Quantize { common: c, bits } => {
            let _lock = DirLock::acquire(&c.out)?;
            let loaded = load_config(&c)?;
            let bits = QuantBits::parse(&bits)?;
            let dtype = loaded.config.precision.dtype();
            let (net, plan) = pipeline::load_student(
                &c.out.join(pipeline::ARCH_FILE),
                &c.out.join(pipeline::STUDENT_CKPT),
                dtype,
            )?;
            let q = quantize_model(&net, bits)?;
            let mut tensors = BTreeMap::new();
            let mut extra = BTreeMap::new();
            extra.insert("quant.bits".to_string(), format!("{bits:?}"));
            for (name, qt) in &q.tensors {
                tensors.insert(
                    name.clone(),
                    candle_core::Tensor::from_vec(qt.q.clone(), qt.shape.clone(), &candle_core::Device::Cpu)?,
                );
                extra.insert(format!("quant.{name}.scale"), format!("{:e}", qt.scale));
                extra.insert(format!("quant.{name}.zero_point"), qt.zero_point.to_string());
            }
            Checkpoint {
                meta: CheckpointMeta {
                    phase: Phase::Done,
                    epoch: 0,
                    config_hash: loaded.hash.clone(),
                    lambda: 0.0,
                    extra,
                },
                tensors,
            }
            .save(&c.out.join("quantized.safetensors"))?;
            let prepared = pipeline::prepare(&loaded)?;
            let n = prepared.data.len().min(loaded.config.eval.samples);
            let x = prepared.data.inputs.narrow(0, 0, n)?;
            let float = net.forward(&x, &plan)?;
            let quant = simulate_quantized_forward(&net, &plan, &x, bits, false)?;
            let err = nn::scalar(&(&quant - &float)?.sqr()?.sum_all()?)?.sqrt()
                / nn::scalar(&float.sqr()?.sum_all()?)?.sqrt().max(f64::MIN_POSITIVE);
            println!(
                "{{\"version\":1,\"params\":{},\"float_bytes\":{},\"quantized_bytes\":{},\"ratio\":{},\"relative_l2\":{}}}",
                q.report.params,
                q.report.float_bytes,
                q.report.quantized_bytes,
                q.report.ratio(),
                err
            );
        }
        Command::Toy { kind, seed, out, .. } => {
            let kind = ToyKind::parse(&kind)?;
            let _lock = DirLock::acquire(&out)?;
            let task = toy::make_toy_task(kind, seed)?;
            let cfg = RunConfig::toy(kind, seed);
            write_atomic(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
            let teacher_json = export_architecture(&task.teacher_arch, task.spec.layout, Validation::Candidates)?;
            write_atomic(&out.join("teacher.json"), teacher_json.as_bytes())?;
            let meta = CheckpointMeta {
                phase: Phase::Done,
                epoch: 0,
                config_hash: hash_bytes(cfg.to_toml()?.as_bytes()),
                lambda: 0.0,
                extra: BTreeMap::new(),
            };
            Checkpoint {
                meta: meta.clone(),
                tensors: task.teacher.net().named_tensors().into_iter().collect(),
            }
            .save(&out.join("teacher.safetensors"))?;
            let mut data = BTreeMap::new();
            data.insert("inputs".to_string(), task.data.inputs.clone());
            data.insert("targets".to_string(), task.data.targets.clone());
            Checkpoint { meta, tensors: data }.save(&out.join("data.safetensors"))?;
        }
        Command::Run(c) => {
            let _lock = DirLock::acquire(&c.out)?;
            let loaded = load_config(&c)?;
            let output = pipeline::run(&loaded, Some(&c.out))?;
            print!("{}", output.report.to_text());
        }
    }
    Ok(())
}
