//! Line-oriented metrics log, one line per epoch.

use std::fmt::Write as _;

use crate::engine::Phase;
use crate::error::{Error, Result};

pub const METRICS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub loss: f64,
    pub content: f64,
    pub perceptual: f64,
    pub tv: f64,
    pub lambda: f64,
    pub derived_gflops: f64,
}

impl EpochRecord {
    /// `v1 phase=search epoch=3 loss=... ...`; floats use round-trip formatting.
    pub fn to_line(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "v{METRICS_VERSION} phase={} epoch={} loss={:e} content={:e} perceptual={:e} tv={:e} lambda={:e} derived_gflops={:e}",
            self.phase, self.epoch, self.loss, self.content, self.perceptual, self.tv, self.lambda, self.derived_gflops
        );
        s
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let mut parts = line.split_whitespace();
        let version = parts.next().unwrap_or_default();
        if version != format!("v{METRICS_VERSION}") {
            return Err(Error::Schema(format!("unsupported metrics line version `{version}`")));
        }
        let mut rec = EpochRecord {
            phase: Phase::Pretrain,
            epoch: 0,
            loss: 0.0,
            content: 0.0,
            perceptual: 0.0,
            tv: 0.0,
            lambda: 0.0,
            derived_gflops: 0.0,
        };
        for kv in parts {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Schema(format!("malformed metrics field `{kv}`")))?;
            let num = || v.parse::<f64>().map_err(|_| Error::Schema(format!("bad number in `{kv}`")));
            match k {
                "phase" => rec.phase = Phase::parse(v)?,
                "epoch" => rec.epoch = v.parse().map_err(|_| Error::Schema(format!("bad epoch `{v}`")))?,
                "loss" => rec.loss = num()?,
                "content" => rec.content = num()?,
                "perceptual" => rec.perceptual = num()?,
                "tv" => rec.tv = num()?,
                "lambda" => rec.lambda = num()?,
                "derived_gflops" => rec.derived_gflops = num()?,
                _ => return Err(Error::Schema(format!("unknown metrics field `{k}`"))),
            }
        }
        Ok(rec)
    }
}

pub fn format_log(records: &[EpochRecord]) -> String {
    records.iter().map(|r| r.to_line() + "\n").collect()
}
