//! First-order optimizers and learning-rate schedules.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Momentum SGD, `v = mu * v + g; p -= lr * v`.
#[derive(Debug)]
pub struct Sgd {
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn new(vars: Vec<Var>, lr: f64, momentum: f64) -> Self {
        let velocity = vec![None; vars.len()];
        Sgd {
            vars,
            velocity,
            lr,
            momentum,
            weight_decay: 0.0,
        }
    }

    /// Vars without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = g.detach();
            let g = if self.weight_decay > 0.0 {
                (g + (var.as_tensor().detach() * self.weight_decay)?)?
            } else {
                g
            };
            let v = match vel.take() {
                Some(v) if self.momentum > 0.0 => ((v * self.momentum)? + g)?,
                _ => g,
            };
            var.set(&(var.as_tensor().detach() - (&v * self.lr)?)?)?;
            *vel = Some(v);
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug)]
pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub t: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64) -> Result<Self> {
        let m = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Adam {
            vars,
            m,
            v,
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((var, m), v) in self.vars.iter().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = &g.detach();
            *m = ((&*m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            *v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&*m / bc1)?;
            let v_hat = (&*v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * self.lr)?)?)?;
        }
        Ok(())
    }

    /// Moment tensors for checkpoints, named `{prefix}.m.{i}` and `{prefix}.v.{i}`.
    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let ms = self.m.iter().enumerate().map(|(i, t)| (format!("{prefix}.m.{i}"), t.clone()));
        let vs = self.v.iter().enumerate().map(|(i, t)| (format!("{prefix}.v.{i}"), t.clone()));
        ms.chain(vs).collect()
    }

    pub fn load_state(&mut self, prefix: &str, t: usize, get: impl Fn(&str) -> Option<Tensor>) -> Result<()> {
        for i in 0..self.vars.len() {
            for (key, slot) in [(format!("{prefix}.m.{i}"), &mut self.m[i]), (format!("{prefix}.v.{i}"), &mut self.v[i])] {
                let src = get(&key).ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))?;
                if src.dims() != slot.dims() {
                    return Err(Error::Checkpoint(format!("optimizer tensor {key} has the wrong shape")));
                }
                *slot = src.to_dtype(slot.dtype())?;
            }
        }
        self.t = t;
        Ok(())
    }
}

/// Either optimizer behind one interface.
#[derive(Debug)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        match self {
            Optimizer::Sgd(o) => o.step(grads),
            Optimizer::Adam(o) => o.step(grads),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.lr = lr,
            Optimizer::Adam(o) => o.lr = lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64 },
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr } => lr,
        }
    }

    pub fn build(&self, vars: Vec<Var>) -> Result<Optimizer> {
        Ok(match *self {
            OptimizerConfig::Sgd { lr, momentum } => Optimizer::Sgd(Sgd::new(vars, lr, momentum)),
            OptimizerConfig::Adam { lr } => Optimizer::Adam(Adam::new(vars, lr)?),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if let OptimizerConfig::Sgd { momentum, .. } = *self {
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Constant for `hold_epochs`, then linear decay reaching zero after the last epoch.
    Linear { hold_epochs: usize },
    /// Multiply by `factor` at each milestone epoch.
    Step { milestones: Vec<usize>, factor: f64 },
}

impl LrSchedule {
    /// Learning rate for zero-based `epoch` out of `total` epochs.
    pub fn at(&self, base: f64, epoch: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Linear { hold_epochs } => {
                if epoch < *hold_epochs || total <= *hold_epochs {
                    base
                } else {
                    let span = (total - hold_epochs) as f64;
                    base * (1.0 - (epoch - hold_epochs) as f64 / span)
                }
            }
            LrSchedule::Step { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                base * factor.powi(passed as i32)
            }
        }
    }
}
