use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::nn::softmax_f64;

/// One Gumbel-Softmax draw over a layer's width candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct WidthSample {
    /// The hard selection used in the forward pass; equals `argmax(soft_probs)`.
    pub index: usize,
    /// Relaxed probabilities carrying the gradient.
    pub soft_probs: Vec<f64>,
    /// The Gumbel noise that produced this sample, so the relaxed
    /// probabilities can be rebuilt on the autodiff graph.
    pub noise: Vec<f64>,
}

/// Standard Gumbel noise `-ln(-ln u)`, `u ~ Uniform(0, 1)` (open interval).
pub fn gumbel_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mut u: f64 = rng.random();
            while u <= 0.0 {
                u = rng.random();
            }
            -(-u.ln()).ln()
        })
        .collect()
}

pub fn sample_width(gamma: &[f64], temperature: f64, rng: &mut impl Rng) -> Result<WidthSample> {
    if gamma.is_empty() {
        return Err(invalid("empty width logits"));
    }
    if gamma.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("width logits".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(invalid(format!("temperature must be positive, got {temperature}")));
    }
    let noise = gumbel_noise(gamma.len(), rng);
    let perturbed: Vec<f64> = gamma
        .iter()
        .zip(&noise)
        .map(|(g, n)| (g + n) / temperature)
        .collect();
    let soft_probs = softmax_f64(&perturbed);
    let index = argmax(&soft_probs);
    Ok(WidthSample {
        index,
        soft_probs,
        noise,
    })
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Temperature schedule for the relaxed width sampling. Off (constant) by default.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemperatureSchedule {
    Constant { value: f64 },
    /// `start * decay^epoch`, floored at `min`.
    Exponential { start: f64, decay: f64, min: f64 },
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule::Constant { value: 1.0 }
    }
}

impl TemperatureSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        match *self {
            TemperatureSchedule::Constant { value } => value,
            TemperatureSchedule::Exponential { start, decay, min } => {
                (start * decay.powi(epoch as i32)).max(min)
            }
        }
    }
}
