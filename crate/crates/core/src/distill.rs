//! Distillation losses against a frozen teacher.

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::supernet::{ForwardPlan, Supernet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentNorm {
    #[default]
    L1,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Weight of the pixel content term.
    pub beta_content: f64,
    /// Weight of the feature-space perceptual term.
    pub beta_perceptual: f64,
    /// Weight of the total-variation term on the student output.
    pub beta_tv: f64,
    #[serde(default)]
    pub content_norm: ContentNorm,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl DistillConfig {
    pub fn standard() -> Self {
        DistillConfig {
            beta_content: 1e-2,
            beta_perceptual: 1.0,
            beta_tv: 5e-8,
            content_norm: ContentNorm::L1,
        }
    }

    /// Content term only, for PSNR-oriented super-resolution.
    pub fn psnr_oriented() -> Self {
        DistillConfig {
            beta_perceptual: 0.0,
            beta_tv: 0.0,
            ..Self::standard()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta_content", self.beta_content),
            ("beta_perceptual", self.beta_perceptual),
            ("beta_tv", self.beta_tv),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number")));
            }
        }
        Ok(())
    }
}

/// Source of the frozen feature extractor used by the perceptual term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorSpec {
    /// Seeded random conv stages; each halves the resolution.
    RandomConvnet {
        seed: u64,
        #[serde(default = "default_stage_widths")]
        widths: Vec<usize>,
    },
    /// Safetensors file with `stages.{i}.weight` `[c_out, c_in, 3, 3]` and
    /// optional `stages.{i}.bias`.
    External { path: PathBuf },
}

fn default_stage_widths() -> Vec<usize> {
    vec![16, 32]
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec::RandomConvnet {
            seed: 0,
            widths: default_stage_widths(),
        }
    }
}

#[derive(Debug, Clone)]
struct Stage {
    weight: Tensor,
    bias: Option<Tensor>,
}

/// Frozen feature extractor. Its features are ReLU outputs of stride-2
/// 3x3 conv stages, each stage contributing equally.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    stages: Vec<Stage>,
}

impl FeatureExtractor {
    pub fn from_spec(spec: &ExtractorSpec, in_channels: usize, dtype: DType) -> Result<Self> {
        match spec {
            ExtractorSpec::RandomConvnet { seed, widths } => Self::random(*seed, in_channels, widths, dtype),
            ExtractorSpec::External { path } => Self::load(path, dtype),
        }
    }

    pub fn random(seed: u64, in_channels: usize, widths: &[usize], dtype: DType) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config("extractor widths must be non-empty and positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = in_channels;
        let mut stages = Vec::new();
        for &c_out in widths {
            let bound = (6.0 / (9 * c_in) as f64).sqrt();
            let n = c_out * c_in * 9;
            let values: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            stages.push(Stage {
                weight: nn::tensor_from_f64(values, &[c_out, c_in, 3, 3], dtype, &Device::Cpu)?,
                bias: None,
            });
            c_in = c_out;
        }
        Ok(FeatureExtractor { stages })
    }

    pub fn load(path: &std::path::Path, dtype: DType) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!(
                "feature extractor weights not found at {}",
                path.display()
            )));
        }
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
        let mut stages = Vec::new();
        while let Some(w) = tensors.get(&format!("stages.{}.weight", stages.len())) {
            if w.rank() != 4 {
                return Err(Error::Config(format!("extractor stage {} weight must be 4-D", stages.len())));
            }
            let bias = tensors
                .get(&format!("stages.{}.bias", stages.len()))
                .map(|b| b.to_dtype(dtype))
                .transpose()?;
            stages.push(Stage {
                weight: w.to_dtype(dtype)?,
                bias,
            });
        }
        if stages.is_empty() {
            return Err(Error::Config(format!("{} holds no extractor stages", path.display())));
        }
        Ok(FeatureExtractor { stages })
    }

    /// A single identity stage: the perceptual term becomes pixel MSE.
    pub fn identity() -> Self {
        FeatureExtractor { stages: Vec::new() }
    }

    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        if self.stages.is_empty() {
            return Ok(vec![x.clone()]);
        }
        let mut out = Vec::with_capacity(self.stages.len());
        let mut cur = x.clone();
        for s in &self.stages {
            cur = nn::conv2d(&cur, &s.weight, s.bias.as_ref(), 2)?.relu()?;
            out.push(cur.clone());
        }
        Ok(out)
    }
}

pub fn content_loss(student: &Tensor, teacher: &Tensor, norm: ContentNorm) -> Result<Tensor> {
    let d = (student - teacher)?;
    Ok(match norm {
        ContentNorm::L1 => d.abs()?.mean_all()?,
        ContentNorm::L2 => d.sqr()?.mean_all()?,
    })
}

/// Sum over extractor stages of the mean squared feature difference.
pub fn perceptual_loss(student: &Tensor, teacher: &Tensor, extractor: &FeatureExtractor) -> Result<Tensor> {
    let fs = extractor.features(student)?;
    let ft = extractor.features(teacher)?;
    let mut acc: Option<Tensor> = None;
    for (a, b) in fs.iter().zip(&ft) {
        let term = (a - b.detach())?.sqr()?.mean_all()?;
        acc = Some(match acc {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    Ok(acc.expect("at least one stage"))
}

/// `mean(dx^2) + mean(dy^2)` of forward differences.
pub fn tv_loss(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let zero = || Tensor::zeros((), x.dtype(), x.device());
    let dy = if h > 1 {
        (x.narrow(2, 1, h - 1)? - x.narrow(2, 0, h - 1)?)?.sqr()?.mean_all()?
    } else {
        zero()?
    };
    let dx = if w > 1 {
        (x.narrow(3, 1, w - 1)? - x.narrow(3, 0, w - 1)?)?.sqr()?.mean_all()?
    } else {
        zero()?
    };
    Ok((dy + dx)?)
}

#[derive(Debug, Clone)]
pub struct DistanceTerms {
    pub content: Tensor,
    pub perceptual: Tensor,
    pub tv: Tensor,
    pub total: Tensor,
}

impl DistanceTerms {
    pub fn values(&self) -> Result<(f64, f64, f64, f64)> {
        Ok((
            nn::scalar(&self.content)?,
            nn::scalar(&self.perceptual)?,
            nn::scalar(&self.tv)?,
            nn::scalar(&self.total)?,
        ))
    }
}

/// Weighted distillation distance. The teacher output is treated as a constant.
pub fn distance(
    student: &Tensor,
    teacher: &Tensor,
    extractor: &FeatureExtractor,
    cfg: &DistillConfig,
) -> Result<DistanceTerms> {
    if student.dims() != teacher.dims() {
        return Err(Error::Shape(format!(
            "student output {:?} vs teacher output {:?}",
            student.dims(),
            teacher.dims()
        )));
    }
    let teacher = teacher.detach();
    let content = content_loss(student, &teacher, cfg.content_norm)?;
    let perceptual = if cfg.beta_perceptual > 0.0 {
        perceptual_loss(student, &teacher, extractor)?
    } else {
        Tensor::zeros((), student.dtype(), student.device())?
    };
    let tv = tv_loss(student)?;
    let total = (((&content * cfg.beta_content)? + (&perceptual * cfg.beta_perceptual)?)? + (&tv * cfg.beta_tv)?)?;
    Ok(DistanceTerms {
        content,
        perceptual,
        tv,
        total,
    })
}

/// A frozen generator whose outputs never carry gradient.
#[derive(Debug, Clone)]
pub struct TeacherModel {
    net: Supernet,
    plan: ForwardPlan,
}

impl TeacherModel {
    pub fn new(net: Supernet, plan: ForwardPlan) -> Self {
        TeacherModel { net, plan }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.net.forward(x, &self.plan)?.detach())
    }

    pub fn net(&self) -> &Supernet {
        &self.net
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn identical_outputs_have_zero_distance() {
        let x = rand((2, 3, 8, 8), 1);
        let ex = FeatureExtractor::random(0, 3, &[4, 8], DType::F64).unwrap();
        let d = distance(&x, &x, &ex, &DistillConfig { beta_tv: 0.0, ..DistillConfig::standard() }).unwrap();
        assert_eq!(nn::scalar(&d.total).unwrap(), 0.0);
    }

    #[test]
    fn identity_extractor_gives_mse() {
        let a = rand((1, 3, 5, 5), 2);
        let b = rand((1, 3, 5, 5), 3);
        let p = nn::scalar(&perceptual_loss(&a, &b, &FeatureExtractor::identity()).unwrap()).unwrap();
        let mse = nn::scalar(&(&a - &b).unwrap().sqr().unwrap().mean_all().unwrap()).unwrap();
        assert!((p - mse).abs() < 1e-12);
    }

    #[test]
    fn tv_of_known_image() {
        // rows 0,1,2: dy^2 = 1 everywhere, dx = 0
        let x = Tensor::from_vec(vec![0f64, 0.0, 1.0, 1.0, 2.0, 2.0], (1, 1, 3, 2), &Device::Cpu).unwrap();
        assert_eq!(nn::scalar(&tv_loss(&x).unwrap()).unwrap(), 1.0);
    }

    #[test]
    fn missing_external_extractor_is_an_error() {
        let spec = ExtractorSpec::External {
            path: "/nonexistent/extractor.safetensors".into(),
        };
        let err = FeatureExtractor::from_spec(&spec, 3, DType::F32).unwrap_err();
        assert!(err.to_string().contains("not found"));
    }

    #[test]
    fn teacher_gets_no_gradient() {
        let s = candle_core::Var::from_tensor(&rand((1, 3, 4, 4), 4)).unwrap();
        let t = candle_core::Var::from_tensor(&rand((1, 3, 4, 4), 5)).unwrap();
        let ex = FeatureExtractor::identity();
        let d = distance(s.as_tensor(), t.as_tensor(), &ex, &DistillConfig::standard()).unwrap();
        let g = d.total.backward().unwrap();
        assert!(g.get(s.as_tensor()).is_some());
        assert!(g.get(t.as_tensor()).is_none());
    }
}
