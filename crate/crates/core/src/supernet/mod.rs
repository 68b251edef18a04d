//! Weight-sharing supernet, architecture parameters and width sampling.

pub mod gumbel;
pub mod kernel;
pub mod model;
pub mod params;

pub use gumbel::{sample_width, TemperatureSchedule, WidthSample};
pub use kernel::{KernelKind, SuperKernel};
pub use model::Supernet;
pub use params::{ArchParams, ForwardPlan, LayerPlan, OpPlan, WidthRelax};
