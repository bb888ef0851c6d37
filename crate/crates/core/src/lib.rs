//! Few-step point-cloud scene completion by score distillation.

pub mod diffusion;
pub mod distill;
pub mod error;
pub mod geometry;
mod io_util;
pub mod metrics;
pub mod net;
pub mod schedule;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

pub use diffusion::{Inversion, ScenePair};
pub use distill::DistillConfig;
pub use geometry::{Point3, Scene, SceneRole};
pub use metrics::{MetricConfig, MetricReport};
pub use net::DenoiserModel;
pub use trainer::{ExperimentConfig, Method, TableRow};
