pub mod data;
pub mod diffmath;
pub mod error;
pub mod features;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod nmm;
pub mod obmm;
pub mod params;
pub mod solver;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{registration_metrics, PointCloud, RegistrationMetrics, RigidTransform};
pub use model::{Components, Model, ModelConfig};
pub use solver::{icp_baseline, register_iterative, register_once, IterationConfig};
pub use train::{Checkpoint, TrainConfig, Trainer};
