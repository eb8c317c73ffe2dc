//! Small denoising diffusion and flow-matching models on 2D point clouds.
//!
//! The numeric modules are generic over [`Scalar`] (`f32` or `f64`). The
//! aliases below fix the scalar to `f64`, which is what training, sampling
//! and the service use; model files store single precision.

pub mod analytic;
pub mod datasets;
pub mod density;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod quality;
pub mod sampling;
pub mod scalar;
pub mod store;
pub mod trainer;

pub use datasets::{Canvas, DatasetKind, StrokeSet};
pub use diffusion::{NoiseSchedule, Objective, ScheduleConfig};
pub use error::{Error, Result};
pub use geometry::{Bounds, Point};
pub use model::{NetTime, Predictor, Provenance};
pub use nn::{Activation, AdamConfig, MlpConfig};
pub use sampling::SamplerKind;
pub use scalar::Scalar;
pub use store::{ModelFile, StoreError};
pub use trainer::{CancelToken, TrainConfig, TrainError};

pub type Point2 = geometry::Point<f64>;
pub type Bounds2 = geometry::Bounds<f64>;
pub type Dataset = datasets::Dataset<f64>;
pub type Mlp = nn::MlpParams<f64>;
pub type Schedule = diffusion::NoiseSchedule<f64>;
pub type Model = model::DenoiserModel<f64>;
pub type Trajectory = sampling::Trajectory<f64>;
pub type Snapshot = trainer::EpochSnapshot<f64>;
pub type Grid = density::GridDensity<f64>;
pub type GridSpec = density::GridSpec<f64>;
pub type Contours = density::ContourSet<f64>;
