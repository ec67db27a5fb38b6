//! Two-stage sales forecasting for unreleased products: a conditional
//! diffusion model draws candidate demand curves from a product image and its
//! release date, and a small refinement network collapses the draws into one
//! forecast. Everything is generic over the scalar type; the crate root
//! exposes concrete `f64` aliases for the common case.

pub mod checkpoint;
pub mod conditioning;
pub mod data;
pub mod dataset_io;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod num;
pub mod optim;
pub mod pipeline;
pub mod plot;
pub mod refine;
pub mod schedule;
pub mod sheet;
pub mod synthetic;
pub mod train;
pub mod visuelle;

pub use error::{CoreError, Result};
pub use num::Scalar;

/// Default scalar type for end-to-end runs.
pub type Real = f64;

pub type DatasetF = data::Dataset<Real>;
pub type ParamStoreF = graph::ParamStore<Real>;
pub type NoiseScheduleF = schedule::NoiseSchedule<Real>;
pub type SampleSheetF = sheet::SampleSheet<Real>;
pub type TrainStateF = train::TrainState<Real>;
pub type CheckpointF = checkpoint::Checkpoint<Real>;
