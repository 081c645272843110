//! Uncertainty-aware amortized variational inference for linear imaging
//! inverse problems at desk scale.

pub mod bridge;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod forward_ops;
pub mod gradcheck;
pub mod grid;
pub mod image_io;
pub mod linalg;
pub mod memory;
pub mod models;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
pub use grid::{Dims, ImageGrid, RangeTag};
pub use rng::SeededRng;
