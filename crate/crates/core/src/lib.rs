//! Temporal-difference motion encoding with mutual-information-based
//! disentanglement for video pose estimation, at desk scale.

pub mod backbone;
pub mod error;
pub mod nn;
pub mod rdm;
pub mod synth;
pub mod tde;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
pub use train::{MetricsReport, TrainConfig, Variant};
