//! Label-shift importance weight estimation, posterior adaptation, and a
//! synthetic benchmark harness.

pub mod adapt;
pub mod calibrate;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod inference;
pub mod linalg;
pub mod rng;
pub mod simulate;
pub mod stats;
pub mod types;

pub use error::{Error, Result};
pub use types::{LabelDist, LogitMatrix, Predictions, ProbMatrix, SourceSet, TargetSet, Weights};
