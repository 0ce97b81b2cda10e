//! Keyframe-aware talking-head motion: keyframe extraction, prosody,
//! speech encoding, keyframe prediction, diffusion motion generation and
//! evaluation metrics.

pub mod config;
pub mod dpse;
pub mod error;
pub mod frontend;
pub mod kel;
pub mod kernels;
pub mod metrics;
pub mod keypredictor;
pub mod motion_io;
pub mod motiongen;
pub mod par;
pub mod pipeline;
pub mod prosody;
pub mod rotation;
pub mod signal;
pub mod svg;
pub mod tensor;

pub use error::{Error, Result};
pub use par::Execution;
pub use tensor::Matrix;
