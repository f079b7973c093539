//! Anomalous sound detection for machine condition monitoring.
//!
//! The library trains a conformer encoder jointly on three auxiliary tasks
//! (machine-identity classification with an angular margin, machine-type
//! discrimination against pseudo-anomalies, and augmentation identification),
//! then scores recordings by how far their embeddings fall from the normal
//! population of each machine. Everything is generic over the float type via
//! [`Scalar`]; use the `*32`/`*64` aliases below for concrete work.

pub mod audio;
pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod heads;
pub mod linalg;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod scorer;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod tsne;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision tensor (the training default).
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor (gradient checks, covariance work).
pub type Tensor64 = Tensor<f64>;
