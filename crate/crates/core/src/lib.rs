//! Unrolled dictionary-kernel metal artifact reduction with Gaussian-filtered
//! fast Fourier convolutions, plus a synthetic parallel-beam CT pipeline to
//! train and evaluate it.

pub mod config;
pub mod ctsim;
pub mod error;
pub mod fnt;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod spectral;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{ComplexTensor, Tensor};
