//! Dense numerics: convolutions, FFTs, batch norm, and the differentiation tape.

pub mod batchnorm;
pub mod conv;
pub mod fft;
pub mod gradcheck;
pub mod tape;

pub use batchnorm::{batch_norm, BatchNormState, Mode};
pub use conv::{conv2d, conv2d_transpose};
pub use fft::{fft2, ifft2};
pub use gradcheck::{grad_check, grad_check_many};
pub use tape::{Gradients, Tape, Var};
