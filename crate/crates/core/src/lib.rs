//! Epistemic uncertainty quantification for 2-D segmentation on the CPU.
//!
//! [`tensor`] and [`autograd`] provide f64 tensors and reverse-mode
//! differentiation, [`model`] the residual U-Net and its training loop,
//! [`uq`] the uncertainty methods behind one train/predict interface,
//! [`metrics`] DSC, correlation and error-retention scoring, [`data`] the
//! synthetic generator, splits and NIfTI I/O, and [`bench`] the resumable
//! experiment runner with its reports.

// Tape ops are named like the arithmetic traits but return `Result`.
#![allow(clippy::should_implement_trait)]
// `!(x > 0.0)` style checks reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod autograd;
pub mod bench;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod uq;

pub use autograd::{Precision, Tape, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
