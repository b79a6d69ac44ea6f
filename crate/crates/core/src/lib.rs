//! Knowledge distillation with representative teacher keys.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense tensors with define-by-run reverse-mode autodiff.
//! * [`models`]: small residual CNN backbones that expose tapped feature maps.
//! * [`attention`]: teacher/student attention matrix, impact scores and
//!   representative-teacher-key selection.
//! * [`losses`]: SoftPool resampling, pooled feature distance, KL soft
//!   targets and the combined objective.
//! * [`data`]: CIFAR-10 binary reader, synthetic texture dataset,
//!   augmentation and deterministic batching.
//! * [`harness`]: two-stage training, SGD schedule, metrics and run
//!   artifacts.
//! * [`cli`]: the `rtk` command-line front end.

pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod models;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Scalar, Tensor, Var};
