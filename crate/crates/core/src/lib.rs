//! Relative geometry-aware siamese regression of 6DOF camera poses.
//!
//! The crate is organized bottom-up:
//!
//! - [`pose`]: quaternion and pose arithmetic.
//! - [`autodiff`]: a small reverse-mode differentiation engine.
//! - [`losses`]: global, relative-consistency, relative-regression and
//!   metric losses, plus their weighted combination.
//! - [`network`]: the shared-weight encoder with global and relative pose heads.
//! - [`dataset`]: pose-file loaders, synthetic scenes and pairing strategies.
//! - [`trainer`]: the optimization loop, checkpoints and the ablation runner.
//! - [`evaluation`]: median-error evaluation and cross-scene averaging.
//! - [`gradient_suite`]: finite-difference checks of every loss.

// `!(x > 0.0)` style checks are used so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod gradient_suite;
pub mod losses;
pub mod network;
pub mod pose;
pub mod trainer;

pub use autodiff::{gradcheck, Gradients, GradcheckReport, Graph, Tensor, Var};
pub use error::{Error, Result};
pub use network::{Checkpoint, EncoderConfig, Mode, ModelConfig, SiameseModel};
pub use pose::{angular_error_deg, position_error_m, relative_pose, Pose, Position, Quaternion, RelativePose};
