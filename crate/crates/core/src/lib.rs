//! Video salient-object detection with non-local blocks.
//!
//! A static network predicts per-frame saliency from appearance; a dynamic
//! network refines it from two consecutive frames plus the static map.
//! Everything runs on a small reverse-mode differentiation engine in double
//! precision, and [`metrics`] scores maps with PR/F-measure, ROC/AUC and MAE.

pub mod ablation;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod nets;
pub mod nonlocal;
pub mod ops;
pub mod pipeline;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod weights;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Shape, Tensor};
