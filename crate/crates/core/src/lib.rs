//! Dual-branch multi-task facial expression recognition.
//!
//! An attention-based emotion branch and a landmark-supervised appearance
//! branch feed a shared fully connected trunk with two heads: six
//! expression logits and 68 (x, y) landmarks. Members are trained on
//! random subsamples of the training set and combined by soft voting;
//! evaluation reports per-class and macro F1.

pub mod attention;
pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod exec;
pub mod expression;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
pub use expression::{Expression, LANDMARK_DIM, NUM_CLASSES, NUM_LANDMARKS};
