//! Tensors, a reverse-mode tape, and the Adam optimizer.

mod conv;
pub mod gradcheck;
pub mod optim;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheck};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub(crate) use tape::{cross_entropy_forward, mse_forward, softmax_in_place};
pub use tensor::Tensor;
