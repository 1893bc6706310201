//! Reverse-mode automatic differentiation over dense f64 tensors: a Wengert
//! tape with the op set the model needs, Adam and gradient clipping, a
//! finite-difference gradient checker, and a binary checkpoint format.

pub mod check;
pub mod checkpoint;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use check::{check_gradients, GradCheckReport, FD_STEP, FD_TOLERANCE};
pub use checkpoint::{Checkpoint, RngSnapshot};
pub use optim::{clip_global_norm, AdamState};
pub use tape::{Gradients, Tape, TensorError, Var};
pub use tensor::Tensor;
