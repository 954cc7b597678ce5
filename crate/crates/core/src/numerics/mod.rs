//! Dense tensors, reverse-mode differentiation and seeded random streams.

mod gradcheck;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{check_all_ops, check_gradients, GradCheckEntry, GradCheckReport, GRAD_NORM_FLOOR};
pub use rng::{tag, RngState, RngStream};
pub use scalar::Scalar;
pub use tape::{OpKind, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{matmul, Tensor};
