//! Dense tensors, a reverse-mode gradient tape, the Adam optimizer, a
//! finite-difference gradient oracle and a small SVD.

mod gradcheck;
mod linalg;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{
    analytic_gradient, compare_gradients, finite_diff_check, numerical_gradient, relative_error,
    GradCheckReport,
};
pub use linalg::singular_values;
pub use optim::{Adam, AdamConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul, Tensor};
