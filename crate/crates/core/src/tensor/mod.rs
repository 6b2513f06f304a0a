//! Dense matrices, a reverse-mode tape, and a finite-difference checker.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{grad_check, grad_check_with_step};
pub use matrix::{argmax, dot, log_sum_exp, softmax_in_place, sq_euclidean, Matrix};
pub use tape::{Gradients, Tape, Var};
