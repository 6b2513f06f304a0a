//! Cross-view embedded topic modelling for single-cell expression data.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every numerical piece:
//! dense matrices with a reverse-mode tape, entropic optimal transport, the
//! topic model and its training loop, and the interpretability / clustering
//! metrics used to score a fitted model. File formats and the command line
//! live in the `celltopic` companion crate.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;
#[cfg(any(test, feature = "parallel"))]
extern crate std;

pub mod cluster;
pub mod data;
mod error;
pub mod metrics;
pub mod model;
pub mod neighbors;
pub mod ot;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Matrix, Tape, Var};
