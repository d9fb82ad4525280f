//! Learned, fixed and removed CNN classifier heads on a small f64
//! reverse-mode autodiff engine, plus exact parameter auditing of reference
//! architectures.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audit;
pub mod autodiff;
pub mod cam;
pub mod checkpoint;
pub mod compare;
pub mod data;
pub mod error;
mod fsutil;
pub mod gradcheck;
pub mod heads;
mod kernels;
pub mod model;
pub mod par;
pub mod param;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use par::ExecMode;
pub use rng::Rng;
pub use tensor::Tensor;
