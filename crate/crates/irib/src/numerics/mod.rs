//! Dense f64 tensors, a define-by-run reverse-mode tape, raw array kernels,
//! named trainable parameters, and a finite-difference gradient oracle.

pub mod fd;
pub mod kernels;
mod param;
mod tape;
mod tensor;

pub use fd::{finite_diff_check, Objective};
pub use kernels::gaussian_kernel2d;
pub use param::{ParamStore, Parameter};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
