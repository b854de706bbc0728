//! Numeric core for the magread models: a dense row-major [`Tensor`], a
//! [`Tape`] that records operations for reverse-mode differentiation, and an
//! [`adam_step`] with decoupled weight decay.
//!
//! Everything is generic over [`Scalar`] so the same model code runs in
//! 32-bit for training and in 64-bit for gradient checking.
//!
//! ```
//! use magread_numerics::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let p = tape.param(Tensor::from_vec(vec![2], vec![1.0, -2.0]).unwrap());
//! let sq = tape.mul(p, p).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(p).data(), &[2.0, -4.0]);
//! ```

mod adam;
mod error;
pub mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use error::{NumericsError, Result};
pub use scalar::{gemm, Layout, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
