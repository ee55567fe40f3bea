//! Dense row-major tensors with a reverse-mode automatic differentiation tape.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations are
//! methods on the tape that take [`Var`] handles and append a node; calling
//! [`Tape::backward`] walks the nodes in reverse append order and accumulates
//! vector-Jacobian products into every node that requires a gradient.
//!
//! ```
//! use fsc_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().requiring_grad());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum_all(sq).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```
//!
//! Everything is generic over [`Scalar`] so a graph built in `f32` for training
//! can be rebuilt in `f64` for finite-difference verification ([`grad_check`]).

mod backward;
mod error;
mod gradcheck;
mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Epsilon used by loss code that explicitly requests a guarded `log`/`div`.
pub const LOSS_EPS: f64 = 1e-12;

/// Below this L2 norm, [`Tape::l2_normalize`] returns the first basis vector.
pub const NORM_GUARD: f64 = 1e-8;
