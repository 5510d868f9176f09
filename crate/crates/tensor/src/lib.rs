//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! [`Tensor`] is an immutable value type; [`Var`] wraps one and, when created
//! from a [`Tape`] leaf or derived from one, records the operation so that
//! [`Tape::backward`] can produce gradients for every leaf.
//!
//! ```
//! use fiber_tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
//! let loss = w.mul(&w).unwrap().sum_all();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.get(&w).unwrap().data(), &[2.0, 4.0]);
//! ```

mod error;
pub mod gradcheck;
pub mod kernels;
mod ops;
mod rng;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, GradCheck};
pub use ops::{gelu_scalar, sigmoid_scalar, softplus_scalar, LAYER_NORM_EPS};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{broadcast_shape, numel_of, Tensor};
