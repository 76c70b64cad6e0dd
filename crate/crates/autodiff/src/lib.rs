//! Reverse-mode automatic differentiation over dense rank-0/1/2 arrays.
//!
//! Build a [`Graph`] per unit of work, register trainable inputs with
//! [`Graph::param`], compose primitives, then call [`Graph::backward`] on a
//! scalar. Gradients accumulate across repeated uses of a variable.
//!
//! ```
//! use icct_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item().unwrap(), 6.0);
//! ```

mod error;
pub mod gradcheck;
mod graph;
pub mod optim;
mod select;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{sigmoid, softmax_row, Gradients, Graph, Var};
pub use select::{argmax, sample_gumbel, top_k, SoftPath};
pub use tensor::Tensor;
