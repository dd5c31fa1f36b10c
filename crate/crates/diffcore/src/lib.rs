//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records operations as they execute; [`Graph::backward`]
//! walks the record in reverse and accumulates gradients. The layer set is
//! what small image-restoration networks need: 2-D convolution with
//! replicate padding, dense layers, pointwise activations, channel concat
//! and slicing, nearest upsampling, average pooling and reductions. Domain
//! crates add their own primitives by implementing [`Operation`].
//!
//! ```
//! use diffcore::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.variable(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
//! let y = g.leaky_relu(x, 0.1).unwrap();
//! let s = g.sum(y).unwrap();
//! let grads = g.backward(s).unwrap();
//! assert_eq!(g.value(y).data(), &[-0.1, 2.0]);
//! assert_eq!(grads.get(x).unwrap().data(), &[0.1, 1.0]);
//! ```

pub mod checkpoint;
mod conv;
mod error;
pub mod gradcheck;
mod graph;
mod ops;
mod params;
pub mod rng;
mod tensor;

pub use checkpoint::Checkpoint;
pub use conv::Conv2d;
pub use error::{DiffError, Result};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, Operation, Var};
pub use ops::Pointwise;
pub use params::{he_normal, AdamConfig, Bound, Param, ParamSet};
pub use tensor::Tensor;
