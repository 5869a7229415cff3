//! Reverse-mode automatic differentiation over a fixed primitive catalog.
//!
//! A [`Graph`] records primitives in topological order. [`Graph::eval`]
//! runs the forward pass against a [`ParamTable`] and named input
//! [`Bindings`], keeping every intermediate value; [`Evaluation::backward`]
//! then walks the nodes in reverse and returns a [`GradientMap`].
//!
//! ```
//! use std::collections::HashMap;
//! use octfpn::autodiff::{Graph, Init, Mode, ParamTable};
//! use octfpn::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param("x", [1], Init::Zeros).unwrap();
//! let y = g.mul(x, x).unwrap();
//! let mut params = ParamTable::<f64>::new();
//! params.insert("x", Tensor::from_f64([1], &[3.0]).unwrap(), true);
//! let inputs = HashMap::new();
//! let ev = g.eval(&params, &inputs, Mode::Infer).unwrap();
//! assert_eq!(ev.value(y).data(), &[9.0]);
//! assert_eq!(ev.backward(y).unwrap().get("x").unwrap().data(), &[6.0]);
//! ```

mod eval;
mod gradcheck;
mod graph;
pub mod kernels;
mod params;

pub use eval::{Adjoints, Bindings, Evaluation, Mode};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{Graph, Init, Node, NodeId, Op, ParamDecl};
pub use kernels::Padding;
pub use params::{declared_parameter_count, GradientMap, Param, ParamTable};
