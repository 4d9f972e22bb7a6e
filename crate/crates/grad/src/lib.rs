//! Minimal reverse-mode automatic differentiation for small sequence models.
//!
//! The tape records dense `f64` matrix operations; models bind a
//! [`ParamSet`] onto a fresh [`Graph`] for every forward pass, call
//! [`Graph::backward`] on a scalar loss, and hand the collected gradients to
//! [`Adam`].

pub mod adam;
pub mod graph;
pub mod nn;
pub mod params;

pub use adam::{Adam, AdamConfig};
pub use graph::{BackwardFn, Grads, Graph, Mat, Var};
pub use params::{Bound, ParamId, ParamSet};
