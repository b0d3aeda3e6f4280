//! Minimal CPU autodiff for small convolutional and attention models.
//!
//! [`Graph`] records a define-by-run tape; [`ParamSet`] owns named parameters
//! that are bound onto a tape per forward pass; [`Adam`] updates them.

pub mod graph;
pub mod optim;
pub mod params;
pub mod real;

pub use graph::{ConvGeom, Grads, Graph, Var};
pub use optim::Adam;
pub use params::{Bound, Conv2d, GroupNorm, LayerNorm, Linear, Param, ParamId, ParamSet};
pub use real::Real;
