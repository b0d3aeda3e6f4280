//! Toy text-to-image diffusion with cross-attention phrase grounding.

pub mod atlas;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod grounding;
pub mod imaging;
pub mod keywords;
pub mod metrics;
pub mod pipeline;
pub mod text;

pub use error::{Error, Result};
