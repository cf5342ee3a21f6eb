//! Pixel-space unified transformer at desk scale.
//!
//! One shared token space for text, condition images, the diffusion
//! timestep, and noisy target patches; a decoder-only backbone with hybrid
//! causal/full attention; flow-matching training with perceptual and
//! language-modeling supervision; deterministic ODE sampling; and few-step
//! distillation. Everything runs on the in-crate f64 tape engine and is
//! validated by finite differences.

pub mod attention;
pub mod check;
pub mod checkpoint;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod evaluate;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod params;
pub mod pixmap;
pub mod runconfig;
pub mod sampling;
pub mod tape;
pub mod tensor;
pub mod tokenize;

pub use error::{Error, Result};
pub use params::{ParamNodes, ParamTree};
pub use tape::{Gradients, NodeId, Primitive, Tape};
pub use tensor::Tensor;
