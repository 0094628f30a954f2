//! Minimal differentiable-programming toolkit used by the encoders and heads.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{FrameGeom, Grads, Graph, Mat, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::ParameterStore;
