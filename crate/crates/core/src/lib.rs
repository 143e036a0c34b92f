//! Attention-based node pooling for graph neural networks.
//!
//! The crate bundles a small reverse-mode autodiff engine over dense
//! matrices, graph convolutions (GCN, GIN, ChebyNet, ChebyGIN), attention
//! subnetworks with top-k and threshold pooling, generators for the Colors
//! and Triangles tasks, and the training and evaluation loops built on them.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below name the double-precision instantiations used by the CLI.

pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod layers;
pub mod model;
pub mod oracle;
pub mod pooling;
pub mod scalar;
pub mod seeding;
pub mod training;

#[cfg(test)]
mod testutil;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
pub type Model64 = model::Model<f64>;
pub type ParamStore64 = layers::ParamStore<f64>;
pub type TrainOutcome64 = training::TrainOutcome<f64>;

pub type Tensor32 = Tensor<f32>;
pub type Tape32 = Tape<f32>;
pub type Model32 = model::Model<f32>;
