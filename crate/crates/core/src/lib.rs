//! Variational attentional encoder-decoder translation with a from-scratch
//! reverse-mode differentiation engine.
//!
//! The model pairs a bidirectional GRU encoder and an attentional GRU decoder
//! with a continuous latent sentence vector. A source-conditioned prior and a
//! source-and-target posterior are both diagonal Gaussians; training
//! minimises the negative variational bound with reparameterized samples, and
//! decoding fixes the latent at the prior mean.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod inferer;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result, Shape};
pub use model::{Mode, Model, ModelDims};
pub use params::{NoiseSource, ParameterStore};
pub use tensor::{Axis, Graph, Precision, Var};
pub use training::{TrainConfig, Trainer};
