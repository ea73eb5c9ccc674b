//! Episode embeddings for open-world author identification.
//!
//! A user's activity is a sequence of actions (timestamp, text, context). A
//! short contiguous window of actions, an episode, is encoded to a vector so
//! that episodes by the same author land close together, including authors
//! never seen in training.

pub mod baselines;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod objectives;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Encoder32 = encoder::Encoder<f32>;
pub type Encoder64 = encoder::Encoder<f64>;
pub type Head32 = objectives::Head<f32>;
pub type Head64 = objectives::Head<f64>;
pub type Checkpoint32 = trainer::Checkpoint<f32>;
