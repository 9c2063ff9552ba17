//! Set-transformer classification of users from sets of post embeddings,
//! with training, Integrated Gradients attribution and an early-risk
//! streaming evaluator.

// NaN-rejecting range checks read as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attribution;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod sim;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams, SetClassifier, TextSet};
pub use parallel::Executor;
pub use rng::SeedTree;
pub use tensor::Tensor;
