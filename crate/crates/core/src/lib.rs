//! A define-by-run neural network toolkit for NLP.
//!
//! Everything is built on [`autograd::Graph`]: a fresh graph is built per
//! training example from parameters held in a [`model::ParamStore`], the
//! loss is evaluated with `forward`, and `backward` produces gradients that
//! [`optim`] applies back to the store.

pub mod autograd;
pub mod commands;
pub mod error;
pub mod data;
pub mod encoders;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod recurrent;
pub mod structured;
pub mod synthetic;
pub mod tensor;
pub mod treenn;

pub use autograd::{Graph, NodeId, OpKind};
pub use error::{Error, Result};
pub use model::{InitSpec, ParamStore};
pub use tensor::Tensor;
