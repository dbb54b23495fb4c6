//! Multi-interest user representations learned with a set-level
//! contrastive objective.
//!
//! A user's behaviors are embedded, scored against a trainable interest
//! dictionary, and pooled into `K` interest-oriented vectors. Training pulls
//! together the vector sets of one user's history and future windows and
//! pushes apart those of other users in the batch.

pub mod autograd;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
