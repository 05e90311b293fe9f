//! Latent-duration sequence-to-sequence machinery: a duration trellis with
//! exact marginals and searches, sequence reshaping between token and frame
//! rates, the training objective, small neural nets with hand-written
//! backpropagation, and the training and inference loops.

pub mod checks;
pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod models;
pub mod numeric;
pub mod seq_ops;
pub mod training;
pub mod trellis;
pub mod types;

pub use error::{Error, Result};
