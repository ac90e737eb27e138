//! Deep Hash Embedding: dense multi-hash encodings decoded by a deep
//! network, plus the one-hot and hashing-based embedding schemes it is
//! compared against.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod error;
pub mod goldens;
pub mod harness;
pub mod hashing;
pub mod neuralnet;
pub mod recmodels;
pub mod schemes;

pub use error::{Error, Result};
