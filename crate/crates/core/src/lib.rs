//! Federated learning with prototype regularisation.
//!
//! Clients train a shared model on non-IID shards. Besides averaging model
//! weights, the server averages per-class mean embeddings ("prototypes")
//! reported by clients and broadcasts them back. Local training then pulls
//! each sample's embedding toward the global prototype of its class. The
//! same global prototypes also give a nearest-prototype classifier at test
//! time.

pub mod data;
mod error;
pub mod eval;
pub mod federation;
pub mod nn;
pub mod prototype;
pub mod rng;
mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
