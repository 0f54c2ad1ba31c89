//! Clustering of precomputed embeddings with self-adaptive optimal-transport
//! pseudo-labels.

pub mod augment;
pub mod error;
pub mod heads;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod pseudo;
pub mod trainer;
pub mod transport;

pub use error::{Error, Result};
