//! Temporal developer-activity embeddings and trust-ascendancy trajectories.

pub mod characteristics;
pub mod align;
pub mod cluster;
pub mod embed;
pub mod error;
pub mod factor;
pub mod ingest;
pub mod json17;
pub mod linalg;
pub mod readability;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod time;
pub mod trajectory;

pub use error::{Error, Result};
