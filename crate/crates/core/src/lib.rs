//! Session-based next-item recommendation: global-graph item embeddings
//! pre-trained with biased random walks and skip-gram, then a gated graph
//! network over each session prefix with a position-decay readout.

pub mod dataio;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod global_graph;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod session_graph;
pub mod synthetic;

pub use error::{Error, Result};
