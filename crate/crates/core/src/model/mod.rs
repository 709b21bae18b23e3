//! Network variants, the layer graph, counters and weight files.
pub mod checkpoint;
mod graph;
mod variant;
pub use graph::*;
pub use variant::*;
