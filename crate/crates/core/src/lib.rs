//! Geometry-aware cached token merging for multi-frame global attention.
//!
//! The pipeline tokenizes a sequence of frames, scores every patch token by
//! pixel gradients and local token variance, partitions tokens into salient,
//! destination and source sets, and shortens the global-attention sequence by
//! averaging each source token into its most similar destination. Merged
//! tokens are replicated back after attention so dense outputs keep their
//! original shape. Merge plans are cached across layers.

pub mod attention;
pub mod bench;
pub mod error;
pub mod gamap;
pub mod ingest;
pub mod merge;
pub mod partition;

pub use error::{Error, Result};
