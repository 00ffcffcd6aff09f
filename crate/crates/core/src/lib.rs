//! Cost-based distributed caching of sparse multi-dimensional arrays.
//!
//! Raw array files are chunked lazily by the queries that touch them, cached
//! chunks are kept or evicted by a cost model over recent queries, and kept
//! chunks are homed so that chunks joined together sit on the same node.

pub mod bench;
pub mod chunking;
pub mod cluster;
pub mod error;
pub mod eviction;
pub mod geometry;
pub mod heap;
pub mod io;
pub mod ids;
pub mod join;
pub mod placement;
pub mod timing;
pub mod workload;

pub use error::{Error, Result};
pub use geometry::{ArraySchema, AttrKind, AttrValue, Attribute, BoundingBox, Cell, Dimension, QuerySpec};
pub use ids::{ChunkId, FileId, NodeId};
