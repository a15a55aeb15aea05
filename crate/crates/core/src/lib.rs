//! Trace-driven simulator for tiered KV-cache management under sparse attention.

pub mod config;
pub mod envelope;
pub mod error;
pub mod metadata;
pub mod oracle;
pub mod partition;
pub mod pipeline;
pub mod replacement;
pub mod scheduler;
pub mod sim;
pub mod workload;

pub use config::{
    page_bytes, validate_config, Granularity, HeadKey, ModelShape, PartitionId, RequestId,
    RetrievalBudget, SparseConfig, TierParams, Violation,
};
pub use error::{Error, Result};
pub use partition::{PartitionMode, PartitionSpec};
