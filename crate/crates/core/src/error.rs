use thiserror::Error;

use crate::config::{HeadKey, PartitionId, Violation};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid configuration: {}", format_violations(.0))]
    InvalidConfig(Vec<Violation>),

    #[error("unknown head {0}")]
    UnknownHead(HeadKey),
    #[error("unknown partition {0}")]
    UnknownPartition(PartitionId),
    #[error("partition {0} is pinned and was never offloaded")]
    NotOffloaded(PartitionId),

    #[error("host capacity exceeded: need {needed} pages, {available} available")]
    HostCapacityExceeded { needed: u64, available: u64 },
    #[error("device capacity exceeded: need {needed} pages, {available} available")]
    DeviceCapacityExceeded { needed: u64, available: u64 },
    #[error("partition spec overlaps registered tokens: starts at {start}, context already at {context}")]
    OverlappingSpec { start: u64, context: u64 },
    #[error("partition spec leaves a gap: starts at {start}, context ends at {context}")]
    GappedSpec { start: u64, context: u64 },
    #[error("invalid partition spec parameters: {0}")]
    InvalidSpecParams(String),

    #[error("segment pool exhausted ({capacity} segments)")]
    PoolExhausted { capacity: usize },
    #[error("segment {0} freed twice")]
    DoubleFree(usize),

    #[error("insufficient buffer: page demand {demand} exceeds {available} free or evictable pages")]
    InsufficientBuffer { demand: u64, available: u64 },
    #[error("nothing reclaimable: every request is at its minimum buffer")]
    NothingReclaimable,

    #[error("trace exhausted at step {step} (layer {layer}, head {head})")]
    TraceExhausted { step: u64, layer: u32, head: u32 },
    #[error("budget {budget} exceeds {num_partitions} selectable partitions")]
    BudgetTooLarge { budget: usize, num_partitions: usize },
    #[error("instance too large for exhaustive search: {accesses} accesses, capacity {capacity}")]
    InstanceTooLarge { accesses: usize, capacity: u64 },

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(String),

    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub fn parse(line: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            line,
            reason: reason.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}
