//! Partition specifications: how a head's tokens are grouped into the logical
//! units that selection and retrieval operate on.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Fixed-size partitions; the last one may be short.
    Uniform { tokens_per_partition: u64 },
    /// Explicit token ranges, which must tile `[start, end)` in order.
    Variable { ranges: Vec<Range<u64>> },
}

/// A batch of partitions to register for one head, covering tokens
/// `[start, end)`. `pinned` holds indices local to this spec.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub start: u64,
    pub end: u64,
    pub mode: PartitionMode,
    pub pinned: BTreeSet<u32>,
}

impl PartitionSpec {
    pub fn uniform(start: u64, end: u64, tokens_per_partition: u64) -> Self {
        Self {
            start,
            end,
            mode: PartitionMode::Uniform {
                tokens_per_partition,
            },
            pinned: BTreeSet::new(),
        }
    }

    pub fn variable(ranges: Vec<Range<u64>>) -> Self {
        let start = ranges.first().map_or(0, |r| r.start);
        let end = ranges.last().map_or(start, |r| r.end);
        Self {
            start,
            end,
            mode: PartitionMode::Variable { ranges },
            pinned: BTreeSet::new(),
        }
    }

    pub fn with_pinned(mut self, pinned: impl IntoIterator<Item = u32>) -> Self {
        self.pinned.extend(pinned);
        self
    }

    pub fn tokens(&self) -> u64 {
        self.end.saturating_sub(self.start)
    }

    pub fn len(&self) -> usize {
        match &self.mode {
            PartitionMode::Uniform {
                tokens_per_partition,
            } => self.tokens().div_ceil((*tokens_per_partition).max(1)) as usize,
            PartitionMode::Variable { ranges } => ranges.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Token counts of each partition, after checking that the ranges tile
    /// `[start, end)` without gaps or overlap.
    pub fn token_counts(&self) -> Result<Vec<u64>> {
        if self.end < self.start {
            return Err(Error::InvalidSpecParams(format!(
                "end {} precedes start {}",
                self.end, self.start
            )));
        }
        let counts = match &self.mode {
            PartitionMode::Uniform {
                tokens_per_partition: 0,
            } => {
                return Err(Error::InvalidSpecParams(
                    "tokens_per_partition must be >= 1".into(),
                ))
            }
            PartitionMode::Uniform {
                tokens_per_partition: g,
            } => {
                let mut counts = vec![*g; (self.tokens() / g) as usize];
                if !self.tokens().is_multiple_of(*g) {
                    counts.push(self.tokens() % g);
                }
                counts
            }
            PartitionMode::Variable { ranges } => {
                let mut cursor = self.start;
                let mut counts = Vec::with_capacity(ranges.len());
                for r in ranges {
                    if r.start < cursor {
                        return Err(Error::OverlappingSpec {
                            start: r.start,
                            context: cursor,
                        });
                    }
                    if r.start > cursor {
                        return Err(Error::GappedSpec {
                            start: r.start,
                            context: cursor,
                        });
                    }
                    if r.end <= r.start {
                        return Err(Error::InvalidSpecParams(format!(
                            "empty range {}..{}",
                            r.start, r.end
                        )));
                    }
                    counts.push(r.end - r.start);
                    cursor = r.end;
                }
                if cursor != self.end {
                    return Err(Error::InvalidSpecParams(format!(
                        "ranges end at {cursor}, spec ends at {}",
                        self.end
                    )));
                }
                counts
            }
        };
        if let Some(&p) = self.pinned.iter().find(|&&p| p as usize >= counts.len()) {
            return Err(Error::InvalidSpecParams(format!(
                "pinned index {p} out of range for {} partitions",
                counts.len()
            )));
        }
        Ok(counts)
    }
}
