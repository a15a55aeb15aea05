//! Reference replacement policies for one head's access trace.
//!
//! All policies see the same model: a step requests a set of partitions that
//! must be resident together, capacity is counted in pages, and a partition
//! is evicted as a whole.

use std::collections::{BTreeSet, HashMap, HashSet};

use crate::config::{
    Granularity, HeadKey, ModelShape, PartitionId, RetrievalBudget, SparseConfig, TierParams,
};
use crate::error::{Error, Result};
use crate::metadata::{MetadataConfig, MetadataStore};
use crate::partition::PartitionSpec;
use crate::replacement::ReplacementParams;

pub const EXHAUSTIVE_MAX_CAPACITY: u64 = 4;
pub const EXHAUSTIVE_MAX_ACCESSES: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessTrace {
    /// Partition ids requested at each step; duplicates within a step count once.
    pub steps: Vec<Vec<PartitionId>>,
    /// Page count of each partition id.
    pub page_counts: Vec<u64>,
    /// Device pages available to the head.
    pub capacity: u64,
}

impl AccessTrace {
    pub fn new(steps: Vec<Vec<PartitionId>>, page_counts: Vec<u64>, capacity: u64) -> Result<Self> {
        let trace = Self {
            steps,
            page_counts,
            capacity,
        };
        if let Some(&0) = trace.page_counts.iter().find(|&&c| c == 0) {
            return Err(Error::InvalidSpecParams("page count must be >= 1".into()));
        }
        for step in &trace.steps {
            if let Some(&id) = step.iter().find(|&&id| id as usize >= trace.page_counts.len()) {
                return Err(Error::UnknownPartition(id));
            }
        }
        trace.check_capacity(capacity)?;
        Ok(trace)
    }

    /// Every partition is one page; ids run up to the largest one seen.
    pub fn single_page(steps: Vec<Vec<PartitionId>>, capacity: u64) -> Result<Self> {
        let n = steps.iter().flatten().max().map_or(0, |&m| m as usize + 1);
        Self::new(steps, vec![1; n], capacity)
    }

    pub fn with_capacity(&self, capacity: u64) -> Result<Self> {
        self.check_capacity(capacity)?;
        Ok(Self {
            capacity,
            ..self.clone()
        })
    }

    pub fn num_partitions(&self) -> usize {
        self.page_counts.len()
    }

    /// Total requests across steps after per-step deduplication.
    pub fn accesses(&self) -> usize {
        self.steps.iter().map(|s| dedup(s).len()).sum()
    }

    pub fn step_demand(&self, step: usize) -> u64 {
        dedup(&self.steps[step])
            .iter()
            .map(|&id| self.page_counts[id as usize])
            .sum()
    }

    /// Pages requested over the whole trace.
    pub fn total_demand(&self) -> u64 {
        (0..self.steps.len()).map(|s| self.step_demand(s)).sum()
    }

    pub fn max_step_demand(&self) -> u64 {
        (0..self.steps.len())
            .map(|s| self.step_demand(s))
            .max()
            .unwrap_or(0)
    }

    fn check_capacity(&self, capacity: u64) -> Result<()> {
        let demand = self.max_step_demand();
        if demand > capacity {
            return Err(Error::InsufficientBuffer {
                demand,
                available: capacity,
            });
        }
        Ok(())
    }
}

fn dedup(ids: &[PartitionId]) -> Vec<PartitionId> {
    let mut seen = HashSet::with_capacity(ids.len());
    ids.iter().copied().filter(|id| seen.insert(*id)).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PolicyRun {
    pub misses: u64,
    /// Pages brought in by misses.
    pub miss_pages: u64,
    pub step_misses: Vec<u64>,
    pub step_miss_pages: Vec<u64>,
    /// Partitions evicted at each step, in eviction order.
    pub evictions: Vec<Vec<PartitionId>>,
}

impl PolicyRun {
    /// Fraction of requested pages that had to be fetched.
    pub fn miss_ratio(&self, trace: &AccessTrace) -> f64 {
        match trace.total_demand() {
            0 => 0.0,
            d => self.miss_pages as f64 / d as f64,
        }
    }

    fn record(&mut self, misses: u64, miss_pages: u64, evicted: Vec<PartitionId>) {
        self.misses += misses;
        self.miss_pages += miss_pages;
        self.step_misses.push(misses);
        self.step_miss_pages.push(miss_pages);
        self.evictions.push(evicted);
    }
}

/// Step-granular true LRU over explicit device slots.
///
/// Partitions touched in one step share recency. Victims are taken least
/// recent first, ties by lowest occupied slot; misses fill the lowest free
/// slots in request order.
pub fn lru_reference(trace: &AccessTrace) -> PolicyRun {
    let mut slots: Vec<Option<PartitionId>> = vec![None; trace.capacity as usize];
    let mut last_use: HashMap<PartitionId, usize> = HashMap::new();
    let mut run = PolicyRun::default();
    for (t, step) in trace.steps.iter().enumerate() {
        let req = dedup(step);
        let requested: HashSet<PartitionId> = req.iter().copied().collect();
        let misses: Vec<PartitionId> = req
            .iter()
            .copied()
            .filter(|id| !last_use.contains_key(id))
            .collect();
        for id in &req {
            if let Some(u) = last_use.get_mut(id) {
                *u = t;
            }
        }
        let demand: u64 = misses.iter().map(|&id| trace.page_counts[id as usize]).sum();
        let mut free = slots.iter().filter(|s| s.is_none()).count() as u64;
        let mut evicted = Vec::new();
        if demand > free {
            let mut first_slot: HashMap<PartitionId, usize> = HashMap::new();
            for (i, s) in slots.iter().enumerate() {
                if let Some(id) = s {
                    first_slot.entry(*id).or_insert(i);
                }
            }
            let mut victims: Vec<(usize, usize, PartitionId)> = first_slot
                .into_iter()
                .filter(|(id, _)| !requested.contains(id))
                .map(|(id, slot)| (last_use[&id], slot, id))
                .collect();
            victims.sort_unstable();
            for (_, _, id) in victims {
                if free >= demand {
                    break;
                }
                for s in slots.iter_mut().filter(|s| **s == Some(id)) {
                    *s = None;
                }
                last_use.remove(&id);
                free += trace.page_counts[id as usize];
                evicted.push(id);
            }
        }
        let mut free_slots = (0..slots.len()).filter(|&i| slots[i].is_none());
        let mut assign = Vec::new();
        for &id in &misses {
            for _ in 0..trace.page_counts[id as usize] {
                assign.push((free_slots.next().expect("capacity checked"), id));
            }
            last_use.insert(id, t);
        }
        for (i, id) in assign {
            slots[i] = Some(id);
        }
        run.record(misses.len() as u64, demand, evicted);
    }
    run
}

/// Next step at which each id is requested, per step.
struct NextUse {
    positions: HashMap<PartitionId, Vec<usize>>,
}

impl NextUse {
    fn new(trace: &AccessTrace) -> Self {
        let mut positions: HashMap<PartitionId, Vec<usize>> = HashMap::new();
        for (t, step) in trace.steps.iter().enumerate() {
            for id in dedup(step) {
                positions.entry(id).or_default().push(t);
            }
        }
        Self { positions }
    }

    fn after(&self, id: PartitionId, t: usize) -> usize {
        let p = &self.positions[&id];
        let i = p.partition_point(|&s| s <= t);
        p.get(i).copied().unwrap_or(usize::MAX)
    }
}

/// Clairvoyant replacement: evict the partition whose next request is
/// farthest away, never-requested-again first, ties by lowest id.
pub fn belady(trace: &AccessTrace, capacity: u64) -> Result<PolicyRun> {
    trace.check_capacity(capacity)?;
    let next = NextUse::new(trace);
    let mut resident: BTreeSet<PartitionId> = BTreeSet::new();
    let mut used = 0u64;
    let mut run = PolicyRun::default();
    for (t, step) in trace.steps.iter().enumerate() {
        let req = dedup(step);
        let requested: HashSet<PartitionId> = req.iter().copied().collect();
        let misses: Vec<PartitionId> = req
            .iter()
            .copied()
            .filter(|id| !resident.contains(id))
            .collect();
        let demand: u64 = misses.iter().map(|&id| trace.page_counts[id as usize]).sum();
        let mut evicted = Vec::new();
        if demand > capacity - used {
            let mut victims: Vec<(std::cmp::Reverse<usize>, PartitionId)> = resident
                .iter()
                .filter(|id| !requested.contains(id))
                .map(|&id| (std::cmp::Reverse(next.after(id, t)), id))
                .collect();
            victims.sort_unstable();
            for (_, id) in victims {
                if demand <= capacity - used {
                    break;
                }
                resident.remove(&id);
                used -= trace.page_counts[id as usize];
                evicted.push(id);
            }
        }
        for &id in &misses {
            resident.insert(id);
            used += trace.page_counts[id as usize];
        }
        run.record(misses.len() as u64, demand, evicted);
    }
    Ok(run)
}

/// Minimum miss count over every eviction choice, by exhaustive search.
pub fn exhaustive_min(trace: &AccessTrace, capacity: u64) -> Result<u64> {
    let accesses = trace.accesses();
    if capacity > EXHAUSTIVE_MAX_CAPACITY || accesses > EXHAUSTIVE_MAX_ACCESSES {
        return Err(Error::InstanceTooLarge {
            accesses,
            capacity,
        });
    }
    trace.check_capacity(capacity)?;
    let steps: Vec<Vec<PartitionId>> = trace.steps.iter().map(|s| dedup(s)).collect();
    Ok(search(trace, &steps, capacity, 0, &BTreeSet::new()))
}

fn search(
    trace: &AccessTrace,
    steps: &[Vec<PartitionId>],
    capacity: u64,
    t: usize,
    resident: &BTreeSet<PartitionId>,
) -> u64 {
    let Some(req) = steps.get(t) else {
        return 0;
    };
    let pages = |id: &PartitionId| trace.page_counts[*id as usize];
    let misses: Vec<PartitionId> = req
        .iter()
        .copied()
        .filter(|id| !resident.contains(id))
        .collect();
    let demand: u64 = misses.iter().map(pages).sum();
    let used: u64 = resident.iter().map(pages).sum();
    let candidates: Vec<PartitionId> = resident
        .iter()
        .copied()
        .filter(|id| !req.contains(id))
        .collect();
    let mut best = u64::MAX;
    // Every subset of evictable partitions that frees enough room.
    for mask in 0u32..(1 << candidates.len()) {
        let freed: u64 = candidates
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, id)| pages(id))
            .sum();
        if used - freed + demand > capacity {
            continue;
        }
        let mut next = resident.clone();
        for (i, id) in candidates.iter().enumerate() {
            if mask & (1 << i) != 0 {
                next.remove(id);
            }
        }
        next.extend(misses.iter().copied());
        best = best.min(search(trace, steps, capacity, t + 1, &next));
    }
    misses.len() as u64 + best
}

/// Runs the bucketed-LRU engine on a trace through a one-head metadata store.
pub fn bucketed_lru(trace: &AccessTrace, params: &ReplacementParams) -> Result<PolicyRun> {
    params.validate()?;
    let mut run = PolicyRun::default();
    if trace.page_counts.is_empty() {
        for _ in &trace.steps {
            run.record(0, 0, Vec::new());
        }
        return Ok(run);
    }
    let total: u64 = trace.page_counts.iter().sum();
    let model = ModelShape {
        num_layers: 1,
        num_kv_heads: 1,
        head_dim: 1,
        bytes_per_element: 1,
        max_context: total.max(trace.capacity).max(1),
    };
    let sparse = SparseConfig {
        retrieval_budget: RetrievalBudget::Tokens(1),
        partition_granularity: Granularity::Variable,
        page_size: 1,
        summary_ratio: 0.0,
        update_interval: 1,
    };
    let tiers = TierParams {
        device_capacity: trace.capacity.max(1) * 2,
        host_capacity: total.max(1) * 2,
        bw_hbm: 2.0,
        bw_pcie: 1.0,
        t_mlp: 0.0,
        per_transfer_latency: 0.0,
    };
    let meta = MetadataConfig {
        max_batch: 1,
        ..MetadataConfig::default()
    };
    let mut store = MetadataStore::new(&model, &sparse, &tiers, &meta, params.n_buckets);
    let key = HeadKey::new(0, 0, 0);
    let mut cursor = 0;
    let ranges = trace
        .page_counts
        .iter()
        .map(|&c| {
            cursor += c;
            cursor - c..cursor
        })
        .collect();
    store.register_partitions(key, &PartitionSpec::variable(ranges))?;
    store.grow_device(&key, trace.capacity as u32)?;
    for (t, step) in trace.steps.iter().enumerate() {
        let out = store.replace(&key, step, t as u64, params)?;
        let pages = out.admissions.iter().map(|(_, p)| p.len() as u64).sum();
        run.record(out.misses() as u64, pages, out.evicted_partitions);
    }
    Ok(run)
}
