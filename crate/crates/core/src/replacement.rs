//! Bucketed-LRU replacement over a head's device page table.
//!
//! Each device page carries a small timestamp in `[0, n_buckets)`. Hits are
//! promoted to `min(step, n_buckets - 1)`; once the step reaches
//! `n_buckets`, every other page is demoted by one per step. Victims are
//! found by a histogram over timestamps built in one scan of the table.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::{HeadKey, PartitionId};
use crate::error::{Error, Result};
use crate::metadata::{DevicePageEntry, DevicePageId, MetadataStore, Residency};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionMode {
    /// Buckets below the threshold go whole; the threshold bucket gives up
    /// only what is still needed, lowest device page id first.
    #[default]
    BucketExact,
    /// Every page at or below the threshold bucket is evicted.
    BucketWhole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplacementParams {
    #[serde(default = "default_buckets")]
    pub n_buckets: u16,
    #[serde(default)]
    pub eviction_mode: EvictionMode,
}

fn default_buckets() -> u16 {
    64
}

impl Default for ReplacementParams {
    fn default() -> Self {
        Self {
            n_buckets: default_buckets(),
            eviction_mode: EvictionMode::BucketExact,
        }
    }
}

impl ReplacementParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_buckets < 2 {
            return Err(Error::InvalidSpecParams(format!(
                "n_buckets {} must be >= 2",
                self.n_buckets
            )));
        }
        Ok(())
    }

    fn timestamp(&self, step: u64) -> u16 {
        step.min(self.n_buckets as u64 - 1) as u16
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassifyResult {
    pub hits: Vec<PartitionId>,
    pub misses: Vec<PartitionId>,
    pub page_demand: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplacementOutcome {
    pub hits: Vec<PartitionId>,
    pub evicted_pages: Vec<DevicePageId>,
    pub evicted_partitions: Vec<PartitionId>,
    /// Device pages assigned to each missed partition, in request order.
    pub admissions: Vec<(PartitionId, Vec<DevicePageId>)>,
    pub resident_pages: Vec<DevicePageId>,
}

impl ReplacementOutcome {
    pub fn misses(&self) -> usize {
        self.admissions.len()
    }
}

/// One line of the eviction log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionRecord {
    pub step: u64,
    pub key: HeadKey,
    pub evicted: Vec<PartitionId>,
    pub admitted: Vec<PartitionId>,
}

impl EvictionRecord {
    pub fn new(step: u64, key: HeadKey, outcome: &ReplacementOutcome) -> Self {
        Self {
            step,
            key,
            evicted: outcome.evicted_partitions.clone(),
            admitted: outcome.admissions.iter().map(|(p, _)| *p).collect(),
        }
    }

    pub fn write_line<W: Write>(&self, mut out: W) -> Result<()> {
        let line = serde_json::to_string(self).map_err(|e| Error::Io(e.to_string()))?;
        writeln!(out, "{line}")?;
        Ok(())
    }
}

fn dedup(ids: &[PartitionId]) -> Vec<PartitionId> {
    let mut seen = HashSet::with_capacity(ids.len());
    ids.iter().copied().filter(|id| seen.insert(*id)).collect()
}

impl MetadataStore {
    /// Splits a request into resident hits and missing partitions. Duplicate
    /// ids are collapsed, first occurrence wins.
    pub fn classify(&self, key: &HeadKey, requested: &[PartitionId]) -> Result<ClassifyResult> {
        let head = self.head(key)?;
        let mut out = ClassifyResult::default();
        for id in dedup(requested) {
            let meta = self.meta_entry(head, id)?;
            match meta.residency {
                Residency::DeviceResident => out.hits.push(id),
                Residency::HostOnly => {
                    out.misses.push(id);
                    out.page_demand += self.page_count(meta.token_count as u64);
                }
            }
        }
        Ok(out)
    }

    /// Makes every requested partition device-resident for `step`.
    pub fn replace(
        &mut self,
        key: &HeadKey,
        requested: &[PartitionId],
        step: u64,
        params: &ReplacementParams,
    ) -> Result<ReplacementOutcome> {
        let class = self.classify(key, requested)?;
        let now = params.timestamp(step);
        let n = params.n_buckets as usize;

        let head = self.heads.get_mut(key).ok_or(Error::UnknownHead(*key))?;
        let demote = step >= params.n_buckets as u64 && head.last_step != Some(step);
        head.last_step = Some(step);
        let hits: HashSet<PartitionId> = class.hits.iter().copied().collect();

        // Single scan: promote, demote, histogram and free-slot count.
        let cap = head.device_capacity as usize;
        let mut hist = vec![0u64; n];
        let mut free: Vec<DevicePageId> = Vec::new();
        let mut candidates: Vec<(u16, DevicePageId, PartitionId)> = Vec::new();
        let mut hit_pages: Vec<DevicePageId> = Vec::new();
        for p in 0..cap {
            let Some(mut e) = head.dpt.get(&self.dpt_pool, p).filter(|e| e.valid) else {
                free.push(p as DevicePageId);
                continue;
            };
            let before = e.timestamp;
            if hits.contains(&e.partition) {
                e.timestamp = now;
                hit_pages.push(p as DevicePageId);
            } else if demote && !e.pinned {
                e.timestamp = e.timestamp.saturating_sub(1);
            }
            if e.timestamp != before {
                head.dpt.set(&mut self.dpt_pool, p, e)?;
            }
            if !e.pinned && !hits.contains(&e.partition) {
                hist[e.timestamp as usize] += 1;
                candidates.push((e.timestamp, p as DevicePageId, e.partition));
            }
        }

        let need = class.page_demand.saturating_sub(free.len() as u64);
        let evictable: u64 = hist.iter().sum();
        if need > evictable {
            return Err(Error::InsufficientBuffer {
                demand: class.page_demand,
                available: free.len() as u64 + evictable,
            });
        }

        let mut evicted_partitions: Vec<PartitionId> = Vec::new();
        let mut evicted_pages: Vec<DevicePageId> = Vec::new();
        if need > 0 {
            let mut cum = 0;
            let mut x = 0;
            while cum + hist[x] < need {
                cum += hist[x];
                x += 1;
            }
            let mut pages_of: HashMap<PartitionId, Vec<DevicePageId>> = HashMap::new();
            for &(_, p, pid) in &candidates {
                pages_of.entry(pid).or_default().push(p);
            }
            let mut chosen: HashSet<PartitionId> = HashSet::new();
            let mut freed = 0u64;
            let mut take = |pid: PartitionId, freed: &mut u64| {
                if chosen.insert(pid) {
                    evicted_partitions.push(pid);
                    let pages = &pages_of[&pid];
                    *freed += pages.len() as u64;
                    evicted_pages.extend_from_slice(pages);
                }
            };
            // `candidates` is already in ascending page order.
            match params.eviction_mode {
                EvictionMode::BucketWhole => {
                    for &(ts, _, pid) in &candidates {
                        if (ts as usize) <= x {
                            take(pid, &mut freed);
                        }
                    }
                }
                EvictionMode::BucketExact => {
                    for &(ts, _, pid) in &candidates {
                        if (ts as usize) < x {
                            take(pid, &mut freed);
                        }
                    }
                    for &(ts, _, pid) in &candidates {
                        if freed >= need {
                            break;
                        }
                        if ts as usize == x {
                            take(pid, &mut freed);
                        }
                    }
                }
            }
            for &p in &evicted_pages {
                head.dpt
                    .set(&mut self.dpt_pool, p as usize, DevicePageEntry::default())?;
            }
            free.extend_from_slice(&evicted_pages);
            free.sort_unstable();
        }

        let head = self.heads.get_mut(key).expect("checked above");
        let mut slots = free.into_iter();
        let mut admissions = Vec::with_capacity(class.misses.len());
        let mut resident_pages = hit_pages;
        for &pid in &class.misses {
            let tokens = head
                .meta
                .get(&self.meta_pool, pid as usize)
                .expect("classified above")
                .token_count as u64;
            let pages = tokens.div_ceil(self.layout.page_size);
            let mut assigned = Vec::with_capacity(pages as usize);
            for _ in 0..pages {
                let p = slots.next().expect("page demand covered above");
                head.dpt.set(
                    &mut self.dpt_pool,
                    p as usize,
                    DevicePageEntry {
                        partition: pid,
                        timestamp: now,
                        valid: true,
                        pinned: false,
                    },
                )?;
                assigned.push(p);
            }
            resident_pages.extend_from_slice(&assigned);
            admissions.push((pid, assigned));
        }
        for &pid in &evicted_partitions {
            self.set_residency(key, pid, Residency::HostOnly);
        }
        for &(pid, _) in &admissions {
            self.set_residency(key, pid, Residency::DeviceResident);
        }
        resident_pages.sort_unstable();
        Ok(ReplacementOutcome {
            hits: class.hits,
            evicted_pages,
            evicted_partitions,
            admissions,
            resident_pages,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metadata::tests_support::small_store;
    use crate::partition::PartitionSpec;

    const A: u32 = 0;
    const B: u32 = 1;
    const C: u32 = 2;
    const D: u32 = 3;
    const E: u32 = 4;

    fn key() -> HeadKey {
        HeadKey::new(0, 0, 0)
    }

    fn store_with(partitions: u64, capacity: u32) -> MetadataStore {
        let mut s = small_store(4096, 8, 8);
        s.register_partitions(key(), &PartitionSpec::uniform(0, partitions * 8, 8))
            .unwrap();
        s.grow_device(&key(), capacity).unwrap();
        s
    }

    fn params(n: u16) -> ReplacementParams {
        ReplacementParams {
            n_buckets: n,
            eviction_mode: EvictionMode::BucketExact,
        }
    }

    #[test]
    fn classify_counts_page_demand() {
        let mut s = store_with(128, 64);
        let warm: Vec<u32> = (0..16).collect();
        s.replace(&key(), &warm, 0, &params(64)).unwrap();
        let req: Vec<u32> = (0..64).collect();
        let c = s.classify(&key(), &req).unwrap();
        assert_eq!((c.hits.len(), c.misses.len(), c.page_demand), (16, 48, 48));
        assert_eq!(s.classify(&key(), &[]).unwrap(), ClassifyResult::default());
    }

    #[test]
    fn small_trace_matches_step_lru() {
        // Capacity 4, steps {A,B}, {C,D}, {A,E}: step 2 must evict B, the
        // lowest page of the oldest bucket, keeping C and D.
        let mut s = store_with(5, 4);
        let p = params(4);
        let mut misses = 0;
        let mut log = Vec::new();
        for (step, req) in [vec![A, B], vec![C, D], vec![A, E]].iter().enumerate() {
            let out = s.replace(&key(), req, step as u64, &p).unwrap();
            misses += out.misses();
            log.push(EvictionRecord::new(step as u64, key(), &out));
        }
        assert_eq!(misses, 5);
        assert_eq!(log[2].evicted, vec![B]);
        assert_eq!(log[2].admitted, vec![E]);
        let c = s.classify(&key(), &[A, C, D, E]).unwrap();
        assert!(c.misses.is_empty());
    }

    #[test]
    fn all_hits_refresh_timestamps() {
        let mut s = store_with(8, 8);
        let p = params(4);
        s.replace(&key(), &[A, B], 0, &p).unwrap();
        let out = s.replace(&key(), &[A, B], 9, &p).unwrap();
        assert!(out.evicted_pages.is_empty());
        for (_, e) in s.device_pages(&key()).unwrap() {
            assert_eq!(e.timestamp, 3);
        }
    }

    #[test]
    fn demand_beyond_evictable_is_rejected() {
        let mut s = store_with(8, 2);
        assert_eq!(
            s.replace(&key(), &[A, B, C], 0, &params(4)),
            Err(Error::InsufficientBuffer {
                demand: 3,
                available: 2
            })
        );
        s.replace(&key(), &[A, B], 0, &params(4)).unwrap();
        // Hits are never victims.
        assert!(matches!(
            s.replace(&key(), &[A, B, C], 1, &params(4)),
            Err(Error::InsufficientBuffer { .. })
        ));
    }

    #[test]
    fn demotion_once_per_step() {
        let mut s = store_with(8, 8);
        let p = params(4);
        s.replace(&key(), &[A], 3, &p).unwrap();
        s.replace(&key(), &[B], 4, &p).unwrap();
        s.replace(&key(), &[C], 4, &p).unwrap();
        let ts: HashMap<u32, u16> = s
            .device_pages(&key())
            .unwrap()
            .into_iter()
            .map(|(_, e)| (e.partition, e.timestamp))
            .collect();
        assert_eq!(ts[&A], 2);
        assert_eq!(ts[&B], 3);
        assert_eq!(ts[&C], 3);
    }

    #[test]
    fn bucket_whole_over_evicts() {
        let mut exact = store_with(8, 4);
        let mut whole = exact.clone();
        let pw = ReplacementParams {
            n_buckets: 4,
            eviction_mode: EvictionMode::BucketWhole,
        };
        for (s, p) in [(&mut exact, params(4)), (&mut whole, pw)] {
            s.replace(&key(), &[A, B, C, D], 0, &p).unwrap();
        }
        let e = exact.replace(&key(), &[E], 1, &params(4)).unwrap();
        let w = whole.replace(&key(), &[E], 1, &pw).unwrap();
        assert_eq!(e.evicted_partitions, vec![A]);
        assert_eq!(w.evicted_partitions, vec![A, B, C, D]);
    }

    #[test]
    fn multi_page_partitions_evict_atomically() {
        let mut s = small_store(4096, 8, 8);
        s.register_partitions(key(), &PartitionSpec::variable(vec![0..20, 20..28, 28..36]))
            .unwrap();
        s.grow_device(&key(), 4).unwrap();
        let p = params(8);
        s.replace(&key(), &[0], 0, &p).unwrap();
        s.replace(&key(), &[1], 1, &p).unwrap();
        // One page is needed, but the oldest partition holds three.
        let out = s.replace(&key(), &[2], 2, &p).unwrap();
        assert_eq!(out.evicted_partitions, vec![0]);
        assert_eq!(out.evicted_pages, vec![0, 1, 2]);
        assert_eq!(out.admissions, vec![(2, vec![0])]);
        let info = s.lookup_meta(&key(), &[0]).unwrap();
        assert_eq!(info[0].residency, Residency::HostOnly);
    }

    #[test]
    fn pinned_pages_never_evicted() {
        let mut s = small_store(4096, 8, 8);
        let spec = PartitionSpec::uniform(0, 80, 8).with_pinned([0, 1]);
        s.register_partitions(key(), &spec).unwrap();
        s.grow_device(&key(), 4).unwrap();
        let p = params(4);
        for step in 0..20u64 {
            let id = 2 + (step % 8) as u32;
            let out = s.replace(&key(), &[id], step, &p).unwrap();
            assert!(!out.evicted_partitions.contains(&0));
            assert!(!out.evicted_partitions.contains(&1));
        }
    }
}
