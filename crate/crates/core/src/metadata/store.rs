use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::two_level::{Directory, SegmentPool};
use crate::config::{
    page_bytes, Granularity, HeadKey, ModelShape, PartitionId, RequestId, SparseConfig, TierParams,
};
use crate::error::{Error, Result};
use crate::partition::PartitionSpec;

pub const META_ENTRY_BYTES: u64 = 8;
pub const DEVICE_PAGE_ENTRY_BYTES: u64 = 8;
/// Device page entry width once timestamps no longer fit in one byte.
pub const WIDE_DEVICE_PAGE_ENTRY_BYTES: u64 = 12;
pub const OFFSET_ENTRY_BYTES: u64 = 8;
pub const HOST_PAGE_ID_BYTES: u64 = 4;
pub const DIRECTORY_SLOT_BYTES: u64 = 4;

pub type HostPageId = u32;
pub type DevicePageId = u32;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Residency {
    #[default]
    HostOnly,
    DeviceResident,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MetaPartitionEntry {
    pub token_count: u32,
    pub residency: Residency,
    pub pinned: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DevicePageEntry {
    pub partition: PartitionId,
    pub timestamp: u16,
    pub valid: bool,
    pub pinned: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PartitionOffsetEntry {
    pub start_offset: u32,
    pub page_count: u32,
}

/// What `lookup_meta` reports per partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionInfo {
    pub token_count: u64,
    pub residency: Residency,
    pub page_count: u64,
    pub pinned: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataConfig {
    #[serde(default = "default_entries_per_segment")]
    pub entries_per_segment: usize,
    /// Worst-case concurrent requests the flat layout would be sized for.
    #[serde(default = "default_max_batch")]
    pub max_batch: u64,
    /// Segments per table pool; sized for the worst case when absent.
    #[serde(default)]
    pub pool_segments: Option<usize>,
}

fn default_entries_per_segment() -> usize {
    256
}

fn default_max_batch() -> u64 {
    32
}

impl Default for MetadataConfig {
    fn default() -> Self {
        Self {
            entries_per_segment: default_entries_per_segment(),
            max_batch: default_max_batch(),
            pool_segments: None,
        }
    }
}

/// Per-head sizes of the flat (worst-case) tables and derived widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableLayout {
    pub page_size: u64,
    pub page_bytes: u64,
    pub entries_per_segment: usize,
    pub max_batch: u64,
    pub heads_per_request: u64,
    pub max_partitions_per_head: u64,
    pub max_host_pages_per_head: u64,
    pub max_device_pages_per_head: u64,
    pub device_entry_bytes: u64,
    pub n_buckets: u16,
}

impl TableLayout {
    pub fn new(
        model: &ModelShape,
        sparse: &SparseConfig,
        meta: &MetadataConfig,
        n_buckets: u16,
    ) -> Self {
        let n_max = model.max_context;
        let (max_partitions, max_host_pages) = match sparse.partition_granularity {
            Granularity::Fixed(g) => {
                let parts = n_max.div_ceil(g);
                (parts, parts * g.div_ceil(sparse.page_size))
            }
            // Worst case: single-token partitions, one page each.
            Granularity::Variable => (n_max, n_max),
        };
        Self {
            page_size: sparse.page_size,
            page_bytes: page_bytes(model, sparse),
            entries_per_segment: meta.entries_per_segment,
            max_batch: meta.max_batch,
            heads_per_request: model.heads_per_request(),
            max_partitions_per_head: max_partitions,
            max_host_pages_per_head: max_host_pages,
            max_device_pages_per_head: n_max.div_ceil(sparse.page_size),
            device_entry_bytes: if n_buckets > 256 {
                WIDE_DEVICE_PAGE_ENTRY_BYTES
            } else {
                DEVICE_PAGE_ENTRY_BYTES
            },
            n_buckets,
        }
    }

    pub fn max_heads(&self) -> u64 {
        self.max_batch * self.heads_per_request
    }
}

#[derive(Debug, Clone)]
pub struct HeadTables {
    pub(crate) meta: Directory,
    pub(crate) dpt: Directory,
    pub(crate) offsets: Directory,
    pub(crate) host: Directory,
    pub(crate) num_partitions: u32,
    pub(crate) context_tokens: u64,
    pub(crate) host_len: u32,
    pub(crate) device_capacity: u32,
    pub(crate) pinned_pages: u32,
    pub(crate) pinned_ids: Vec<PartitionId>,
    pub(crate) last_step: Option<u64>,
}

impl HeadTables {
    pub fn num_partitions(&self) -> u32 {
        self.num_partitions
    }

    pub fn context_tokens(&self) -> u64 {
        self.context_tokens
    }

    pub fn device_capacity(&self) -> u32 {
        self.device_capacity
    }

    pub fn pinned_pages(&self) -> u32 {
        self.pinned_pages
    }

    pub fn pinned_ids(&self) -> &[PartitionId] {
        &self.pinned_ids
    }

    pub fn host_pages(&self) -> u32 {
        self.host_len
    }
}

/// The four mapping tables for every registered head, each indexed through
/// per-head directories into a pool shared by all heads.
///
/// Device tier: Meta-partition table and device page table.
/// Host tier: Partition Offset table and the flat host page array.
#[derive(Debug, Clone)]
pub struct MetadataStore {
    pub(crate) layout: TableLayout,
    pub(crate) meta_pool: SegmentPool<MetaPartitionEntry>,
    pub(crate) dpt_pool: SegmentPool<DevicePageEntry>,
    pub(crate) offset_pool: SegmentPool<PartitionOffsetEntry>,
    pub(crate) host_pool: SegmentPool<HostPageId>,
    pub(crate) heads: BTreeMap<HeadKey, HeadTables>,
    host_pages_limit: u64,
    host_pages_used: u64,
    device_pages_limit: u64,
    device_pages_used: u64,
}

impl MetadataStore {
    pub fn new(
        model: &ModelShape,
        sparse: &SparseConfig,
        tiers: &TierParams,
        meta: &MetadataConfig,
        n_buckets: u16,
    ) -> Self {
        let layout = TableLayout::new(model, sparse, meta, n_buckets);
        let eps = meta.entries_per_segment as u64;
        let heads = layout.max_heads();
        let device_pages_limit = tiers.device_capacity / layout.page_bytes;
        let worst = |per_head: u64| (heads * per_head.div_ceil(eps)) as usize;
        let pool = |per_head: u64| meta.pool_segments.unwrap_or_else(|| worst(per_head));
        // Device page table segments are bounded by device memory, plus one
        // partially filled segment per head.
        let dpt_segments = meta.pool_segments.unwrap_or_else(|| {
            worst(layout.max_device_pages_per_head)
                .min((device_pages_limit.div_ceil(eps) + heads) as usize)
        });
        Self {
            meta_pool: SegmentPool::new(
                pool(layout.max_partitions_per_head),
                meta.entries_per_segment,
            ),
            dpt_pool: SegmentPool::new(dpt_segments, meta.entries_per_segment),
            offset_pool: SegmentPool::new(
                pool(layout.max_partitions_per_head),
                meta.entries_per_segment,
            ),
            host_pool: SegmentPool::new(
                pool(layout.max_host_pages_per_head),
                meta.entries_per_segment,
            ),
            heads: BTreeMap::new(),
            host_pages_limit: tiers.host_capacity / layout.page_bytes,
            host_pages_used: 0,
            device_pages_limit,
            device_pages_used: 0,
            layout,
        }
    }

    pub fn layout(&self) -> &TableLayout {
        &self.layout
    }

    pub fn page_size(&self) -> u64 {
        self.layout.page_size
    }

    pub fn page_count(&self, tokens: u64) -> u64 {
        tokens.div_ceil(self.layout.page_size)
    }

    pub fn head(&self, key: &HeadKey) -> Result<&HeadTables> {
        self.heads.get(key).ok_or(Error::UnknownHead(*key))
    }

    pub fn heads(&self) -> impl Iterator<Item = (&HeadKey, &HeadTables)> {
        self.heads.iter()
    }

    pub fn host_pages_used(&self) -> u64 {
        self.host_pages_used
    }

    pub fn host_pages_free(&self) -> u64 {
        self.host_pages_limit - self.host_pages_used
    }

    pub fn device_pages_used(&self) -> u64 {
        self.device_pages_used
    }

    pub fn device_pages_limit(&self) -> u64 {
        self.device_pages_limit
    }

    pub(crate) fn meta_entry(&self, head: &HeadTables, id: PartitionId) -> Result<MetaPartitionEntry> {
        if id >= head.num_partitions {
            return Err(Error::UnknownPartition(id));
        }
        head.meta
            .get(&self.meta_pool, id as usize)
            .ok_or(Error::UnknownPartition(id))
    }

    pub(crate) fn set_residency(&mut self, key: &HeadKey, id: PartitionId, residency: Residency) {
        let head = self.heads.get_mut(key).expect("head checked by caller");
        let mut entry = head
            .meta
            .get(&self.meta_pool, id as usize)
            .expect("partition checked by caller");
        entry.residency = residency;
        head.meta
            .set(&mut self.meta_pool, id as usize, entry)
            .expect("segment already mapped");
    }

    /// Registers the partitions of `spec` for `key`, continuing at the head's
    /// current context end. Pinned partitions take device pages; the rest
    /// take host pages and get Partition Offset entries.
    pub fn register_partitions(
        &mut self,
        key: HeadKey,
        spec: &PartitionSpec,
    ) -> Result<Vec<PartitionId>> {
        let counts = spec.token_counts()?;
        let (context, num_partitions, capacity, free_device) = match self.heads.get(&key) {
            Some(h) => (
                h.context_tokens,
                h.num_partitions as u64,
                h.device_capacity as u64,
                self.free_device_slots(h).len() as u64,
            ),
            None => (0, 0, 0, 0),
        };
        if spec.start < context {
            return Err(Error::OverlappingSpec {
                start: spec.start,
                context,
            });
        }
        if spec.start > context {
            return Err(Error::GappedSpec {
                start: spec.start,
                context,
            });
        }
        if counts.is_empty() {
            return Ok(Vec::new());
        }
        if num_partitions + counts.len() as u64 > self.layout.max_partitions_per_head {
            return Err(Error::InvalidSpecParams(format!(
                "{} partitions exceed the per-head maximum {}",
                num_partitions + counts.len() as u64,
                self.layout.max_partitions_per_head
            )));
        }

        let mut host_needed = 0;
        let mut device_needed = 0;
        for (i, &c) in counts.iter().enumerate() {
            if spec.pinned.contains(&(i as u32)) {
                device_needed += self.page_count(c);
            } else {
                host_needed += self.page_count(c);
            }
        }
        if host_needed > self.host_pages_free() {
            return Err(Error::HostCapacityExceeded {
                needed: host_needed,
                available: self.host_pages_free(),
            });
        }
        let grow = device_needed.saturating_sub(free_device);
        if grow > 0 {
            let available = (self.device_pages_limit - self.device_pages_used)
                .min(self.layout.max_device_pages_per_head - capacity);
            if grow > available {
                return Err(Error::DeviceCapacityExceeded {
                    needed: grow,
                    available,
                });
            }
        }

        let layout = self.layout;
        let head = self.heads.entry(key).or_insert_with(|| HeadTables {
            meta: Directory::new(layout.max_partitions_per_head as usize, layout.entries_per_segment),
            dpt: Directory::new(layout.max_device_pages_per_head as usize, layout.entries_per_segment),
            offsets: Directory::new(layout.max_partitions_per_head as usize, layout.entries_per_segment),
            host: Directory::new(layout.max_host_pages_per_head as usize, layout.entries_per_segment),
            num_partitions: 0,
            context_tokens: 0,
            host_len: 0,
            device_capacity: 0,
            pinned_pages: 0,
            pinned_ids: Vec::new(),
            last_step: None,
        });
        head.device_capacity += grow as u32;
        self.device_pages_used += grow;

        let mut free_slots = free_slots_of(head, &self.dpt_pool).into_iter();
        let mut ids = Vec::with_capacity(counts.len());
        for (i, &tokens) in counts.iter().enumerate() {
            let id = head.num_partitions;
            let pages = tokens.div_ceil(layout.page_size) as u32;
            let pinned = spec.pinned.contains(&(i as u32));
            head.meta.set(
                &mut self.meta_pool,
                id as usize,
                MetaPartitionEntry {
                    token_count: tokens as u32,
                    residency: if pinned {
                        Residency::DeviceResident
                    } else {
                        Residency::HostOnly
                    },
                    pinned,
                },
            )?;
            if pinned {
                for _ in 0..pages {
                    let slot = free_slots.next().expect("device slots reserved above");
                    head.dpt.set(
                        &mut self.dpt_pool,
                        slot as usize,
                        DevicePageEntry {
                            partition: id,
                            timestamp: layout.n_buckets - 1,
                            valid: true,
                            pinned: true,
                        },
                    )?;
                }
                head.pinned_pages += pages;
                head.pinned_ids.push(id);
            } else {
                head.offsets.set(
                    &mut self.offset_pool,
                    id as usize,
                    PartitionOffsetEntry {
                        start_offset: head.host_len,
                        page_count: pages,
                    },
                )?;
                for _ in 0..pages {
                    // Per-head arena, lowest free id first; pages are only
                    // released with the whole head, so ids are sequential.
                    let page = head.host_len;
                    head.host.set(&mut self.host_pool, page as usize, page)?;
                    head.host_len += 1;
                }
                self.host_pages_used += pages as u64;
            }
            head.num_partitions += 1;
            ids.push(id);
        }
        head.context_tokens = spec.end;
        Ok(ids)
    }

    pub fn lookup_meta(&self, key: &HeadKey, ids: &[PartitionId]) -> Result<Vec<PartitionInfo>> {
        let head = self.head(key)?;
        ids.iter()
            .map(|&id| {
                let e = self.meta_entry(head, id)?;
                Ok(PartitionInfo {
                    token_count: e.token_count as u64,
                    residency: e.residency,
                    page_count: self.page_count(e.token_count as u64),
                    pinned: e.pinned,
                })
            })
            .collect()
    }

    /// Host page ids of a partition: the contiguous slice of the host page
    /// array starting at its Partition Offset entry.
    pub fn cpu_pages_of(&self, key: &HeadKey, id: PartitionId) -> Result<Vec<HostPageId>> {
        let head = self.head(key)?;
        let meta = self.meta_entry(head, id)?;
        if meta.pinned {
            return Err(Error::NotOffloaded(id));
        }
        let off = head
            .offsets
            .get(&self.offset_pool, id as usize)
            .ok_or(Error::UnknownPartition(id))?;
        (off.start_offset..off.start_offset + off.page_count)
            .map(|i| {
                head.host
                    .get(&self.host_pool, i as usize)
                    .ok_or_else(|| Error::Invariant(format!("host page slot {i} unmapped")))
            })
            .collect()
    }

    pub fn device_page(&self, key: &HeadKey, page: DevicePageId) -> Result<Option<DevicePageEntry>> {
        let head = self.head(key)?;
        if page >= head.device_capacity {
            return Ok(None);
        }
        Ok(head.dpt.get(&self.dpt_pool, page as usize).filter(|e| e.valid))
    }

    /// Valid device page entries of a head, in page order.
    pub fn device_pages(&self, key: &HeadKey) -> Result<Vec<(DevicePageId, DevicePageEntry)>> {
        let head = self.head(key)?;
        Ok((0..head.device_capacity)
            .filter_map(|p| {
                head.dpt
                    .get(&self.dpt_pool, p as usize)
                    .filter(|e| e.valid)
                    .map(|e| (p, e))
            })
            .collect())
    }

    fn free_device_slots(&self, head: &HeadTables) -> Vec<DevicePageId> {
        free_slots_of(head, &self.dpt_pool)
    }

    /// Grows a head's device page table to `pages` slots.
    pub fn grow_device(&mut self, key: &HeadKey, pages: u32) -> Result<()> {
        let limit = self.device_pages_limit;
        let max_per_head = self.layout.max_device_pages_per_head;
        let used = self.device_pages_used;
        let head = self.heads.get_mut(key).ok_or(Error::UnknownHead(*key))?;
        if pages <= head.device_capacity {
            return Ok(());
        }
        let grow = (pages - head.device_capacity) as u64;
        let available = (limit - used).min(max_per_head - head.device_capacity as u64);
        if grow > available {
            return Err(Error::DeviceCapacityExceeded {
                needed: grow,
                available,
            });
        }
        head.device_capacity = pages;
        self.device_pages_used += grow;
        Ok(())
    }

    /// Shrinks a head's device page table to `pages` slots by cutting its tail.
    ///
    /// Unprotected partitions with pages in the tail are evicted. Pinned and
    /// `protected` partitions are relocated into free slots below the cut,
    /// evicting the oldest unprotected partitions there if needed. Returns the
    /// evicted partition ids.
    pub fn shrink_device(
        &mut self,
        key: &HeadKey,
        pages: u32,
        protected: &HashSet<PartitionId>,
    ) -> Result<Vec<PartitionId>> {
        let head = self.heads.get(key).ok_or(Error::UnknownHead(*key))?;
        let cap = head.device_capacity;
        if pages >= cap {
            return Ok(Vec::new());
        }
        let keep = |e: &DevicePageEntry| e.pinned || protected.contains(&e.partition);

        let mut by_partition: HashMap<PartitionId, Vec<DevicePageId>> = HashMap::new();
        let mut entries = vec![DevicePageEntry::default(); cap as usize];
        for p in 0..cap {
            if let Some(e) = head.dpt.get(&self.dpt_pool, p as usize).filter(|e| e.valid) {
                by_partition.entry(e.partition).or_default().push(p);
                entries[p as usize] = e;
            }
        }

        let mut evict: Vec<PartitionId> = Vec::new();
        let mut evicted: HashSet<PartitionId> = HashSet::new();
        let mut must_move = 0u32;
        for p in pages..cap {
            let e = entries[p as usize];
            if !e.valid {
                continue;
            }
            if keep(&e) {
                must_move += 1;
            } else if evicted.insert(e.partition) {
                evict.push(e.partition);
            }
        }
        let mut free_below: Vec<DevicePageId> = (0..pages)
            .filter(|&p| {
                let e = entries[p as usize];
                !e.valid || evicted.contains(&e.partition)
            })
            .collect();
        if (free_below.len() as u32) < must_move {
            let mut candidates: Vec<(u16, DevicePageId, PartitionId)> = (0..pages)
                .filter_map(|p| {
                    let e = entries[p as usize];
                    (e.valid && !keep(&e) && !evicted.contains(&e.partition))
                        .then_some((e.timestamp, p, e.partition))
                })
                .collect();
            candidates.sort_unstable();
            for (_, _, pid) in candidates {
                if free_below.len() as u32 >= must_move {
                    break;
                }
                if evicted.insert(pid) {
                    evict.push(pid);
                    free_below.extend(by_partition[&pid].iter().filter(|&&p| p < pages));
                }
            }
            if (free_below.len() as u32) < must_move {
                return Err(Error::InsufficientBuffer {
                    demand: must_move as u64,
                    available: free_below.len() as u64,
                });
            }
            free_below.sort_unstable();
        }

        let head = self.heads.get_mut(key).expect("checked above");
        for pid in &evict {
            for &p in &by_partition[pid] {
                head.dpt
                    .set(&mut self.dpt_pool, p as usize, DevicePageEntry::default())?;
            }
        }
        let mut targets = free_below.into_iter();
        for p in pages..cap {
            let e = entries[p as usize];
            if e.valid && keep(&e) {
                let to = targets.next().expect("enough free slots checked");
                head.dpt.set(&mut self.dpt_pool, to as usize, e)?;
            }
        }
        head.dpt.truncate(&mut self.dpt_pool, pages as usize);
        head.device_capacity = pages;
        self.device_pages_used -= (cap - pages) as u64;
        for &pid in &evict {
            self.set_residency(key, pid, Residency::HostOnly);
        }
        Ok(evict)
    }

    /// Drops every cached (non-pinned) partition of a head without changing
    /// its capacity.
    pub fn invalidate_unpinned(&mut self, key: &HeadKey) -> Result<Vec<PartitionId>> {
        let head = self.heads.get_mut(key).ok_or(Error::UnknownHead(*key))?;
        let mut dropped = Vec::new();
        for p in 0..head.device_capacity as usize {
            if let Some(e) = head.dpt.get(&self.dpt_pool, p).filter(|e| e.valid && !e.pinned) {
                head.dpt.set(&mut self.dpt_pool, p, DevicePageEntry::default())?;
                if !dropped.contains(&e.partition) {
                    dropped.push(e.partition);
                }
            }
        }
        for &pid in &dropped {
            self.set_residency(key, pid, Residency::HostOnly);
        }
        Ok(dropped)
    }

    /// Releases a head: its segments, host pages and device pages.
    pub fn release_head(&mut self, key: &HeadKey) -> Result<()> {
        let mut head = self.heads.remove(key).ok_or(Error::UnknownHead(*key))?;
        head.meta.release(&mut self.meta_pool);
        head.dpt.release(&mut self.dpt_pool);
        head.offsets.release(&mut self.offset_pool);
        head.host.release(&mut self.host_pool);
        self.host_pages_used -= head.host_len as u64;
        self.device_pages_used -= head.device_capacity as u64;
        Ok(())
    }

    pub fn release_request(&mut self, request: RequestId) {
        let keys: Vec<HeadKey> = self
            .heads
            .keys()
            .filter(|k| k.request == request)
            .copied()
            .collect();
        for k in keys {
            self.release_head(&k).expect("key just listed");
        }
    }
}

fn free_slots_of(head: &HeadTables, pool: &SegmentPool<DevicePageEntry>) -> Vec<DevicePageId> {
    (0..head.device_capacity)
        .filter(|&p| !head.dpt.get(pool, p as usize).is_some_and(|e| e.valid))
        .collect()
}
