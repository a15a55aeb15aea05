//! Two-level indexing: a fixed directory per table instance whose slots point
//! into a shared, pre-sized pool of fixed-length segments. Segments are handed
//! out by a bitmap allocator, lowest free index first.

use crate::error::{Error, Result};

/// One bit per pool segment; set means in use.
#[derive(Debug, Clone)]
pub struct SegmentBitmap {
    words: Vec<u64>,
    capacity: usize,
    used: usize,
}

impl SegmentBitmap {
    pub fn new(capacity: usize) -> Self {
        Self {
            words: vec![0; capacity.div_ceil(64)],
            capacity,
            used: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn count(&self) -> usize {
        self.used
    }

    pub fn is_set(&self, idx: usize) -> bool {
        idx < self.capacity && self.words[idx / 64] & (1 << (idx % 64)) != 0
    }

    /// Sets and returns the lowest clear bit.
    pub fn alloc(&mut self) -> Result<usize> {
        for (w, word) in self.words.iter_mut().enumerate() {
            if *word != u64::MAX {
                let idx = w * 64 + word.trailing_ones() as usize;
                if idx >= self.capacity {
                    break;
                }
                *word |= 1 << (idx % 64);
                self.used += 1;
                return Ok(idx);
            }
        }
        Err(Error::PoolExhausted {
            capacity: self.capacity,
        })
    }

    pub fn free(&mut self, idx: usize) -> Result<()> {
        if !self.is_set(idx) {
            return Err(Error::DoubleFree(idx));
        }
        self.words[idx / 64] &= !(1 << (idx % 64));
        self.used -= 1;
        Ok(())
    }
}

/// Pre-sized pool of `entries_per_segment`-long segments shared by many directories.
///
/// Backing storage is materialised the first time a segment index is handed
/// out, so an oversized pool costs only its bitmap.
#[derive(Debug, Clone)]
pub struct SegmentPool<T> {
    bitmap: SegmentBitmap,
    entries_per_segment: usize,
    storage: Vec<Box<[T]>>,
}

impl<T: Copy + Default> SegmentPool<T> {
    pub fn new(capacity_segments: usize, entries_per_segment: usize) -> Self {
        assert!(entries_per_segment > 0, "entries_per_segment must be positive");
        Self {
            bitmap: SegmentBitmap::new(capacity_segments),
            entries_per_segment,
            storage: Vec::new(),
        }
    }

    pub fn entries_per_segment(&self) -> usize {
        self.entries_per_segment
    }

    pub fn capacity(&self) -> usize {
        self.bitmap.capacity()
    }

    pub fn mapped_segments(&self) -> usize {
        self.bitmap.count()
    }

    pub fn is_allocated(&self, idx: usize) -> bool {
        self.bitmap.is_set(idx)
    }

    /// Allocates the lowest free segment; its entries read as `T::default()`.
    pub fn alloc(&mut self) -> Result<usize> {
        let idx = self.bitmap.alloc()?;
        while self.storage.len() <= idx {
            self.storage
                .push(vec![T::default(); self.entries_per_segment].into_boxed_slice());
        }
        self.storage[idx].fill(T::default());
        Ok(idx)
    }

    pub fn free(&mut self, idx: usize) -> Result<()> {
        self.bitmap.free(idx)
    }

    fn segment(&self, idx: usize) -> &[T] {
        debug_assert!(self.bitmap.is_set(idx));
        &self.storage[idx]
    }

    fn segment_mut(&mut self, idx: usize) -> &mut [T] {
        debug_assert!(self.bitmap.is_set(idx));
        &mut self.storage[idx]
    }
}

/// Fixed top-level array of segment references for one logical table.
#[derive(Debug, Clone)]
pub struct Directory {
    slots: Box<[Option<u32>]>,
}

impl Directory {
    pub fn new(logical_len: usize, entries_per_segment: usize) -> Self {
        Self {
            slots: vec![None; logical_len.div_ceil(entries_per_segment)].into_boxed_slice(),
        }
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn mapped_slots(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn slot(&self, slot: usize) -> Option<usize> {
        self.slots[slot].map(|s| s as usize)
    }

    /// Reads entry `idx`; unmapped entries yield `None` without touching the pool.
    pub fn get<T: Copy + Default>(&self, pool: &SegmentPool<T>, idx: usize) -> Option<T> {
        let eps = pool.entries_per_segment();
        self.slots[idx / eps].map(|seg| pool.segment(seg as usize)[idx % eps])
    }

    /// Writes entry `idx`, mapping its segment on first touch.
    pub fn set<T: Copy + Default>(
        &mut self,
        pool: &mut SegmentPool<T>,
        idx: usize,
        value: T,
    ) -> Result<()> {
        let eps = pool.entries_per_segment();
        let slot = idx / eps;
        let seg = match self.slots[slot] {
            Some(seg) => seg as usize,
            None => {
                let seg = pool.alloc()?;
                self.slots[slot] = Some(seg as u32);
                seg
            }
        };
        pool.segment_mut(seg)[idx % eps] = value;
        Ok(())
    }

    /// Drops every entry at or beyond `len`: whole segments go back to the
    /// pool, the straddling segment is reset in place.
    pub fn truncate<T: Copy + Default>(&mut self, pool: &mut SegmentPool<T>, len: usize) {
        let eps = pool.entries_per_segment();
        let keep_slots = len.div_ceil(eps);
        for slot in keep_slots..self.slots.len() {
            if let Some(seg) = self.slots[slot].take() {
                pool.free(seg as usize).expect("directory referenced a free segment");
            }
        }
        if !len.is_multiple_of(eps) {
            if let Some(seg) = self.slots[len / eps] {
                pool.segment_mut(seg as usize)[len % eps..].fill(T::default());
            }
        }
    }

    pub fn release<T: Copy + Default>(&mut self, pool: &mut SegmentPool<T>) {
        self.truncate(pool, 0);
    }

    /// Unmaps whichever slot references pool segment `seg`.
    fn unmap_segment(&mut self, seg: usize) -> bool {
        match self.slots.iter_mut().find(|s| **s == Some(seg as u32)) {
            Some(s) => {
                *s = None;
                true
            }
            None => false,
        }
    }

    fn map_slot(&mut self, slot: usize, seg: usize) {
        self.slots[slot] = Some(seg as u32);
    }
}

/// A single directory with its own pool: the standalone form of the
/// two-level scheme, used where one table does not share a pool.
#[derive(Debug, Clone)]
pub struct TwoLevelTable<T> {
    directory: Directory,
    pool: SegmentPool<T>,
    logical_len: usize,
}

impl<T: Copy + Default> TwoLevelTable<T> {
    pub fn new(logical_len: usize, entries_per_segment: usize, pool_segments: usize) -> Self {
        Self {
            directory: Directory::new(logical_len, entries_per_segment),
            pool: SegmentPool::new(pool_segments, entries_per_segment),
            logical_len,
        }
    }

    pub fn logical_len(&self) -> usize {
        self.logical_len
    }

    pub fn entries_per_segment(&self) -> usize {
        self.pool.entries_per_segment()
    }

    pub fn get(&self, idx: usize) -> Option<T> {
        assert!(idx < self.logical_len, "index {idx} beyond logical length");
        self.directory.get(&self.pool, idx)
    }

    pub fn set(&mut self, idx: usize, value: T) -> Result<()> {
        assert!(idx < self.logical_len, "index {idx} beyond logical length");
        self.directory.set(&mut self.pool, idx, value)
    }

    pub fn truncate(&mut self, len: usize) {
        self.directory.truncate(&mut self.pool, len);
    }

    /// Takes the lowest free pool segment and maps it at the first unmapped
    /// directory slot.
    pub fn segment_alloc(&mut self) -> Result<usize> {
        let slot = (0..self.directory.num_slots())
            .find(|&s| self.directory.slot(s).is_none())
            .ok_or(Error::PoolExhausted {
                capacity: self.pool.capacity(),
            })?;
        let seg = self.pool.alloc()?;
        self.directory.map_slot(slot, seg);
        Ok(seg)
    }

    /// Returns segment `seg` to the pool and unmaps the slot that referenced it.
    pub fn segment_free(&mut self, seg: usize) -> Result<()> {
        self.pool.free(seg)?;
        self.directory.unmap_segment(seg);
        Ok(())
    }

    pub fn mapped_segments(&self) -> usize {
        self.pool.mapped_segments()
    }

    pub fn directory(&self) -> &Directory {
        &self.directory
    }

    /// Bytes held in mapped segments at `entry_width` bytes per entry.
    pub fn physical_bytes(&self, entry_width: u64) -> u64 {
        (self.mapped_segments() * self.entries_per_segment()) as u64 * entry_width
    }

    pub fn logical_bytes(&self, entry_width: u64) -> u64 {
        self.logical_len as u64 * entry_width
    }
}
