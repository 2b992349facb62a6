//! Randomized fixed-pool allocator for the per-cycle process stack and
//! buffers.
//!
//! Placement draws a start address from an [`EntropySource`], tests it
//! against every live region, and retries a bounded number of times on
//! conflict. Three deliberate departures from the textbook pseudo-code:
//! overlap is tested on closed intervals, the capacity guard rejects at
//! `count == max`, and every start is aligned.

use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::Address;

pub const DEFAULT_POOL_SIZE: u32 = 5632;
pub const DEFAULT_MAX_REGIONS: usize = 6;
pub const DEFAULT_RETRY_BUDGET: u32 = 3;
pub const DEFAULT_ALIGNMENT: u32 = 8;

/// Bytes per exported table slot: handle, start, size as little-endian u32.
pub const SLOT_BYTES: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryPool {
    pub base: Address,
    pub size: u32,
}

impl MemoryPool {
    pub fn end_inclusive(&self) -> u32 {
        self.base.0 + (self.size - 1)
    }

    fn first_aligned(&self, alignment: u32) -> u64 {
        u64::from(self.base.0).div_ceil(u64::from(alignment)) * u64::from(alignment)
    }

    /// Number of aligned starts `s` with `[s, s+size)` inside the pool.
    pub fn feasible_starts(&self, size: u32, alignment: u32) -> u32 {
        let first = self.first_aligned(alignment);
        let last_start = u64::from(self.base.0) + u64::from(self.size);
        if size == 0 || u64::from(size) > last_start - first.min(last_start) {
            return 0;
        }
        let span = last_start - u64::from(size) - first;
        (span / u64::from(alignment) + 1) as u32
    }

    /// The `index`-th feasible aligned start.
    pub fn start_at(&self, index: u32, alignment: u32) -> Address {
        Address((self.first_aligned(alignment) + u64::from(index) * u64::from(alignment)) as u32)
    }
}

/// Closed interval `[start, end]` of byte addresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interval {
    pub start: u32,
    pub end: u32,
}

impl Interval {
    pub fn new(start: u32, end: u32) -> Self {
        debug_assert!(start <= end);
        Interval { start, end }
    }
}

/// Closed-interval intersection test. Two intervals sharing even one byte
/// overlap; adjacent intervals do not.
pub fn overlaps(a: Interval, b: Interval) -> bool {
    a.start.max(b.start) <= a.end.min(b.end)
}

/// Opaque identifier of a live pool region. Never zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegionHandle(u32);

impl RegionHandle {
    pub fn from_raw(raw: u32) -> Self {
        RegionHandle(raw)
    }

    pub fn raw(self) -> u32 {
        self.0
    }
}

impl fmt::Display for RegionHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocatedRegion {
    pub handle: RegionHandle,
    pub start: Address,
    pub size: u32,
}

impl AllocatedRegion {
    pub fn interval(&self) -> Interval {
        Interval::new(self.start.0, self.end_inclusive())
    }

    pub fn end_inclusive(&self) -> u32 {
        self.start.0 + (self.size - 1)
    }

    /// Initial PSP for a full-descending stack in this region (one past the top).
    pub fn stack_top(&self) -> Address {
        Address(self.start.0 + self.size)
    }

    /// A stack pointer is valid anywhere from one past the top down to one
    /// byte above the start.
    pub fn holds_stack_pointer(&self, sp: Address) -> bool {
        sp.0 > self.start.0 && u64::from(sp.0) <= u64::from(self.start.0) + u64::from(self.size)
    }

    pub fn contains(&self, addr: Address) -> bool {
        addr.0 >= self.start.0 && addr.0 <= self.end_inclusive()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AllocError {
    #[error("request of {size} bytes is empty or larger than the {pool} byte pool")]
    InvalidSize { size: u32, pool: u32 },
    #[error("region table full ({max} regions)")]
    TableFull { max: usize },
    #[error("no conflict-free placement after {retries} retries")]
    Exhausted { retries: u32 },
    #[error("no region with handle {0}")]
    NotFound(RegionHandle),
    #[error("fixed placement at {start} for {size} bytes is misaligned or outside the pool")]
    BadPlacement { start: Address, size: u32 },
    #[error("fixed placement at {start} conflicts with a live region")]
    Conflict { start: Address },
    #[error("allocation set is empty")]
    EmptySet,
    #[error("exported table is malformed: {0}")]
    Malformed(&'static str),
}

impl AllocError {
    /// True for the two outcomes the allocator reports as a null pointer.
    pub fn is_null(&self) -> bool {
        matches!(self, AllocError::TableFull { .. } | AllocError::Exhausted { .. })
    }
}

/// The live-region record table, in insertion order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RegionTable {
    regions: Vec<AllocatedRegion>,
    max_allocate_num: usize,
}

impl RegionTable {
    pub fn new(max_allocate_num: usize) -> Self {
        RegionTable { regions: Vec::with_capacity(max_allocate_num), max_allocate_num }
    }

    pub fn regions(&self) -> &[AllocatedRegion] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn max_allocate_num(&self) -> usize {
        self.max_allocate_num
    }

    pub fn get(&self, handle: RegionHandle) -> Option<&AllocatedRegion> {
        self.regions.iter().find(|r| r.handle == handle)
    }

    pub fn conflicts(&self, candidate: Interval) -> bool {
        self.regions.iter().any(|r| overlaps(r.interval(), candidate))
    }

    pub fn holds_stack_pointer(&self, sp: Address) -> bool {
        self.regions.iter().any(|r| r.holds_stack_pointer(sp))
    }

    pub fn allocated_bytes(&self) -> u64 {
        self.regions.iter().map(|r| u64::from(r.size)).sum()
    }

    /// Little-endian `(handle, start, size)` triples, one slot per
    /// `max_allocate_num`, unused slots zeroed. Six slots give 72 bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.max_allocate_num * SLOT_BYTES];
        for (slot, r) in out.chunks_exact_mut(SLOT_BYTES).zip(&self.regions) {
            slot[0..4].copy_from_slice(&r.handle.0.to_le_bytes());
            slot[4..8].copy_from_slice(&r.start.0.to_le_bytes());
            slot[8..12].copy_from_slice(&r.size.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AllocError> {
        if !bytes.len().is_multiple_of(SLOT_BYTES) {
            return Err(AllocError::Malformed("length is not a multiple of the slot size"));
        }
        let mut table = RegionTable::new(bytes.len() / SLOT_BYTES);
        let mut seen_empty = false;
        for slot in bytes.chunks_exact(SLOT_BYTES) {
            let word = |i: usize| u32::from_le_bytes(slot[i..i + 4].try_into().unwrap());
            let (handle, start, size) = (word(0), word(4), word(8));
            if handle == 0 {
                if start != 0 || size != 0 {
                    return Err(AllocError::Malformed("unused slot is not zeroed"));
                }
                seen_empty = true;
                continue;
            }
            if seen_empty {
                return Err(AllocError::Malformed("live slot after an unused slot"));
            }
            if size == 0 {
                return Err(AllocError::Malformed("live slot with zero size"));
            }
            table.regions.push(AllocatedRegion { handle: RegionHandle(handle), start: Address(start), size });
        }
        Ok(table)
    }
}

/// Source of candidate start addresses.
///
/// Implementors only supply raw 32-bit draws; the provided
/// [`next_address`](EntropySource::next_address) maps a draw onto the
/// feasible aligned starts by reduction modulo their count, so every
/// returned address is aligned and leaves room for `size` bytes.
pub trait EntropySource {
    fn draw(&mut self) -> u32;

    fn next_address(&mut self, pool: &MemoryPool, size: u32, alignment: u32) -> Address {
        let n = pool.feasible_starts(size, alignment).max(1);
        pool.start_at(self.draw() % n, alignment)
    }
}

impl<R: RngCore + ?Sized> EntropySource for R {
    fn draw(&mut self) -> u32 {
        self.next_u32()
    }
}

/// Deterministic entropy for tests and reproducible runs.
pub fn seeded_entropy(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

/// Operating-system entropy for unseeded runs.
pub type OsEntropy = rand::rngs::OsRng;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AllocationStats {
    /// Placement draws, including retries.
    pub attempts: u64,
    pub realloc_retries: u64,
    pub successes: u64,
    pub failures: u64,
    /// `retry_histogram[k]` counts successful allocations that needed `k` retries.
    pub retry_histogram: Vec<u64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationOrder {
    Ascending,
    #[default]
    Descending,
    AsGiven,
}

impl AllocationOrder {
    /// Stable sort by size, so equal sizes keep their given order.
    pub fn arrange<T>(self, items: &mut [T], size: impl Fn(&T) -> u32) {
        match self {
            AllocationOrder::Ascending => items.sort_by_key(|i| size(i)),
            AllocationOrder::Descending => items.sort_by_key(|i| std::cmp::Reverse(size(i))),
            AllocationOrder::AsGiven => {}
        }
    }
}

impl fmt::Display for AllocationOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AllocationOrder::Ascending => "ascending",
            AllocationOrder::Descending => "descending",
            AllocationOrder::AsGiven => "as_given",
        })
    }
}

/// Pool, region table and retry policy for one machine.
#[derive(Clone, Debug)]
pub struct PoolAllocator {
    pool: MemoryPool,
    table: RegionTable,
    stats: AllocationStats,
    retry_budget: u32,
    alignment: u32,
    next_handle: u32,
}

impl PoolAllocator {
    pub fn new(pool: MemoryPool) -> Self {
        Self::with_policy(pool, DEFAULT_MAX_REGIONS, DEFAULT_RETRY_BUDGET, DEFAULT_ALIGNMENT)
    }

    pub fn with_policy(pool: MemoryPool, max_regions: usize, retry_budget: u32, alignment: u32) -> Self {
        assert!(alignment > 0 && alignment.is_power_of_two(), "alignment must be a power of two");
        PoolAllocator {
            pool,
            table: RegionTable::new(max_regions),
            stats: AllocationStats { retry_histogram: vec![0; retry_budget as usize + 1], ..Default::default() },
            retry_budget,
            alignment,
            next_handle: 1,
        }
    }

    pub fn pool(&self) -> &MemoryPool {
        &self.pool
    }

    pub fn table(&self) -> &RegionTable {
        &self.table
    }

    pub fn stats(&self) -> &AllocationStats {
        &self.stats
    }

    pub fn retry_budget(&self) -> u32 {
        self.retry_budget
    }

    pub fn alignment(&self) -> u32 {
        self.alignment
    }

    pub fn reset_stats(&mut self) {
        self.stats = AllocationStats { retry_histogram: vec![0; self.retry_budget as usize + 1], ..Default::default() };
    }

    fn fresh_handle(&mut self) -> RegionHandle {
        let h = self.next_handle;
        self.next_handle = self.next_handle.checked_add(1).unwrap_or(1);
        RegionHandle(h)
    }

    fn commit(&mut self, start: Address, size: u32, retries: u32) -> AllocatedRegion {
        let region = AllocatedRegion { handle: self.fresh_handle(), start, size };
        self.table.regions.push(region);
        self.stats.successes += 1;
        self.stats.retry_histogram[retries as usize] += 1;
        region
    }

    fn try_place(&mut self, rng: &mut dyn EntropySource, size: u32) -> Option<Address> {
        self.stats.attempts += 1;
        let start = rng.next_address(&self.pool, size, self.alignment);
        let candidate = Interval::new(start.0, start.0 + (size - 1));
        (!self.table.conflicts(candidate)).then_some(start)
    }

    /// Places `size` bytes at a random aligned start. On conflict the
    /// request falls through to the bounded retry path.
    pub fn mem_alloc(&mut self, rng: &mut dyn EntropySource, size: u32) -> Result<AllocatedRegion, AllocError> {
        if size == 0 || size > self.pool.size || self.pool.feasible_starts(size, self.alignment) == 0 {
            return Err(AllocError::InvalidSize { size, pool: self.pool.size });
        }
        if self.table.len() >= self.table.max_allocate_num {
            return Err(AllocError::TableFull { max: self.table.max_allocate_num });
        }
        match self.try_place(rng, size) {
            Some(start) => Ok(self.commit(start, size, 0)),
            None => self.mem_realloc(rng, size),
        }
    }

    /// Retry path: a fresh budget per logical allocation.
    fn mem_realloc(&mut self, rng: &mut dyn EntropySource, size: u32) -> Result<AllocatedRegion, AllocError> {
        for retry in 1..=self.retry_budget {
            self.stats.realloc_retries += 1;
            if let Some(start) = self.try_place(rng, size) {
                return Ok(self.commit(start, size, retry));
            }
        }
        self.stats.failures += 1;
        Err(AllocError::Exhausted { retries: self.retry_budget })
    }

    pub fn mem_free(&mut self, handle: RegionHandle) -> Result<AllocatedRegion, AllocError> {
        let idx = self.table.regions.iter().position(|r| r.handle == handle).ok_or(AllocError::NotFound(handle))?;
        Ok(self.table.regions.remove(idx))
    }

    /// Releases every live region.
    pub fn free_all(&mut self) {
        self.table.regions.clear();
    }

    /// Allocates a whole per-cycle set in the given order. All or nothing:
    /// on any failure the regions placed so far are released.
    pub fn alloc_cycle_set(
        &mut self,
        rng: &mut dyn EntropySource,
        sizes: &[u32],
    ) -> Result<Vec<AllocatedRegion>, AllocError> {
        if sizes.is_empty() {
            return Err(AllocError::EmptySet);
        }
        let mut placed = Vec::with_capacity(sizes.len());
        for &size in sizes {
            match self.mem_alloc(rng, size) {
                Ok(region) => placed.push(region),
                Err(err) => {
                    for region in placed {
                        self.mem_free(region.handle).expect("region placed in this call");
                    }
                    return Err(err);
                }
            }
        }
        Ok(placed)
    }

    /// Fixed placement for statically located stacks.
    pub fn reserve_at(&mut self, start: Address, size: u32) -> Result<AllocatedRegion, AllocError> {
        let inside = start.0 >= self.pool.base.0
            && size > 0
            && u64::from(start.0) + u64::from(size) <= u64::from(self.pool.base.0) + u64::from(self.pool.size);
        if !inside || !start.0.is_multiple_of(self.alignment) {
            return Err(AllocError::BadPlacement { start, size });
        }
        if self.table.len() >= self.table.max_allocate_num {
            return Err(AllocError::TableFull { max: self.table.max_allocate_num });
        }
        if self.table.conflicts(Interval::new(start.0, start.0 + (size - 1))) {
            return Err(AllocError::Conflict { start });
        }
        let region = AllocatedRegion { handle: self.fresh_handle(), start, size };
        self.table.regions.push(region);
        Ok(region)
    }

    /// Structural invariants: overlap-freedom, containment, capacity and
    /// conservation. Returns a description of the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let regions = &self.table.regions;
        if regions.len() > self.table.max_allocate_num {
            return Err(format!("{} regions exceed capacity {}", regions.len(), self.table.max_allocate_num));
        }
        for (i, a) in regions.iter().enumerate() {
            if a.size == 0 {
                return Err(format!("region {} has zero size", a.handle));
            }
            if a.start.0 < self.pool.base.0 || a.end_inclusive() > self.pool.end_inclusive() {
                return Err(format!("region {} escapes the pool", a.handle));
            }
            for b in &regions[i + 1..] {
                if overlaps(a.interval(), b.interval()) {
                    return Err(format!("regions {} and {} overlap", a.handle, b.handle));
                }
            }
        }
        if self.table.allocated_bytes() > u64::from(self.pool.size) {
            return Err("allocated bytes exceed pool size".into());
        }
        Ok(())
    }
}
