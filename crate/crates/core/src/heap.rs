//! Page-granular managed heap.
//!
//! Applications allocate their whole state into a [`ManagedHeap`]. Every
//! store into the heap goes through a write barrier that sets the dirty bit
//! of each touched page, and the allocator keeps a per-page count of live
//! extents so the checkpoint engine can tell pages holding only dead memory
//! apart from pages that still matter.
//!
//! The allocator keeps its own bookkeeping inside the managed pages: a
//! superblock at offset 0 and an address-ordered doubly linked list threaded
//! through the header of every live block. Only live pages are needed to
//! rebuild the allocation table, which is what lets a restored heap come back
//! from a checkpoint that skipped dead pages.
//!
//! ```text
//! offset 0                     64
//! +----------------------------+--------+-------------+--------+---------
//! | superblock (first, last)   | header | payload ... | header | ...
//! +----------------------------+--------+-------------+--------+---------
//!                                  |  ^                   |
//!                                  +--|-------next--------+
//!                                     +-------prev--------+
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::time::Duration;

use fixedbitset::FixedBitSet;
use parking_lot::{Condvar, Mutex, MutexGuard};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Size of the in-heap header that precedes every allocation.
pub const BLOCK_HEADER_SIZE: u64 = 32;
/// Size of the allocator superblock at offset 0 of page 0.
pub const SUPERBLOCK_SIZE: u64 = 64;

const ALIGN: u64 = 8;
const SUPERBLOCK_MAGIC: &[u8; 4] = b"CSHP";
const SUPERBLOCK_VERSION: u32 = 1;
const BLOCK_MAGIC: u32 = 0xB10C_A11C;

const SB_FIRST: u64 = 16;
const SB_LAST: u64 = 24;
const SB_COUNT: u64 = 32;

const HDR_LEN: u64 = 8;
const HDR_PREV: u64 = 16;
const HDR_NEXT: u64 = 24;

/// A set of heap page indices.
pub type PageSet = BTreeSet<u64>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HeapError {
    #[error("invalid heap configuration: {0}")]
    BadConfig(String),
    #[error("out of memory: need {needed} pages, limit is {max_pages}")]
    OutOfMemory { needed: u64, max_pages: u64 },
    #[error("allocation size must be non-zero")]
    ZeroSize,
    #[error("double free of object at {0:#x}")]
    DoubleFree(u64),
    #[error("no live object at {0:#x}")]
    InvalidRef(u64),
    #[error("access [{at}, {end}) outside object of length {len}")]
    OutOfBounds { at: u64, end: u64, len: u64 },
    #[error("a mutator did not reach a safepoint within {0:?}")]
    Timeout(Duration),
    #[error("world is not stopped")]
    WorldNotStopped,
    #[error("corrupt heap image: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeapConfig {
    pub page_size: usize,
    pub initial_pages: u64,
    pub max_pages: u64,
}

impl HeapConfig {
    pub fn new(page_size: usize, initial_pages: u64, max_pages: u64) -> Result<Self, HeapError> {
        let config = HeapConfig {
            page_size,
            initial_pages,
            max_pages,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), HeapError> {
        if self.page_size < 256 || !self.page_size.is_power_of_two() {
            return Err(HeapError::BadConfig(format!(
                "page size {} must be a power of two >= 256",
                self.page_size
            )));
        }
        if self.initial_pages > self.max_pages {
            return Err(HeapError::BadConfig(format!(
                "initial_pages {} exceeds max_pages {}",
                self.initial_pages, self.max_pages
            )));
        }
        if self.max_pages == 0 {
            return Err(HeapError::BadConfig("max_pages must be positive".into()));
        }
        Ok(())
    }
}

impl Default for HeapConfig {
    fn default() -> Self {
        HeapConfig {
            page_size: 4096,
            initial_pages: 16,
            max_pages: 1 << 18,
        }
    }
}

/// Offset of an object's payload in the heap address space.
///
/// Offsets do not depend on where the heap buffer lives in process memory, so
/// a reference taken before a checkpoint stays valid in the restored heap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectRef(u64);

impl ObjectRef {
    pub const fn from_offset(offset: u64) -> Self {
        ObjectRef(offset)
    }

    pub const fn offset(self) -> u64 {
        self.0
    }
}

fn align_up(n: u64) -> u64 {
    (n + ALIGN - 1) & !(ALIGN - 1)
}

/// The heap contents plus the allocator and tracking state.
///
/// Mutators reach it through [`ManagedHeap::mutate`]; the checkpoint agent
/// reaches it through a [`StoppedWorld`].
pub struct HeapSpace {
    page_size: u64,
    max_pages: u64,
    bytes: Vec<u8>,
    /// payload offset -> requested length
    allocs: BTreeMap<u64, u64>,
    free_by_addr: BTreeMap<u64, u64>,
    free_by_size: BTreeSet<(u64, u64)>,
    dirty: FixedBitSet,
    live_count: Vec<u32>,
    epoch: u64,
}

impl HeapSpace {
    fn new(config: &HeapConfig) -> Self {
        let pages = config.initial_pages.max(1);
        let page_size = config.page_size as u64;
        let mut space = HeapSpace {
            page_size,
            max_pages: config.max_pages,
            bytes: vec![0u8; (pages * page_size) as usize],
            allocs: BTreeMap::new(),
            free_by_addr: BTreeMap::new(),
            free_by_size: BTreeSet::new(),
            dirty: FixedBitSet::with_capacity(pages as usize),
            live_count: vec![0; pages as usize],
            epoch: 0,
        };
        space.insert_free(SUPERBLOCK_SIZE, pages * page_size - SUPERBLOCK_SIZE);
        space.adjust_live(0..SUPERBLOCK_SIZE, 1);
        let mut sb = [0u8; SUPERBLOCK_SIZE as usize];
        sb[0..4].copy_from_slice(SUPERBLOCK_MAGIC);
        sb[4..8].copy_from_slice(&SUPERBLOCK_VERSION.to_le_bytes());
        sb[8..16].copy_from_slice(&page_size.to_le_bytes());
        space.store(0, &sb);
        space
    }

    pub fn page_size(&self) -> usize {
        self.page_size as usize
    }

    /// Number of mapped pages.
    pub fn page_count(&self) -> u64 {
        self.live_count.len() as u64
    }

    pub fn max_pages(&self) -> u64 {
        self.max_pages
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Number of live allocations, excluding the superblock.
    pub fn object_count(&self) -> usize {
        self.allocs.len()
    }

    /// Sum of header plus requested length over live allocations.
    pub fn live_bytes(&self) -> u64 {
        self.allocs.values().map(|len| BLOCK_HEADER_SIZE + len).sum()
    }

    /// Live objects as (reference, requested length), ascending by offset.
    pub fn objects(&self) -> impl Iterator<Item = (ObjectRef, u64)> + '_ {
        self.allocs.iter().map(|(&off, &len)| (ObjectRef(off), len))
    }

    /// Free extents as (offset, length), ascending by offset.
    pub fn free_extents(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.free_by_addr.iter().map(|(&off, &len)| (off, len))
    }

    /// Byte extent occupied by a live object including its header.
    pub fn extent_of(&self, r: ObjectRef) -> Option<Range<u64>> {
        self.allocs
            .get(&r.0)
            .map(|&len| r.0 - BLOCK_HEADER_SIZE..r.0 + align_up(len))
    }

    pub fn object_len(&self, r: ObjectRef) -> Result<u64, HeapError> {
        self.allocs.get(&r.0).copied().ok_or(HeapError::InvalidRef(r.0))
    }

    pub fn is_dirty(&self, page: u64) -> bool {
        self.dirty.contains(page as usize)
    }

    pub fn is_live(&self, page: u64) -> bool {
        self.live_count.get(page as usize).is_some_and(|&c| c > 0)
    }

    pub fn dirty_pages(&self) -> PageSet {
        self.dirty.ones().map(|p| p as u64).collect()
    }

    pub fn live_pages(&self) -> PageSet {
        self.live_count
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(p, _)| p as u64)
            .collect()
    }

    pub fn page(&self, index: u64) -> &[u8] {
        let start = (index * self.page_size) as usize;
        &self.bytes[start..start + self.page_size as usize]
    }

    /// SHA-256 over (index, bytes) of every live page, truncated to 64 bits.
    pub fn live_page_hash(&self) -> u64 {
        let mut h = Sha256::new();
        for (index, &count) in self.live_count.iter().enumerate() {
            if count > 0 {
                h.update((index as u64).to_le_bytes());
                h.update(self.page(index as u64));
            }
        }
        digest_u64(h)
    }

    /// SHA-256 over every mapped byte, truncated to 64 bits.
    pub fn full_hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(&self.bytes);
        digest_u64(h)
    }

    pub fn alloc(&mut self, size: u64) -> Result<ObjectRef, HeapError> {
        if size == 0 {
            return Err(HeapError::ZeroSize);
        }
        let need = BLOCK_HEADER_SIZE + align_up(size);
        let (start, len) = match self.free_by_size.range((need, 0)..).next() {
            Some(&(len, start)) => (start, len),
            None => {
                self.grow_for(need)?;
                let &(len, start) = self
                    .free_by_size
                    .range((need, 0)..)
                    .next()
                    .expect("grown heap has a fitting extent");
                (start, len)
            }
        };
        self.remove_free(start, len);
        if len > need {
            self.insert_free(start + need, len - need);
        }

        let payload = start + BLOCK_HEADER_SIZE;
        self.fill_zero(start..start + need);

        let prev = self.allocs.range(..payload).next_back().map(|(&o, _)| o);
        let next = self.allocs.range(payload..).next().map(|(&o, _)| o);
        let mut hdr = [0u8; BLOCK_HEADER_SIZE as usize];
        hdr[0..4].copy_from_slice(&BLOCK_MAGIC.to_le_bytes());
        hdr[8..16].copy_from_slice(&size.to_le_bytes());
        hdr[16..24].copy_from_slice(&prev.unwrap_or(0).to_le_bytes());
        hdr[24..32].copy_from_slice(&next.unwrap_or(0).to_le_bytes());
        self.store(start, &hdr);
        match prev {
            Some(p) => self.store_u64(p - BLOCK_HEADER_SIZE + HDR_NEXT, payload),
            None => self.store_u64(SB_FIRST, payload),
        }
        match next {
            Some(n) => self.store_u64(n - BLOCK_HEADER_SIZE + HDR_PREV, payload),
            None => self.store_u64(SB_LAST, payload),
        }
        self.allocs.insert(payload, size);
        self.store_u64(SB_COUNT, self.allocs.len() as u64);
        self.adjust_live(start..start + need, 1);
        Ok(ObjectRef(payload))
    }

    pub fn free(&mut self, r: ObjectRef) -> Result<(), HeapError> {
        let Some(len) = self.allocs.remove(&r.0) else {
            let header = r.0.wrapping_sub(BLOCK_HEADER_SIZE);
            let in_free = self
                .free_by_addr
                .range(..=header)
                .next_back()
                .is_some_and(|(&s, &l)| header < s + l);
            return Err(if in_free {
                HeapError::DoubleFree(r.0)
            } else {
                HeapError::InvalidRef(r.0)
            });
        };
        let start = r.0 - BLOCK_HEADER_SIZE;
        let end = r.0 + align_up(len);
        let prev = self.allocs.range(..r.0).next_back().map(|(&o, _)| o);
        let next = self.allocs.range(r.0..).next().map(|(&o, _)| o);
        match prev {
            Some(p) => self.store_u64(p - BLOCK_HEADER_SIZE + HDR_NEXT, next.unwrap_or(0)),
            None => self.store_u64(SB_FIRST, next.unwrap_or(0)),
        }
        match next {
            Some(n) => self.store_u64(n - BLOCK_HEADER_SIZE + HDR_PREV, prev.unwrap_or(0)),
            None => self.store_u64(SB_LAST, prev.unwrap_or(0)),
        }
        self.store_u64(SB_COUNT, self.allocs.len() as u64);
        self.fill_zero(start..end);
        self.adjust_live(start..end, -1);
        self.insert_free(start, end - start);
        Ok(())
    }

    pub fn write(&mut self, r: ObjectRef, at: u64, data: &[u8]) -> Result<(), HeapError> {
        let range = self.checked_range(r, at, data.len() as u64)?;
        self.store(range.start, data);
        Ok(())
    }

    pub fn read(&self, r: ObjectRef, at: u64, len: u64) -> Result<&[u8], HeapError> {
        let range = self.checked_range(r, at, len)?;
        Ok(&self.bytes[range.start as usize..range.end as usize])
    }

    pub fn write_u64(&mut self, r: ObjectRef, at: u64, v: u64) -> Result<(), HeapError> {
        self.write(r, at, &v.to_le_bytes())
    }

    pub fn read_u64(&self, r: ObjectRef, at: u64) -> Result<u64, HeapError> {
        let b = self.read(r, at, 8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn checked_range(&self, r: ObjectRef, at: u64, len: u64) -> Result<Range<u64>, HeapError> {
        let obj_len = self.object_len(r)?;
        let end = at.checked_add(len).unwrap_or(u64::MAX);
        if end > obj_len {
            return Err(HeapError::OutOfBounds {
                at,
                end,
                len: obj_len,
            });
        }
        Ok(r.0 + at..r.0 + end)
    }

    /// The write barrier: every store into heap memory goes through here.
    fn store(&mut self, offset: u64, data: &[u8]) {
        if data.is_empty() {
            return;
        }
        let o = offset as usize;
        self.bytes[o..o + data.len()].copy_from_slice(data);
        self.mark_dirty(offset..offset + data.len() as u64);
    }

    fn store_u64(&mut self, offset: u64, v: u64) {
        self.store(offset, &v.to_le_bytes());
    }

    fn fill_zero(&mut self, range: Range<u64>) {
        self.bytes[range.start as usize..range.end as usize].fill(0);
        self.mark_dirty(range);
    }

    fn pages_of(&self, range: &Range<u64>) -> Range<u64> {
        range.start / self.page_size..(range.end - 1) / self.page_size + 1
    }

    fn mark_dirty(&mut self, range: Range<u64>) {
        let pages = self.pages_of(&range);
        self.dirty
            .insert_range(pages.start as usize..pages.end as usize);
    }

    fn adjust_live(&mut self, range: Range<u64>, delta: i32) {
        for p in self.pages_of(&range) {
            let c = &mut self.live_count[p as usize];
            *c = c.checked_add_signed(delta).expect("live count underflow");
        }
    }

    fn insert_free(&mut self, mut start: u64, mut len: u64) {
        if let Some((&ps, &pl)) = self.free_by_addr.range(..start).next_back() {
            if ps + pl == start {
                self.remove_free(ps, pl);
                start = ps;
                len += pl;
            }
        }
        if let Some(&nl) = self.free_by_addr.get(&(start + len)) {
            self.remove_free(start + len, nl);
            len += nl;
        }
        self.free_by_addr.insert(start, len);
        self.free_by_size.insert((len, start));
    }

    fn remove_free(&mut self, start: u64, len: u64) {
        self.free_by_addr.remove(&start);
        self.free_by_size.remove(&(len, start));
    }

    fn grow_for(&mut self, need: u64) -> Result<(), HeapError> {
        let end = self.bytes.len() as u64;
        let tail_free = self
            .free_by_addr
            .range(..end)
            .next_back()
            .filter(|(&s, &l)| s + l == end)
            .map_or(0, |(_, &l)| l);
        let missing = need - tail_free.min(need);
        let add_pages = missing.div_ceil(self.page_size).max(1);
        let new_pages = self.page_count() + add_pages;
        if new_pages > self.max_pages {
            return Err(HeapError::OutOfMemory {
                needed: new_pages,
                max_pages: self.max_pages,
            });
        }
        self.map_pages(new_pages);
        self.insert_free(end, add_pages * self.page_size);
        Ok(())
    }

    fn map_pages(&mut self, pages: u64) {
        self.bytes.resize((pages * self.page_size) as usize, 0);
        self.dirty.grow(pages as usize);
        self.live_count.resize(pages as usize, 0);
    }

    fn reset_dirty(&mut self) {
        self.dirty.clear();
        self.epoch += 1;
    }

    /// Rebuild a heap from page payloads.
    ///
    /// Pages not supplied are zero. The allocation table, free extents and
    /// live map come from walking the in-heap live list starting at the
    /// superblock, so only pages overlapped by live objects need to be
    /// supplied.
    pub fn from_pages<'a>(
        config: &HeapConfig,
        heap_pages: u64,
        pages: impl IntoIterator<Item = (u64, &'a [u8])>,
    ) -> Result<Self, HeapError> {
        config.validate()?;
        let page_size = config.page_size as u64;
        if heap_pages == 0 {
            return Err(HeapError::Corrupt("heap has no pages".into()));
        }
        if heap_pages > config.max_pages {
            return Err(HeapError::OutOfMemory {
                needed: heap_pages,
                max_pages: config.max_pages,
            });
        }
        let mut bytes = vec![0u8; (heap_pages * page_size) as usize];
        for (index, data) in pages {
            if index >= heap_pages || data.len() as u64 != page_size {
                return Err(HeapError::Corrupt(format!(
                    "page {index} ({} bytes) does not fit a {heap_pages}-page heap",
                    data.len()
                )));
            }
            let at = (index * page_size) as usize;
            bytes[at..at + data.len()].copy_from_slice(data);
        }
        if &bytes[0..4] != SUPERBLOCK_MAGIC {
            return Err(HeapError::Corrupt("missing superblock".into()));
        }
        let word = |b: &[u8], at: u64| u64::from_le_bytes(b[at as usize..at as usize + 8].try_into().unwrap());
        if word(&bytes, 8) != page_size {
            return Err(HeapError::Corrupt("superblock page size mismatch".into()));
        }

        let mut space = HeapSpace {
            page_size,
            max_pages: config.max_pages,
            bytes,
            allocs: BTreeMap::new(),
            free_by_addr: BTreeMap::new(),
            free_by_size: BTreeSet::new(),
            dirty: FixedBitSet::with_capacity(heap_pages as usize),
            live_count: vec![0; heap_pages as usize],
            epoch: 0,
        };
        space.adjust_live(0..SUPERBLOCK_SIZE, 1);

        let limit = heap_pages * page_size;
        let expected = word(&space.bytes, SB_COUNT);
        let mut cursor = SUPERBLOCK_SIZE;
        let mut prev = 0u64;
        let mut at = word(&space.bytes, SB_FIRST);
        while at != 0 {
            if at < cursor + BLOCK_HEADER_SIZE || at >= limit {
                return Err(HeapError::Corrupt(format!("live list out of order at {at:#x}")));
            }
            let h = at - BLOCK_HEADER_SIZE;
            let magic = u32::from_le_bytes(space.bytes[h as usize..h as usize + 4].try_into().unwrap());
            if magic != BLOCK_MAGIC {
                return Err(HeapError::Corrupt(format!("bad block header at {h:#x}")));
            }
            let len = word(&space.bytes, h + HDR_LEN);
            if word(&space.bytes, h + HDR_PREV) != prev {
                return Err(HeapError::Corrupt(format!("broken back link at {at:#x}")));
            }
            let end = at + align_up(len);
            if len == 0 || end > limit {
                return Err(HeapError::Corrupt(format!("bad block length at {at:#x}")));
            }
            if h > cursor {
                space.insert_free(cursor, h - cursor);
            }
            space.allocs.insert(at, len);
            space.adjust_live(h..end, 1);
            cursor = end;
            prev = at;
            at = word(&space.bytes, h + HDR_NEXT);
        }
        if word(&space.bytes, SB_LAST) != prev || expected != space.allocs.len() as u64 {
            return Err(HeapError::Corrupt("superblock disagrees with live list".into()));
        }
        if limit > cursor {
            space.insert_free(cursor, limit - cursor);
        }
        Ok(space)
    }
}

fn digest_u64(h: Sha256) -> u64 {
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// A managed heap shared by mutator threads and one checkpoint agent.
///
/// Every mutator entry point is a safepoint boundary: a call either runs
/// entirely before a stop-the-world window or entirely after it.
pub struct ManagedHeap {
    config: HeapConfig,
    stopped: Mutex<bool>,
    resumed: Condvar,
    space: Mutex<HeapSpace>,
    safepoint_timeout: Duration,
}

impl ManagedHeap {
    pub fn new(config: HeapConfig) -> Result<Self, HeapError> {
        config.validate()?;
        Ok(Self::from_space(config, HeapSpace::new(&config)))
    }

    pub fn from_space(config: HeapConfig, space: HeapSpace) -> Self {
        ManagedHeap {
            config,
            stopped: Mutex::new(false),
            resumed: Condvar::new(),
            space: Mutex::new(space),
            safepoint_timeout: Duration::from_secs(5),
        }
    }

    pub fn with_safepoint_timeout(mut self, timeout: Duration) -> Self {
        self.safepoint_timeout = timeout;
        self
    }

    pub fn config(&self) -> &HeapConfig {
        &self.config
    }

    /// Run `f` as a single mutator step. Blocks while the world is stopped.
    pub fn mutate<R>(&self, f: impl FnOnce(&mut HeapSpace) -> R) -> R {
        let mut guard = self.enter();
        f(&mut guard)
    }

    fn enter(&self) -> MutexGuard<'_, HeapSpace> {
        let mut stopped = self.stopped.lock();
        while *stopped {
            self.resumed.wait(&mut stopped);
        }
        drop(stopped);
        self.space.lock()
    }

    pub fn alloc(&self, size: u64) -> Result<ObjectRef, HeapError> {
        self.mutate(|h| h.alloc(size))
    }

    pub fn free(&self, r: ObjectRef) -> Result<(), HeapError> {
        self.mutate(|h| h.free(r))
    }

    pub fn write(&self, r: ObjectRef, at: u64, data: &[u8]) -> Result<(), HeapError> {
        self.mutate(|h| h.write(r, at, data))
    }

    pub fn read(&self, r: ObjectRef, at: u64, len: u64) -> Result<Vec<u8>, HeapError> {
        self.mutate(|h| h.read(r, at, len).map(<[u8]>::to_vec))
    }

    /// Advisory view of the dirty set; only consistent inside a stopped world.
    pub fn dirty_pages(&self) -> PageSet {
        self.mutate(|h| h.dirty_pages())
    }

    /// Advisory view of the live set; only consistent inside a stopped world.
    pub fn live_pages(&self) -> PageSet {
        self.mutate(|h| h.live_pages())
    }

    /// Clearing dirty bits outside a stopped world would race with the
    /// checkpoint agent, so it is only offered on [`StoppedWorld`].
    pub fn reset_dirty(&self) -> Result<(), HeapError> {
        Err(HeapError::WorldNotStopped)
    }

    pub fn is_stopped(&self) -> bool {
        *self.stopped.lock()
    }

    /// Park all mutators. Returns once no mutator is inside the heap.
    ///
    /// Only the checkpoint agent may call this. The world restarts when the
    /// returned guard is dropped or [`StoppedWorld::start`] is called.
    pub fn stop_world(&self) -> Result<StoppedWorld<'_>, HeapError> {
        *self.stopped.lock() = true;
        match self.space.try_lock_for(self.safepoint_timeout) {
            Some(guard) => Ok(StoppedWorld {
                heap: self,
                space: Some(guard),
            }),
            None => {
                self.release();
                Err(HeapError::Timeout(self.safepoint_timeout))
            }
        }
    }

    fn release(&self) {
        *self.stopped.lock() = false;
        self.resumed.notify_all();
    }
}

/// Exclusive access to a heap while every mutator is parked.
pub struct StoppedWorld<'a> {
    heap: &'a ManagedHeap,
    space: Option<MutexGuard<'a, HeapSpace>>,
}

impl StoppedWorld<'_> {
    pub fn space(&self) -> &HeapSpace {
        self.space.as_ref().unwrap()
    }

    pub fn dirty_pages(&self) -> PageSet {
        self.space().dirty_pages()
    }

    pub fn live_pages(&self) -> PageSet {
        self.space().live_pages()
    }

    /// Clear the dirty map and advance the epoch.
    pub fn reset_dirty(&mut self) {
        self.space.as_mut().unwrap().reset_dirty();
    }

    pub fn set_epoch(&mut self, epoch: u64) {
        self.space.as_mut().unwrap().epoch = epoch;
    }

    /// Restart the world.
    pub fn start(self) {}
}

impl std::ops::Deref for StoppedWorld<'_> {
    type Target = HeapSpace;

    fn deref(&self) -> &HeapSpace {
        self.space()
    }
}

impl Drop for StoppedWorld<'_> {
    fn drop(&mut self) {
        self.space.take();
        self.heap.release();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;
    use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
    use std::sync::Arc;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> HeapConfig {
        HeapConfig::new(4096, 4, 1024).unwrap()
    }

    fn first_payload() -> u64 {
        SUPERBLOCK_SIZE + BLOCK_HEADER_SIZE
    }

    /// Recomputes the live map from the allocation table alone.
    fn brute_live(h: &HeapSpace) -> PageSet {
        let ps = h.page_size() as u64;
        let mut set = PageSet::new();
        set.insert(0);
        for (r, len) in h.objects() {
            let start = r.offset() - BLOCK_HEADER_SIZE;
            let end = r.offset() + align_up(len);
            set.extend(start / ps..=(end - 1) / ps);
        }
        set
    }

    fn span_pages(ps: u64, start: u64, len: u64) -> Range<u64> {
        start / ps..(start + len - 1) / ps + 1
    }

    #[test]
    fn config_validation() {
        assert!(HeapConfig::new(128, 1, 2).is_err());
        assert!(HeapConfig::new(3000, 1, 2).is_err());
        assert!(HeapConfig::new(4096, 3, 2).is_err());
        assert!(HeapConfig::new(256, 2, 2).is_ok());
    }

    #[test]
    fn first_alloc_lands_at_heap_start() {
        let heap = ManagedHeap::new(small()).unwrap();
        let mut w = heap.stop_world().unwrap();
        w.reset_dirty();
        drop(w);
        let r = heap.alloc(100).unwrap();
        assert_eq!(r.offset(), first_payload());
        assert_eq!(heap.dirty_pages(), PageSet::from([0]));
    }

    #[test]
    fn straddling_alloc_dirties_and_lives_on_two_pages() {
        let heap = ManagedHeap::new(small()).unwrap();
        heap.stop_world().unwrap().reset_dirty();
        let r = heap.alloc(4096 + 1).unwrap();
        let ext = heap.mutate(|h| h.extent_of(r).unwrap());
        let pages: PageSet = span_pages(4096, ext.start, ext.end - ext.start).collect();
        assert_eq!(pages.len(), 2);
        assert_eq!(heap.dirty_pages(), pages);
        assert!(pages.is_subset(&heap.live_pages()));
    }

    #[test]
    fn thousand_allocs_match_shadow_bookkeeping() {
        let heap = ManagedHeap::new(small()).unwrap();
        let mut shadow_bytes = 0u64;
        let mut shadow_refs = BTreeSet::new();
        for _ in 0..1000 {
            let r = heap.alloc(1000).unwrap();
            shadow_bytes += 1000 + BLOCK_HEADER_SIZE;
            assert!(shadow_refs.insert(r));
        }
        heap.mutate(|h| {
            assert_eq!(h.live_bytes(), 1000 * (1000 + BLOCK_HEADER_SIZE));
            assert_eq!(h.live_bytes(), shadow_bytes);
            assert_eq!(h.objects().map(|(r, _)| r).collect::<BTreeSet<_>>(), shadow_refs);
        });
    }

    #[test]
    fn alloc_beyond_max_pages_fails() {
        let heap = ManagedHeap::new(HeapConfig::new(4096, 1, 2).unwrap()).unwrap();
        heap.alloc(4000).unwrap();
        assert!(matches!(heap.alloc(8000), Err(HeapError::OutOfMemory { .. })));
        assert_eq!(heap.alloc(0), Err(HeapError::ZeroSize));
    }

    #[test]
    fn freeing_sole_occupant_clears_live_bit() {
        let heap = ManagedHeap::new(small()).unwrap();
        let _filler = heap.alloc(4096 - SUPERBLOCK_SIZE - BLOCK_HEADER_SIZE).unwrap();
        let a = heap.alloc(4096 - BLOCK_HEADER_SIZE).unwrap();
        let page = (a.offset() - BLOCK_HEADER_SIZE) / 4096;
        assert_eq!(page, 1);
        assert!(heap.live_pages().contains(&1));
        heap.free(a).unwrap();
        assert!(!heap.live_pages().contains(&1));
    }

    #[test]
    fn co_tenant_keeps_page_live() {
        let heap = ManagedHeap::new(small()).unwrap();
        let a = heap.alloc(64).unwrap();
        let _b = heap.alloc(64).unwrap();
        heap.free(a).unwrap();
        assert!(heap.live_pages().contains(&0));
    }

    #[test]
    fn double_free_and_invalid_ref() {
        let heap = ManagedHeap::new(small()).unwrap();
        let a = heap.alloc(64).unwrap();
        let _b = heap.alloc(64).unwrap();
        heap.free(a).unwrap();
        assert_eq!(heap.free(a), Err(HeapError::DoubleFree(a.offset())));
        assert_eq!(
            heap.free(ObjectRef::from_offset(3)),
            Err(HeapError::InvalidRef(3))
        );
    }

    #[test]
    fn free_zeroes_memory() {
        let heap = ManagedHeap::new(small()).unwrap();
        let a = heap.alloc(64).unwrap();
        heap.write(a, 0, &[0xAB; 64]).unwrap();
        let start = a.offset() - BLOCK_HEADER_SIZE;
        heap.free(a).unwrap();
        heap.mutate(|h| {
            assert!(h.page(0)[start as usize..start as usize + 96].iter().all(|&b| b == 0));
        });
    }

    #[test]
    fn write_bounds_and_page_spans() {
        let heap = ManagedHeap::new(small()).unwrap();
        let a = heap.alloc(8192).unwrap();
        heap.stop_world().unwrap().reset_dirty();
        heap.write(a, 5, &[1]).unwrap();
        assert_eq!(heap.dirty_pages().len(), 1);

        heap.stop_world().unwrap().reset_dirty();
        let boundary = 4096 - a.offset();
        heap.write(a, boundary - 2, &[1, 2, 3, 4]).unwrap();
        assert_eq!(heap.dirty_pages(), PageSet::from([0, 1]));

        assert!(matches!(
            heap.write(a, 8190, &[0; 4]),
            Err(HeapError::OutOfBounds { .. })
        ));
        assert_eq!(
            heap.read(ObjectRef::from_offset(12), 0, 1),
            Err(HeapError::InvalidRef(12))
        );
    }

    #[test]
    fn reads_leave_dirty_map_empty() {
        let heap = ManagedHeap::new(small()).unwrap();
        let a = heap.alloc(100).unwrap();
        heap.write(a, 0, b"hello").unwrap();
        heap.stop_world().unwrap().reset_dirty();
        for _ in 0..100 {
            assert_eq!(heap.read(a, 0, 5).unwrap(), b"hello");
        }
        assert!(heap.dirty_pages().is_empty());
    }

    #[test]
    fn reset_requires_stopped_world() {
        let heap = ManagedHeap::new(small()).unwrap();
        assert_eq!(heap.reset_dirty(), Err(HeapError::WorldNotStopped));
        let mut w = heap.stop_world().unwrap();
        let epoch = w.epoch();
        w.reset_dirty();
        assert!(w.dirty_pages().is_empty());
        assert_eq!(w.epoch(), epoch + 1);
    }

    #[test]
    fn stop_world_without_mutators_is_immediate() {
        let heap = ManagedHeap::new(small()).unwrap();
        let t = std::time::Instant::now();
        let w = heap.stop_world().unwrap();
        assert!(t.elapsed() < Duration::from_millis(50));
        assert!(heap.is_stopped());
        w.start();
        assert!(!heap.is_stopped());
    }

    #[test]
    fn stop_world_times_out_on_stuck_mutator() {
        let heap = Arc::new(
            ManagedHeap::new(small())
                .unwrap()
                .with_safepoint_timeout(Duration::from_millis(50)),
        );
        let h2 = heap.clone();
        let (tx, rx) = std::sync::mpsc::channel();
        let t = std::thread::spawn(move || {
            h2.mutate(|_| {
                tx.send(()).unwrap();
                std::thread::sleep(Duration::from_millis(300));
            })
        });
        rx.recv().unwrap();
        assert!(matches!(heap.stop_world(), Err(HeapError::Timeout(_))));
        t.join().unwrap();
        assert!(heap.stop_world().is_ok());
    }

    #[test]
    fn stopped_world_freezes_heap() {
        let heap = Arc::new(ManagedHeap::new(small()).unwrap());
        let run = Arc::new(AtomicBool::new(true));
        let writers: Vec<_> = (0..4)
            .map(|i| {
                let heap = heap.clone();
                let run = run.clone();
                std::thread::spawn(move || {
                    let r = heap.alloc(2000).unwrap();
                    let mut n = 0u64;
                    while run.load(Ordering::Relaxed) {
                        heap.write_u64_at(r, (n % 200) * 8, n ^ i).unwrap();
                        n += 1;
                    }
                })
            })
            .collect();
        for _ in 0..20 {
            std::thread::sleep(Duration::from_millis(2));
            let w = heap.stop_world().unwrap();
            let (h1, d1) = (w.full_hash(), w.dirty_pages());
            std::thread::sleep(Duration::from_millis(3));
            assert_eq!(w.full_hash(), h1);
            assert_eq!(w.dirty_pages(), d1);
        }
        run.store(false, Ordering::Relaxed);
        for w in writers {
            w.join().unwrap();
        }
    }

    #[test]
    fn repeated_stop_start_under_load_applies_every_write() {
        let heap = Arc::new(ManagedHeap::new(small()).unwrap());
        let counter = heap.alloc(8).unwrap();
        let issued = Arc::new(AtomicU64::new(0));
        let per_thread = 5000;
        let writers: Vec<_> = (0..3)
            .map(|_| {
                let heap = heap.clone();
                let issued = issued.clone();
                std::thread::spawn(move || {
                    for _ in 0..per_thread {
                        heap.mutate(|h| {
                            let v = h.read_u64(counter, 0).unwrap();
                            h.write_u64(counter, 0, v + 1).unwrap();
                        });
                        issued.fetch_add(1, Ordering::Relaxed);
                    }
                })
            })
            .collect();
        for _ in 0..1000 {
            let mut w = heap.stop_world().unwrap();
            w.reset_dirty();
        }
        for w in writers {
            w.join().unwrap();
        }
        let applied = heap.mutate(|h| h.read_u64(counter, 0).unwrap());
        assert_eq!(applied, issued.load(Ordering::Relaxed));
        assert_eq!(applied, 3 * per_thread);
    }

    impl ManagedHeap {
        fn write_u64_at(&self, r: ObjectRef, at: u64, v: u64) -> Result<(), HeapError> {
            self.mutate(|h| h.write_u64(r, at, v))
        }
    }

    #[derive(Debug, Clone)]
    enum Step {
        Alloc(u64),
        Free(usize),
        Write(usize, u64, u16),
    }

    fn step() -> impl Strategy<Value = Step> {
        prop_oneof![
            (1u64..6000).prop_map(Step::Alloc),
            any::<usize>().prop_map(Step::Free),
            (any::<usize>(), any::<u64>(), 1u16..3000).prop_map(|(i, at, n)| Step::Write(i, at, n)),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn live_and_dirty_maps_match_brute_force(steps in proptest::collection::vec(step(), 1..120)) {
            let heap = ManagedHeap::new(HeapConfig::new(1024, 2, 4096).unwrap()).unwrap();
            let mut live: Vec<ObjectRef> = Vec::new();
            let mut shadow_dirty = PageSet::new();
            heap.stop_world().unwrap().reset_dirty();
            let before: HashMap<u64, Vec<u8>> = heap.mutate(|h| (0..h.page_count()).map(|p| (p, h.page(p).to_vec())).collect());
            for s in steps {
                heap.mutate(|h| {
                    match s {
                        Step::Alloc(n) => {
                            let r = h.alloc(n).unwrap();
                            let e = h.extent_of(r).unwrap();
                            shadow_dirty.extend(span_pages(1024, e.start, e.end - e.start));
                            // neighbour link updates and the superblock
                            shadow_dirty.insert(0);
                            if let Some((p, _)) = h.objects().take_while(|(o, _)| *o < r).last() {
                                shadow_dirty.insert((p.offset() - BLOCK_HEADER_SIZE + HDR_NEXT) / 1024);
                            }
                            if let Some((n, _)) = h.objects().find(|(o, _)| *o > r) {
                                shadow_dirty.insert((n.offset() - BLOCK_HEADER_SIZE + HDR_PREV) / 1024);
                            }
                            live.push(r);
                        }
                        Step::Free(i) if !live.is_empty() => {
                            let r = live.swap_remove(i % live.len());
                            let e = h.extent_of(r).unwrap();
                            shadow_dirty.extend(span_pages(1024, e.start, e.end - e.start));
                            shadow_dirty.insert(0);
                            if let Some((p, _)) = h.objects().take_while(|(o, _)| *o < r).last() {
                                shadow_dirty.insert((p.offset() - BLOCK_HEADER_SIZE + HDR_NEXT) / 1024);
                            }
                            if let Some((n, _)) = h.objects().find(|(o, _)| *o > r) {
                                shadow_dirty.insert((n.offset() - BLOCK_HEADER_SIZE + HDR_PREV) / 1024);
                            }
                            h.free(r).unwrap();
                        }
                        Step::Write(i, at, n) if !live.is_empty() => {
                            let r = live[i % live.len()];
                            let len = h.object_len(r).unwrap();
                            let n = (n as u64).min(len);
                            let at = at % (len - n + 1);
                            h.write(r, at, &vec![0x5A; n as usize]).unwrap();
                            shadow_dirty.extend(span_pages(1024, r.offset() + at, n));
                        }
                        _ => {}
                    }
                });
            }
            let w = heap.stop_world().unwrap();
            prop_assert_eq!(w.live_pages(), brute_live(&w));
            prop_assert_eq!(w.dirty_pages(), shadow_dirty);
            // soundness: any changed page is dirty
            for p in 0..w.page_count() {
                let changed = before.get(&p).is_none_or(|b| b.as_slice() != w.page(p));
                if changed {
                    prop_assert!(w.is_dirty(p), "page {} changed but clean", p);
                }
            }
            // allocated and free extents tile the mapped space
            let mut tiles: Vec<(u64, u64)> = w.objects().map(|(r, len)| (r.offset() - BLOCK_HEADER_SIZE, BLOCK_HEADER_SIZE + align_up(len))).collect();
            tiles.push((0, SUPERBLOCK_SIZE));
            tiles.extend(w.free_extents());
            tiles.sort();
            let mut cursor = 0;
            for (s, l) in tiles {
                prop_assert_eq!(s, cursor);
                cursor = s + l;
            }
            prop_assert_eq!(cursor, w.page_count() * 1024);
        }
    }

    #[test]
    fn rebuild_from_live_pages_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let config = HeapConfig::new(512, 2, 4096).unwrap();
        let heap = ManagedHeap::new(config).unwrap();
        let mut live = Vec::new();
        for _ in 0..400 {
            if !live.is_empty() && rng.gen_bool(0.4) {
                let r = live.swap_remove(rng.gen_range(0..live.len()));
                heap.free(r).unwrap();
            } else {
                let r = heap.alloc(rng.gen_range(1..1500)).unwrap();
                heap.write(r, 0, &[rng.gen(); 1]).unwrap();
                live.push(r);
            }
        }
        let w = heap.stop_world().unwrap();
        // poison every dead page to prove the rebuild never reads them
        let poison = vec![0xEEu8; 512];
        let live_set = w.live_pages();
        let pages: Vec<(u64, Vec<u8>)> = (0..w.page_count())
            .map(|p| (p, if live_set.contains(&p) { w.page(p).to_vec() } else { poison.clone() }))
            .collect();
        let restored = HeapSpace::from_pages(&config, w.page_count(), pages.iter().map(|(p, b)| (*p, b.as_slice()))).unwrap();
        assert_eq!(restored.live_pages(), live_set);
        assert_eq!(restored.live_page_hash(), w.live_page_hash());
        assert_eq!(restored.objects().collect::<Vec<_>>(), w.objects().collect::<Vec<_>>());
        assert!(restored.dirty_pages().is_empty());
    }
}
