//! Size-class allocator over a simulated address space.
//!
//! Small requests (up to 512 bytes) are carved out of 4 KiB slabs inside one
//! contiguous region reserved at startup. Larger requests get their own run
//! of 4 KiB-aligned pages and a header in the large-object table. Frees of
//! addresses that fail the range, alignment or magic checks are ignored.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

pub const MAGIC: u32 = 0xDEAD_BEEF;
pub const PAGE_SIZE: u64 = 4096;
pub const SLAB_SIZE: u64 = 4096;
pub const SIZE_CLASS_STEP: u64 = 16;
pub const MAX_SMALL: u64 = 512;
pub const NUM_CLASSES: usize = (MAX_SMALL / SIZE_CLASS_STEP) as usize;
pub const DEFAULT_SMALL_REGION: u64 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeClass {
    Small(u64),
    Large,
}

pub fn size_class_for(size: u64) -> SizeClass {
    if size > MAX_SMALL {
        SizeClass::Large
    } else {
        SizeClass::Small(size.max(1).div_ceil(SIZE_CLASS_STEP) * SIZE_CLASS_STEP)
    }
}

fn class_index(class_bytes: u64) -> usize {
    (class_bytes / SIZE_CLASS_STEP) as usize - 1
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AllocError {
    #[error("out of memory: requested {requested} bytes")]
    OutOfMemory { requested: u64 },
}

/// Source of page-aligned address ranges.
pub trait PageProvider: Send + Sync {
    fn map(&self, pages: u64) -> Option<u64>;
    fn unmap(&self, address: u64, pages: u64);
}

/// Hands out page runs from a synthetic address space, reusing released
/// runs of the same length.
#[derive(Debug)]
pub struct SimulatedPages {
    limit: u64,
    inner: Mutex<PagesInner>,
}

#[derive(Debug)]
struct PagesInner {
    next: u64,
    mapped: u64,
    free_runs: BTreeMap<u64, Vec<u64>>,
}

impl SimulatedPages {
    pub const BASE: u64 = 0x1000_0000_0000;

    /// `limit` caps bytes mapped at any one time.
    pub fn new(limit: u64) -> Self {
        SimulatedPages {
            limit,
            inner: Mutex::new(PagesInner { next: Self::BASE, mapped: 0, free_runs: BTreeMap::new() }),
        }
    }

    pub fn mapped_bytes(&self) -> u64 {
        self.inner.lock().unwrap().mapped
    }
}

impl Default for SimulatedPages {
    fn default() -> Self {
        Self::new(1 << 40)
    }
}

impl PageProvider for SimulatedPages {
    fn map(&self, pages: u64) -> Option<u64> {
        let bytes = pages.checked_mul(PAGE_SIZE)?;
        let mut g = self.inner.lock().unwrap();
        if g.mapped.checked_add(bytes)? > self.limit {
            return None;
        }
        let reused = g.free_runs.get_mut(&pages).and_then(Vec::pop);
        let address = match reused {
            Some(a) => a,
            None => {
                let a = g.next;
                g.next = a.checked_add(bytes)?;
                a
            }
        };
        g.mapped += bytes;
        Some(address)
    }

    fn unmap(&self, address: u64, pages: u64) {
        let mut g = self.inner.lock().unwrap();
        g.mapped -= pages * PAGE_SIZE;
        g.free_runs.entry(pages).or_default().push(address);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectHeader {
    pub magic: u32,
    pub size: u64,
    pub pages: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Release {
    Released { size: u64 },
    ForeignIgnored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeapConfig {
    pub small_region_bytes: u64,
}

impl Default for HeapConfig {
    fn default() -> Self {
        HeapConfig { small_region_bytes: DEFAULT_SMALL_REGION }
    }
}

#[derive(Debug, Default)]
struct ClassList {
    free: Vec<u64>,
    /// Live object address to requested size.
    live: HashMap<u64, u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HeapStats {
    pub released: u64,
    pub foreign: u64,
    /// Frees of addresses this heap issued but had already released.
    pub double_frees: u64,
}

pub struct Heap {
    pages: Box<dyn PageProvider>,
    small_base: u64,
    small_len: u64,
    /// Per slab: MAGIC once carved for a class, else 0.
    slab_magic: Vec<AtomicU32>,
    slab_class: Vec<AtomicU32>,
    next_slab: AtomicUsize,
    classes: Vec<Mutex<ClassList>>,
    large: Mutex<HashMap<u64, ObjectHeader>>,
    released: AtomicU64,
    foreign: AtomicU64,
    double_frees: AtomicU64,
}

impl std::fmt::Debug for Heap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Heap")
            .field("small_base", &self.small_base)
            .field("small_len", &self.small_len)
            .finish_non_exhaustive()
    }
}

impl Heap {
    pub fn new(config: HeapConfig) -> Result<Self, AllocError> {
        Self::with_provider(config, Box::new(SimulatedPages::default()))
    }

    /// # Panics
    /// If the small region size is zero or not a multiple of the slab size.
    pub fn with_provider(config: HeapConfig, pages: Box<dyn PageProvider>) -> Result<Self, AllocError> {
        let len = config.small_region_bytes;
        assert!(len > 0 && len.is_multiple_of(SLAB_SIZE), "small region must be a positive multiple of {SLAB_SIZE}");
        let base = pages.map(len / PAGE_SIZE).ok_or(AllocError::OutOfMemory { requested: len })?;
        let slabs = (len / SLAB_SIZE) as usize;
        Ok(Heap {
            pages,
            small_base: base,
            small_len: len,
            slab_magic: (0..slabs).map(|_| AtomicU32::new(0)).collect(),
            slab_class: (0..slabs).map(|_| AtomicU32::new(0)).collect(),
            next_slab: AtomicUsize::new(0),
            classes: (0..NUM_CLASSES).map(|_| Mutex::default()).collect(),
            large: Mutex::default(),
            released: AtomicU64::new(0),
            foreign: AtomicU64::new(0),
            double_frees: AtomicU64::new(0),
        })
    }

    pub fn small_region(&self) -> std::ops::Range<u64> {
        self.small_base..self.small_base + self.small_len
    }

    pub fn in_small_region(&self, address: u64) -> bool {
        self.small_region().contains(&address)
    }

    pub fn stats(&self) -> HeapStats {
        HeapStats {
            released: self.released.load(Ordering::Relaxed),
            foreign: self.foreign.load(Ordering::Relaxed),
            double_frees: self.double_frees.load(Ordering::Relaxed),
        }
    }

    pub fn allocate(&self, size: u64) -> Result<u64, AllocError> {
        match size_class_for(size) {
            SizeClass::Small(class) => self.allocate_small(size, class),
            SizeClass::Large => self.allocate_large(size),
        }
    }

    fn allocate_small(&self, size: u64, class: u64) -> Result<u64, AllocError> {
        let mut list = self.classes[class_index(class)].lock().unwrap();
        if list.free.is_empty() {
            let slab = self.next_slab.fetch_add(1, Ordering::Relaxed);
            if slab >= self.slab_magic.len() {
                self.next_slab.store(self.slab_magic.len(), Ordering::Relaxed);
                return Err(AllocError::OutOfMemory { requested: size });
            }
            self.slab_class[slab].store(class as u32, Ordering::Relaxed);
            self.slab_magic[slab].store(MAGIC, Ordering::Release);
            let start = self.small_base + slab as u64 * SLAB_SIZE;
            let slots = SLAB_SIZE / class;
            list.free.extend((0..slots).rev().map(|i| start + i * class));
        }
        let address = list.free.pop().expect("refilled above");
        list.live.insert(address, size);
        Ok(address)
    }

    fn allocate_large(&self, size: u64) -> Result<u64, AllocError> {
        let pages = size.div_ceil(PAGE_SIZE);
        let address = self.pages.map(pages).ok_or(AllocError::OutOfMemory { requested: size })?;
        debug_assert_eq!(address % PAGE_SIZE, 0);
        self.large.lock().unwrap().insert(address, ObjectHeader { magic: MAGIC, size, pages });
        Ok(address)
    }

    /// Header of a live object, if `address` is one this heap issued.
    pub fn header(&self, address: u64) -> Option<ObjectHeader> {
        if self.in_small_region(address) {
            let (slab, class) = self.small_slot(address)?;
            let list = self.classes[class_index(class)].lock().unwrap();
            let magic = self.slab_magic[slab].load(Ordering::Acquire);
            list.live.get(&address).map(|&size| ObjectHeader { magic, size, pages: 0 })
        } else if address.is_multiple_of(PAGE_SIZE) {
            self.large.lock().unwrap().get(&address).copied()
        } else {
            None
        }
    }

    /// Slab index and class for a slot-aligned address in a carved slab.
    fn small_slot(&self, address: u64) -> Option<(usize, u64)> {
        let offset = address - self.small_base;
        let slab = (offset / SLAB_SIZE) as usize;
        if self.slab_magic[slab].load(Ordering::Acquire) != MAGIC {
            return None;
        }
        let class = self.slab_class[slab].load(Ordering::Relaxed) as u64;
        let within = offset % SLAB_SIZE;
        (within.is_multiple_of(class) && within / class < SLAB_SIZE / class).then_some((slab, class))
    }

    /// Never fails: addresses that do not check out are left alone.
    pub fn deallocate(&self, address: u64) -> Release {
        let outcome = if self.in_small_region(address) {
            self.free_small(address)
        } else if address.is_multiple_of(PAGE_SIZE) {
            self.free_large(address)
        } else {
            None
        };
        match outcome {
            Some(size) => {
                self.released.fetch_add(1, Ordering::Relaxed);
                Release::Released { size }
            }
            None => {
                self.foreign.fetch_add(1, Ordering::Relaxed);
                Release::ForeignIgnored
            }
        }
    }

    fn free_small(&self, address: u64) -> Option<u64> {
        let (_, class) = self.small_slot(address)?;
        let mut list = self.classes[class_index(class)].lock().unwrap();
        match list.live.remove(&address) {
            Some(size) => {
                list.free.push(address);
                Some(size)
            }
            None => {
                self.double_frees.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    fn free_large(&self, address: u64) -> Option<u64> {
        let header = {
            let mut large = self.large.lock().unwrap();
            match large.get(&address) {
                Some(h) if h.magic == MAGIC => large.remove(&address),
                _ => None,
            }
        }?;
        self.pages.unmap(address, header.pages);
        Some(header.size)
    }
}

impl Drop for Heap {
    fn drop(&mut self) {
        for (address, header) in self.large.get_mut().unwrap().drain() {
            self.pages.unmap(address, header.pages);
        }
        self.pages.unmap(self.small_base, self.small_len / PAGE_SIZE);
    }
}
