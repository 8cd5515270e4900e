//! NEW/HOT/COLD heaps built from contiguous fixed-size segments.
//!
//! All three heaps live in one anonymous virtual reservation split into equal
//! regions, so the heap owning an address is a subtraction and a division.
//! Segments are bump-allocated and never compacted; space freed by relocation
//! is returned only when a whole segment empties.

use std::fmt;
use std::ptr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::policy::AdviceStage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeapId {
    New,
    Hot,
    Cold,
}

impl HeapId {
    pub const ALL: [HeapId; 3] = [HeapId::New, HeapId::Hot, HeapId::Cold];

    pub const fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            HeapId::New => "NEW",
            HeapId::Hot => "HOT",
            HeapId::Cold => "COLD",
        }
    }
}

impl fmt::Display for HeapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum AdviceState {
    None = 0,
    Huge = 1,
    ColdAdvised = 2,
    PagedOut = 3,
}

impl AdviceState {
    fn from_u8(v: u8) -> Self {
        match v {
            1 => AdviceState::Huge,
            2 => AdviceState::ColdAdvised,
            3 => AdviceState::PagedOut,
            _ => AdviceState::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Advice {
    Huge,
    Cold,
    Pageout,
    Reset,
}

impl Advice {
    pub fn as_str(self) -> &'static str {
        match self {
            Advice::Huge => "huge",
            Advice::Cold => "cold",
            Advice::Pageout => "pageout",
            Advice::Reset => "reset",
        }
    }
}

/// Region-granular hint from the heaps to a page backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AdviceEvent {
    pub base: u64,
    pub length: u64,
    pub advice: Advice,
}

/// Segment lifecycle notifications; backends learn which pages exist from these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionEvent {
    Mapped {
        base: u64,
        length: u64,
        heap: HeapId,
    },
    Unmapped {
        base: u64,
        length: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HeapError {
    #[error("out of memory in {0} heap")]
    OutOfMemory(HeapId),
    #[error("invalid allocation size {0}")]
    InvalidSize(u64),
    #[error("object at {address:#x} is not inside a live {heap} segment")]
    NotInHeap { address: u64, heap: HeapId },
    #[error("virtual reservation failed: {0}")]
    Reserve(String),
    #[error("invalid heap configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeapConfig {
    pub page_size: u64,
    pub segment_size: u64,
    pub huge_promote_hot: bool,
    /// Virtual address space reserved per heap.
    pub region_bytes: u64,
    /// Optional cap on mapped bytes, indexed by [`HeapId::index`].
    pub budgets: [Option<u64>; 3],
}

impl Default for HeapConfig {
    fn default() -> Self {
        HeapConfig {
            page_size: 4096,
            segment_size: 2 << 20,
            huge_promote_hot: true,
            region_bytes: 16 << 30,
            budgets: [None; 3],
        }
    }
}

impl HeapConfig {
    pub fn validate(&self) -> Result<(), HeapError> {
        if !self.page_size.is_power_of_two() {
            return Err(HeapError::Config("page_size must be a power of two".into()));
        }
        if self.segment_size == 0 || self.segment_size % self.page_size != 0 {
            return Err(HeapError::Config(
                "segment_size must be a non-zero multiple of page_size".into(),
            ));
        }
        if self.region_bytes < self.segment_size || self.region_bytes % self.segment_size != 0 {
            return Err(HeapError::Config(
                "region_bytes must be a multiple of segment_size".into(),
            ));
        }
        Ok(())
    }
}

/// Public view of one segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentInfo {
    pub base: u64,
    pub length: u64,
    pub heap_id: HeapId,
    pub bump_offset: u64,
    pub live_bytes: u64,
    pub advice_state: AdviceState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SegmentRef {
    pub heap: HeapId,
    pub index: usize,
    pub base: u64,
}

struct Reservation {
    base: *mut u8,
    len: usize,
}

// The reservation is plain anonymous memory; access is coordinated by the
// guide protocol and the per-heap locks.
unsafe impl Send for Reservation {}
unsafe impl Sync for Reservation {}

impl Reservation {
    fn new(len: usize) -> Result<Self, HeapError> {
        // SAFETY: anonymous private mapping, no file descriptor involved.
        let p = unsafe {
            libc::mmap(
                ptr::null_mut(),
                len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE,
                -1,
                0,
            )
        };
        if p == libc::MAP_FAILED {
            return Err(HeapError::Reserve(
                std::io::Error::last_os_error().to_string(),
            ));
        }
        Ok(Reservation {
            base: p as *mut u8,
            len,
        })
    }
}

impl Drop for Reservation {
    fn drop(&mut self) {
        // SAFETY: unmapping exactly what `new` mapped.
        unsafe {
            libc::munmap(self.base as *mut libc::c_void, self.len);
        }
    }
}

#[derive(Default)]
struct Segment {
    bump: AtomicU64,
    live: AtomicU64,
    advice: AtomicU8,
    mapped: AtomicBool,
}

#[derive(Default)]
struct AllocState {
    current: Option<usize>,
    /// Reclaimed segment indices, kept sorted descending so `pop` reuses the lowest.
    free: Vec<usize>,
    next_fresh: usize,
    mapped_bytes: u64,
}

struct Heap {
    id: HeapId,
    base: u64,
    segments: Box<[Segment]>,
    alloc: Mutex<AllocState>,
    budget: Option<u64>,
}

pub struct HeapManager {
    config: HeapConfig,
    reservation: Reservation,
    heaps: [Heap; 3],
    region_events: Mutex<Vec<RegionEvent>>,
    pending_resets: Mutex<Vec<AdviceEvent>>,
    events_pending: AtomicBool,
}

#[inline]
fn align8(size: u64) -> u64 {
    (size + 7) & !7
}

impl HeapManager {
    pub fn new(config: HeapConfig) -> Result<Self, HeapError> {
        config.validate()?;
        let reservation = Reservation::new((config.region_bytes * 3) as usize)?;
        let per_heap = (config.region_bytes / config.segment_size) as usize;
        let root = reservation.base as u64;
        let heaps = HeapId::ALL.map(|id| Heap {
            id,
            base: root + id.index() as u64 * config.region_bytes,
            segments: (0..per_heap).map(|_| Segment::default()).collect(),
            alloc: Mutex::new(AllocState::default()),
            budget: config.budgets[id.index()],
        });
        Ok(HeapManager {
            config,
            reservation,
            heaps,
            region_events: Mutex::new(Vec::new()),
            pending_resets: Mutex::new(Vec::new()),
            events_pending: AtomicBool::new(false),
        })
    }

    pub fn config(&self) -> &HeapConfig {
        &self.config
    }

    fn heap(&self, id: HeapId) -> &Heap {
        &self.heaps[id.index()]
    }

    /// Heap whose region contains `address`, if any.
    #[inline]
    pub fn heap_of(&self, address: u64) -> Option<HeapId> {
        let root = self.reservation.base as u64;
        let off = address.checked_sub(root)?;
        match off / self.config.region_bytes {
            0 => Some(HeapId::New),
            1 => Some(HeapId::Hot),
            2 => Some(HeapId::Cold),
            _ => None,
        }
    }

    fn segment_of(&self, address: u64) -> Option<(HeapId, usize)> {
        let id = self.heap_of(address)?;
        let idx = ((address - self.heap(id).base) / self.config.segment_size) as usize;
        Some((id, idx))
    }

    fn segment_base(&self, heap: HeapId, index: usize) -> u64 {
        self.heap(heap).base + index as u64 * self.config.segment_size
    }

    /// Bump-allocates `size` bytes (rounded up to 8) in `heap_id`.
    pub fn allocate(&self, size: u64, heap_id: HeapId) -> Result<(u64, SegmentRef), HeapError> {
        if size == 0 || size > self.config.segment_size {
            return Err(HeapError::InvalidSize(size));
        }
        let size = align8(size);
        let seg_size = self.config.segment_size;
        let heap = self.heap(heap_id);
        let mut st = heap.alloc.lock();
        let index = match st.current {
            Some(i) if heap.segments[i].bump.load(Ordering::Relaxed) + size <= seg_size => i,
            _ => {
                let i = self.open_segment(heap, &mut st)?;
                st.current = Some(i);
                i
            }
        };
        let seg = &heap.segments[index];
        let offset = seg.bump.load(Ordering::Relaxed);
        seg.bump.store(offset + size, Ordering::Relaxed);
        seg.live.fetch_add(size, Ordering::AcqRel);
        let base = self.segment_base(heap_id, index);
        Ok((
            base + offset,
            SegmentRef {
                heap: heap_id,
                index,
                base,
            },
        ))
    }

    fn open_segment(&self, heap: &Heap, st: &mut AllocState) -> Result<usize, HeapError> {
        let seg_size = self.config.segment_size;
        if let Some(budget) = heap.budget {
            if st.mapped_bytes + seg_size > budget {
                return Err(HeapError::OutOfMemory(heap.id));
            }
        }
        let index = match st.free.pop() {
            Some(i) => i,
            None if st.next_fresh < heap.segments.len() => {
                st.next_fresh += 1;
                st.next_fresh - 1
            }
            None => return Err(HeapError::OutOfMemory(heap.id)),
        };
        let seg = &heap.segments[index];
        seg.bump.store(0, Ordering::Relaxed);
        seg.live.store(0, Ordering::Relaxed);
        seg.advice.store(AdviceState::None as u8, Ordering::Relaxed);
        seg.mapped.store(true, Ordering::Release);
        st.mapped_bytes += seg_size;
        self.region_events.lock().push(RegionEvent::Mapped {
            base: self.segment_base(heap.id, index),
            length: seg_size,
            heap: heap.id,
        });
        self.events_pending.store(true, Ordering::Release);
        Ok(index)
    }

    /// Copies an object into `dst_heap` and retires its source bytes.
    ///
    /// The caller publishes the returned address. On error nothing changed.
    pub fn relocate(
        &self,
        object_address: u64,
        size: u64,
        src_heap: HeapId,
        dst_heap: HeapId,
    ) -> Result<u64, HeapError> {
        let size = align8(size);
        let not_in_heap = HeapError::NotInHeap {
            address: object_address,
            heap: src_heap,
        };
        let (heap, index) = self.segment_of(object_address).ok_or(not_in_heap.clone())?;
        let seg = &self.heap(heap).segments[index];
        let offset = object_address - self.segment_base(heap, index);
        if heap != src_heap
            || !seg.mapped.load(Ordering::Acquire)
            || offset + size > seg.bump.load(Ordering::Acquire)
        {
            return Err(not_in_heap);
        }
        let (dst, _) = self.allocate(size, dst_heap)?;
        // SAFETY: both ranges lie inside mapped segments of the reservation and
        // belong to distinct allocations; the migration protocol guarantees no
        // thread is accessing the source object.
        unsafe {
            ptr::copy_nonoverlapping(object_address as *const u8, dst as *mut u8, size as usize);
        }
        let prev = seg.live.fetch_sub(size, Ordering::AcqRel);
        debug_assert!(prev >= size, "live_bytes underflow");
        if src_heap == HeapId::Cold {
            self.reactivate(index);
        }
        Ok(dst)
    }

    /// Segment lost a promoted object: back to NONE so the next sweep re-advises it.
    fn reactivate(&self, index: usize) {
        let seg = &self.heap(HeapId::Cold).segments[index];
        let prev = seg.advice.swap(AdviceState::None as u8, Ordering::AcqRel);
        if AdviceState::from_u8(prev) != AdviceState::None {
            self.pending_resets.lock().push(AdviceEvent {
                base: self.segment_base(HeapId::Cold, index),
                length: self.config.segment_size,
                advice: Advice::Reset,
            });
        }
    }

    /// Drops a dead object's bytes from its segment's live count.
    pub fn release(&self, object_address: u64, size: u64) {
        if let Some((heap, index)) = self.segment_of(object_address) {
            let size = align8(size);
            let prev = self.heap(heap).segments[index]
                .live
                .fetch_sub(size, Ordering::AcqRel);
            debug_assert!(prev >= size, "live_bytes underflow");
        }
    }

    /// Advice for segments whose state should change. Idempotent: a second
    /// sweep with no intervening change returns nothing.
    pub fn segment_advice_sweep(&self, stage: AdviceStage) -> Vec<AdviceEvent> {
        let mut events: Vec<AdviceEvent> = std::mem::take(&mut *self.pending_resets.lock());
        let seg_size = self.config.segment_size;
        if self.config.huge_promote_hot {
            let hot = self.heap(HeapId::Hot);
            let _st = hot.alloc.lock();
            for (i, seg) in hot.segments.iter().enumerate() {
                if seg.mapped.load(Ordering::Acquire)
                    && seg.live.load(Ordering::Acquire) > 0
                    && seg
                        .advice
                        .compare_exchange(
                            AdviceState::None as u8,
                            AdviceState::Huge as u8,
                            Ordering::AcqRel,
                            Ordering::Acquire,
                        )
                        .is_ok()
                {
                    events.push(AdviceEvent {
                        base: self.segment_base(HeapId::Hot, i),
                        length: seg_size,
                        advice: Advice::Huge,
                    });
                }
            }
        }
        let cold = self.heap(HeapId::Cold);
        let st = cold.alloc.lock();
        for (i, seg) in cold.segments.iter().enumerate() {
            if !seg.mapped.load(Ordering::Acquire)
                || seg.live.load(Ordering::Acquire) == 0
                || st.current == Some(i)
            {
                continue;
            }
            let state = AdviceState::from_u8(seg.advice.load(Ordering::Acquire));
            let (next, advice) = match (stage, state) {
                (AdviceStage::Reactive, AdviceState::None) => {
                    (AdviceState::ColdAdvised, Advice::Cold)
                }
                (AdviceStage::Proactive, AdviceState::None | AdviceState::ColdAdvised) => {
                    (AdviceState::PagedOut, Advice::Pageout)
                }
                _ => continue,
            };
            seg.advice.store(next as u8, Ordering::Release);
            events.push(AdviceEvent {
                base: self.segment_base(HeapId::Cold, i),
                length: seg_size,
                advice,
            });
        }
        events
    }

    /// Unmaps every segment with no live bytes. Returns how many were reclaimed.
    pub fn reclaim_empty_segments(&self) -> usize {
        let seg_size = self.config.segment_size;
        let mut reclaimed = 0;
        for heap in &self.heaps {
            let mut st = heap.alloc.lock();
            for (i, seg) in heap.segments.iter().enumerate() {
                if !seg.mapped.load(Ordering::Acquire) || seg.live.load(Ordering::Acquire) != 0 {
                    continue;
                }
                let base = self.segment_base(heap.id, i);
                // SAFETY: the segment holds no live objects; the range is inside
                // the reservation.
                unsafe {
                    libc::madvise(
                        base as *mut libc::c_void,
                        seg_size as usize,
                        libc::MADV_DONTNEED,
                    );
                }
                seg.mapped.store(false, Ordering::Release);
                seg.bump.store(0, Ordering::Relaxed);
                seg.advice.store(AdviceState::None as u8, Ordering::Relaxed);
                if st.current == Some(i) {
                    st.current = None;
                }
                st.free.push(i);
                st.mapped_bytes -= seg_size;
                self.region_events.lock().push(RegionEvent::Unmapped {
                    base,
                    length: seg_size,
                });
                reclaimed += 1;
            }
            st.free.sort_unstable_by(|a, b| b.cmp(a));
        }
        if reclaimed > 0 {
            self.events_pending.store(true, Ordering::Release);
        }
        reclaimed
    }

    #[inline]
    pub fn has_region_events(&self) -> bool {
        self.events_pending.load(Ordering::Acquire)
    }

    pub fn drain_region_events(&self) -> Vec<RegionEvent> {
        let mut q = self.region_events.lock();
        self.events_pending.store(false, Ordering::Release);
        std::mem::take(&mut *q)
    }

    pub fn segments(&self, heap_id: HeapId) -> Vec<SegmentInfo> {
        let heap = self.heap(heap_id);
        let _st = heap.alloc.lock();
        heap.segments
            .iter()
            .enumerate()
            .filter(|(_, s)| s.mapped.load(Ordering::Acquire))
            .map(|(i, s)| SegmentInfo {
                base: self.segment_base(heap_id, i),
                length: self.config.segment_size,
                heap_id,
                bump_offset: s.bump.load(Ordering::Acquire),
                live_bytes: s.live.load(Ordering::Acquire),
                advice_state: AdviceState::from_u8(s.advice.load(Ordering::Acquire)),
            })
            .collect()
    }

    pub fn segment_info(&self, address: u64) -> Option<SegmentInfo> {
        let (heap, index) = self.segment_of(address)?;
        let seg = &self.heap(heap).segments[index];
        seg.mapped.load(Ordering::Acquire).then(|| SegmentInfo {
            base: self.segment_base(heap, index),
            length: self.config.segment_size,
            heap_id: heap,
            bump_offset: seg.bump.load(Ordering::Acquire),
            live_bytes: seg.live.load(Ordering::Acquire),
            advice_state: AdviceState::from_u8(seg.advice.load(Ordering::Acquire)),
        })
    }

    pub fn mapped_bytes(&self, heap_id: HeapId) -> u64 {
        self.heap(heap_id).alloc.lock().mapped_bytes
    }

    pub fn total_mapped_bytes(&self) -> u64 {
        HeapId::ALL.iter().map(|&h| self.mapped_bytes(h)).sum()
    }

    pub fn live_bytes(&self, heap_id: HeapId) -> u64 {
        self.segments(heap_id).iter().map(|s| s.live_bytes).sum()
    }
}

impl fmt::Debug for HeapManager {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HeapManager")
            .field("config", &self.config)
            .field("new_bytes", &self.mapped_bytes(HeapId::New))
            .field("hot_bytes", &self.mapped_bytes(HeapId::Hot))
            .field("cold_bytes", &self.mapped_bytes(HeapId::Cold))
            .finish()
    }
}

/// Copies `bytes` into managed memory at `address`.
///
/// # Safety
/// The range must lie inside a live allocation that no other thread accesses.
pub unsafe fn write_bytes(address: u64, bytes: &[u8]) {
    ptr::copy_nonoverlapping(bytes.as_ptr(), address as *mut u8, bytes.len());
}

/// Reads `len` bytes of managed memory at `address`.
///
/// # Safety
/// The range must lie inside a live allocation that is not being written.
pub unsafe fn read_bytes(address: u64, len: usize) -> Vec<u8> {
    std::slice::from_raw_parts(address as *const u8, len).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small() -> HeapConfig {
        HeapConfig {
            segment_size: 64 << 10,
            region_bytes: 64 << 20,
            ..HeapConfig::default()
        }
    }

    #[test]
    fn two_small_allocations_are_disjoint_and_aligned() {
        let hm = HeapManager::new(HeapConfig::default()).unwrap();
        let (a, sa) = hm.allocate(64, HeapId::New).unwrap();
        let (b, sb) = hm.allocate(64, HeapId::New).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a % 8, 0);
        assert_eq!(b % 8, 0);
        assert!(a + 64 <= b || b + 64 <= a);
        assert_eq!(hm.heap_of(a), Some(HeapId::New));
    }

    #[test]
    fn full_segment_request_gets_a_fresh_segment() {
        let hm = HeapManager::new(small()).unwrap();
        let seg = hm.config().segment_size;
        let (_, s1) = hm.allocate(8, HeapId::New).unwrap();
        let (a, s2) = hm.allocate(seg, HeapId::New).unwrap();
        assert_ne!(s1, s2);
        assert_eq!(a, s2.base);
        assert!(hm.allocate(seg + 1, HeapId::New).is_err());
        assert!(hm.allocate(0, HeapId::New).is_err());
    }

    #[test]
    fn random_allocations_never_overlap() {
        let hm = HeapManager::new(HeapConfig::default()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut spans: Vec<(u64, u64)> = (0..100_000)
            .map(|_| {
                let size = rng.random_range(16..=4096);
                let heap = HeapId::ALL[rng.random_range(0..3)];
                let (a, _) = hm.allocate(size, heap).unwrap();
                (a, a + size)
            })
            .collect();
        spans.sort_unstable();
        for w in spans.windows(2) {
            assert!(w[0].1 <= w[1].0, "overlap {:x?} {:x?}", w[0], w[1]);
        }
    }

    #[test]
    fn budget_exhaustion_is_out_of_memory() {
        let mut cfg = small();
        cfg.budgets[HeapId::Hot.index()] = Some(cfg.segment_size);
        let hm = HeapManager::new(cfg.clone()).unwrap();
        hm.allocate(cfg.segment_size, HeapId::Hot).unwrap();
        assert_eq!(
            hm.allocate(8, HeapId::Hot),
            Err(HeapError::OutOfMemory(HeapId::Hot))
        );
    }

    fn fill(hm: &HeapManager, heap: HeapId, payload: &[u8]) -> u64 {
        let (a, _) = hm.allocate(payload.len() as u64, heap).unwrap();
        unsafe { write_bytes(a, payload) };
        a
    }

    #[test]
    fn relocate_copies_verbatim() {
        let hm = HeapManager::new(HeapConfig::default()).unwrap();
        let payload: Vec<u8> = (0..1024u32).map(|i| (i * 7 % 251) as u8).collect();
        let a = fill(&hm, HeapId::New, &payload);
        let b = hm.relocate(a, 1024, HeapId::New, HeapId::Hot).unwrap();
        assert_eq!(hm.heap_of(b), Some(HeapId::Hot));
        assert_eq!(unsafe { read_bytes(b, 1024) }, payload);
        let c = hm.relocate(b, 1024, HeapId::Hot, HeapId::Cold).unwrap();
        let d = hm.relocate(c, 1024, HeapId::Cold, HeapId::Hot).unwrap();
        assert_eq!(unsafe { read_bytes(d, 1024) }, payload);
        assert_eq!(hm.live_bytes(HeapId::New), 0);
    }

    #[test]
    fn relocate_checks_source_heap_and_oom_leaves_source() {
        let mut cfg = small();
        cfg.budgets[HeapId::Cold.index()] = Some(0);
        let hm = HeapManager::new(cfg).unwrap();
        let a = fill(&hm, HeapId::New, &[1u8; 64]);
        assert!(matches!(
            hm.relocate(a, 64, HeapId::Hot, HeapId::Cold),
            Err(HeapError::NotInHeap { .. })
        ));
        assert_eq!(
            hm.relocate(a, 64, HeapId::New, HeapId::Cold),
            Err(HeapError::OutOfMemory(HeapId::Cold))
        );
        assert_eq!(hm.live_bytes(HeapId::New), 64);
        assert_eq!(unsafe { read_bytes(a, 64) }, vec![1u8; 64]);
    }

    #[test]
    fn random_relocations_preserve_checksums() {
        let hm = HeapManager::new(HeapConfig::default()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut objs: Vec<(u64, HeapId, Vec<u8>)> = (0..512)
            .map(|_| {
                let len = rng.random_range(8..2048);
                let payload: Vec<u8> = (0..len).map(|_| rng.random()).collect();
                (fill(&hm, HeapId::New, &payload), HeapId::New, payload)
            })
            .collect();
        for _ in 0..10_000 {
            let i = rng.random_range(0..objs.len());
            let dst = HeapId::ALL[rng.random_range(0..3)];
            let (addr, src, ref payload) = objs[i];
            let new = hm.relocate(addr, payload.len() as u64, src, dst).unwrap();
            objs[i].0 = new;
            objs[i].1 = dst;
        }
        for (addr, heap, payload) in &objs {
            assert_eq!(hm.heap_of(*addr), Some(*heap));
            assert_eq!(unsafe { read_bytes(*addr, payload.len()) }, *payload);
        }
    }

    #[test]
    fn sweep_promotes_hot_to_huge_once() {
        let hm = HeapManager::new(small()).unwrap();
        let (a, s) = hm.allocate(64, HeapId::Hot).unwrap();
        let ev = hm.segment_advice_sweep(AdviceStage::Reactive);
        assert_eq!(
            ev,
            vec![AdviceEvent {
                base: s.base,
                length: hm.config().segment_size,
                advice: Advice::Huge
            }]
        );
        assert_eq!(hm.segment_info(a).unwrap().advice_state, AdviceState::Huge);
        assert!(hm.segment_advice_sweep(AdviceStage::Reactive).is_empty());
    }

    #[test]
    fn reactive_cold_segments_get_cold_never_pageout() {
        let hm = HeapManager::new(small()).unwrap();
        let seg = hm.config().segment_size;
        let (a, _) = hm.allocate(seg, HeapId::Cold).unwrap();
        // Second allocation opens a new segment, sealing the first.
        hm.allocate(64, HeapId::Cold).unwrap();
        let ev = hm.segment_advice_sweep(AdviceStage::Reactive);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].advice, Advice::Cold);
        assert_eq!(ev[0].base, a);
        for _ in 0..3 {
            assert!(hm.segment_advice_sweep(AdviceStage::Reactive).is_empty());
        }
        let ev = hm.segment_advice_sweep(AdviceStage::Proactive);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].advice, Advice::Pageout);
        assert!(hm.segment_advice_sweep(AdviceStage::Proactive).is_empty());
        // A reactive sweep after pageout leaves the segment alone.
        assert!(hm.segment_advice_sweep(AdviceStage::Reactive).is_empty());
    }

    #[test]
    fn promotion_out_of_cold_resets_segment() {
        let hm = HeapManager::new(small()).unwrap();
        let a = fill(&hm, HeapId::Cold, &[9u8; 128]);
        fill(&hm, HeapId::Cold, &[9u8; 128]);
        hm.allocate(hm.config().segment_size, HeapId::Cold).unwrap();
        let ev = hm.segment_advice_sweep(AdviceStage::Proactive);
        assert_eq!(ev.len(), 1);
        hm.relocate(a, 128, HeapId::Cold, HeapId::Hot).unwrap();
        let ev = hm.segment_advice_sweep(AdviceStage::Proactive);
        let kinds: Vec<Advice> = ev.iter().map(|e| e.advice).collect();
        assert_eq!(kinds, vec![Advice::Reset, Advice::Huge, Advice::Pageout]);
    }

    #[test]
    fn reclaim_counts_empty_segments() {
        let hm = HeapManager::new(small()).unwrap();
        assert_eq!(hm.reclaim_empty_segments(), 0);
        let a = fill(&hm, HeapId::New, &[1; 64]);
        assert_eq!(hm.reclaim_empty_segments(), 0);
        hm.release(a, 64);
        assert_eq!(hm.reclaim_empty_segments(), 1);
        assert!(hm.segments(HeapId::New).is_empty());
        assert_eq!(hm.mapped_bytes(HeapId::New), 0);
    }

    #[test]
    fn draining_a_heap_reclaims_every_source_segment() {
        let hm = HeapManager::new(small()).unwrap();
        let objs: Vec<u64> = (0..2000)
            .map(|_| fill(&hm, HeapId::New, &[5; 200]))
            .collect();
        let n_segments = hm.segments(HeapId::New).len() as u64;
        assert!(n_segments > 1);
        let before = hm.total_mapped_bytes();
        for a in objs {
            hm.relocate(a, 200, HeapId::New, HeapId::Cold).unwrap();
        }
        let cold_mapped = hm.mapped_bytes(HeapId::Cold);
        assert_eq!(hm.reclaim_empty_segments() as u64, n_segments);
        assert_eq!(
            hm.total_mapped_bytes(),
            before + cold_mapped - n_segments * hm.config().segment_size
        );
        let events = hm.drain_region_events();
        let unmapped = events
            .iter()
            .filter(|e| matches!(e, RegionEvent::Unmapped { .. }))
            .count() as u64;
        assert_eq!(unmapped, n_segments);
    }

    #[test]
    fn reclaimed_segments_are_reused_zeroed() {
        let hm = HeapManager::new(small()).unwrap();
        let a = fill(&hm, HeapId::New, &[0xff; 64]);
        hm.release(a, 64);
        hm.reclaim_empty_segments();
        let (b, _) = hm.allocate(64, HeapId::New).unwrap();
        assert_eq!(a, b);
        assert_eq!(unsafe { read_bytes(b, 64) }, vec![0u8; 64]);
    }

    #[test]
    fn conservation_live_never_exceeds_bump() {
        let hm = HeapManager::new(small()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut live: Vec<(u64, u64, HeapId)> = Vec::new();
        for _ in 0..5000 {
            match rng.random_range(0..3) {
                0 | 1 => {
                    let size = rng.random_range(8..600);
                    let h = HeapId::ALL[rng.random_range(0..3)];
                    let (a, _) = hm.allocate(size, h).unwrap();
                    live.push((a, size, h));
                }
                _ if !live.is_empty() => {
                    let i = rng.random_range(0..live.len());
                    let (a, size, h) = live[i];
                    let dst = HeapId::ALL[rng.random_range(0..3)];
                    live[i] = (hm.relocate(a, size, h, dst).unwrap(), size, dst);
                }
                _ => {}
            }
            if rng.random_range(0..50) == 0 {
                hm.reclaim_empty_segments();
            }
        }
        for h in HeapId::ALL {
            for s in hm.segments(h) {
                assert!(s.live_bytes <= s.bump_offset && s.bump_offset <= s.length);
                assert_eq!(s.base % hm.config().page_size, 0);
            }
        }
        let live_sum: u64 = live.iter().map(|&(_, s, _)| align8(s)).sum();
        let seg_sum: u64 = HeapId::ALL.iter().map(|&h| hm.live_bytes(h)).sum();
        assert_eq!(live_sum, seg_sum);
    }
}
