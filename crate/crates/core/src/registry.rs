//! Registry of managed objects, window scans and CIW classification.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::guide::{GuideSlot, ADDRESS_BITS};
use crate::heap::HeapId;

/// A guide slot that lives outside managed memory (held by a structure).
pub type RootSlot = Arc<GuideSlot>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectId(pub u64);

impl ObjectId {
    /// Owner id reported for root-owned objects. Never assigned to an object.
    pub const ROOT: ObjectId = ObjectId(0);
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Where the unique guide of an object lives.
#[derive(Clone)]
pub enum Owner {
    Root(RootSlot),
    /// Embedded at `offset` bytes into another managed object.
    Object {
        id: ObjectId,
        offset: u64,
    },
}

impl fmt::Debug for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Owner::Root(slot) => write!(f, "Root({:p})", Arc::as_ptr(slot)),
            Owner::Object { id, offset } => write!(f, "Object({id}+{offset})"),
        }
    }
}

impl Owner {
    fn key(&self) -> SlotKey {
        match self {
            Owner::Root(slot) => SlotKey::Root(Arc::as_ptr(slot) as usize),
            Owner::Object { id, offset } => SlotKey::Object(*id, *offset),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum SlotKey {
    Root(usize),
    Object(ObjectId, u64),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("owner {0} is not registered")]
    UnknownOwner(ObjectId),
    #[error("guide slot already has a registered object")]
    DuplicateRegistration,
    #[error("guide slot holds {found:#x}, expected {expected:#x}")]
    SlotMismatch { expected: u64, found: u64 },
    #[error("address {0:#x} does not fit in 48 bits")]
    AddressOverflow(u64),
    #[error("guide offset {offset} is not an aligned slot inside owner {owner}")]
    BadOffset { owner: ObjectId, offset: u64 },
    #[error("object {0} is not registered")]
    UnknownObject(ObjectId),
    #[error("object {id} still owns {children} registered objects")]
    DanglingChildren { id: ObjectId, children: u32 },
}

struct ObjectRecord {
    owner: Owner,
    size: u64,
    heap: HeapId,
    address: u64,
    ciw: u32,
    last_window_accessed: bool,
    children: u32,
    retired: bool,
}

/// Read-only copy of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordInfo {
    pub object_id: ObjectId,
    pub owner_id: ObjectId,
    pub owner_offset: u64,
    pub size: u64,
    pub heap: HeapId,
    pub address: u64,
    pub ciw: u32,
    pub last_window_accessed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MigrationOrder {
    pub object_id: ObjectId,
    pub dst_heap: HeapId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowReport {
    pub window: u64,
    /// Sorted ascending.
    pub accessed_ids: Vec<ObjectId>,
    /// `ciw_histogram[k]` objects have ciw = k.
    pub ciw_histogram: Vec<u64>,
    /// Object counts by [`HeapId::index`].
    pub heap_counts: [u64; 3],
    pub scanned: u64,
}

/// Handle to an object's guide slot, valid while the collector is the only mover.
pub enum SlotHandle {
    Root(RootSlot),
    Embedded(u64),
}

impl SlotHandle {
    pub fn slot(&self) -> &GuideSlot {
        match self {
            SlotHandle::Root(s) => s,
            // SAFETY: embedded slots are 8-byte aligned words inside a live
            // owner; the owner cannot move or be reaped while the collector
            // (the only mover and reaper) holds this handle.
            SlotHandle::Embedded(addr) => unsafe { GuideSlot::from_addr(*addr) },
        }
    }

    pub fn slot_address(&self) -> u64 {
        match self {
            SlotHandle::Root(s) => Arc::as_ptr(s) as u64,
            SlotHandle::Embedded(a) => *a,
        }
    }
}

/// Location of a live object.
pub struct Located {
    pub slot: SlotHandle,
    pub address: u64,
    pub size: u64,
    pub heap: HeapId,
}

/// The Fig-5 style transition for one object. `None` means it stays put.
pub fn classify(heap: HeapId, accessed: bool, ciw: u32, c_t: u32) -> Option<HeapId> {
    match heap {
        HeapId::New if accessed => Some(HeapId::Hot),
        HeapId::New | HeapId::Hot if ciw > c_t => Some(HeapId::Cold),
        HeapId::Cold if accessed => Some(HeapId::Hot),
        _ => None,
    }
}

const SHARDS: usize = 64;

type Shard = Mutex<HashMap<ObjectId, ObjectRecord>>;

pub struct Registry {
    shards: Box<[Shard]>,
    slots: Box<[Mutex<HashSet<SlotKey>>]>,
    next_id: AtomicU64,
    live: AtomicUsize,
    windows: AtomicU64,
}

impl Default for Registry {
    fn default() -> Self {
        Self::new()
    }
}

struct View {
    id: ObjectId,
    owner: Owner,
    address: u64,
}

impl Registry {
    pub fn new() -> Self {
        Registry {
            shards: (0..SHARDS).map(|_| Mutex::new(HashMap::new())).collect(),
            slots: (0..SHARDS).map(|_| Mutex::new(HashSet::new())).collect(),
            next_id: AtomicU64::new(1),
            live: AtomicUsize::new(0),
            windows: AtomicU64::new(0),
        }
    }

    fn shard(&self, id: ObjectId) -> &Shard {
        &self.shards[(id.0 as usize) % SHARDS]
    }

    fn slot_shard(&self, key: &SlotKey) -> &Mutex<HashSet<SlotKey>> {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        key.hash(&mut h);
        &self.slots[(h.finish() as usize) % SHARDS]
    }

    /// Number of live (non-retired) objects.
    pub fn len(&self) -> usize {
        self.live.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers the object currently referenced by the guide slot at
    /// `owner`. The object starts in the NEW heap.
    pub fn register(
        &self,
        owner: Owner,
        size: u64,
        initial_address: u64,
    ) -> Result<ObjectId, RegistryError> {
        if initial_address >> ADDRESS_BITS != 0 {
            return Err(RegistryError::AddressOverflow(initial_address));
        }
        let slot = match &owner {
            Owner::Root(slot) => SlotHandle::Root(slot.clone()),
            Owner::Object { id, offset } => {
                let mut shard = self.shard(*id).lock();
                let parent = shard
                    .get_mut(id)
                    .filter(|r| !r.retired)
                    .ok_or(RegistryError::UnknownOwner(*id))?;
                if offset % 8 != 0 || offset + 8 > parent.size {
                    return Err(RegistryError::BadOffset {
                        owner: *id,
                        offset: *offset,
                    });
                }
                parent.children += 1;
                SlotHandle::Embedded(parent.address + offset)
            }
        };
        let undo_parent = || {
            if let Owner::Object { id, .. } = &owner {
                if let Some(p) = self.shard(*id).lock().get_mut(id) {
                    p.children -= 1;
                }
            }
        };
        let key = owner.key();
        if !self.slot_shard(&key).lock().insert(key) {
            undo_parent();
            return Err(RegistryError::DuplicateRegistration);
        }
        let found = slot.slot().load().address();
        if found != initial_address {
            self.slot_shard(&key).lock().remove(&key);
            undo_parent();
            return Err(RegistryError::SlotMismatch {
                expected: initial_address,
                found,
            });
        }
        let id = ObjectId(self.next_id.fetch_add(1, Ordering::Relaxed));
        self.shard(id).lock().insert(
            id,
            ObjectRecord {
                owner,
                size,
                heap: HeapId::New,
                address: initial_address,
                ciw: 0,
                last_window_accessed: false,
                children: 0,
                retired: false,
            },
        );
        self.live.fetch_add(1, Ordering::AcqRel);
        Ok(id)
    }

    /// Retires a record. Its bytes are released by the next [`reap_retired`](Self::reap_retired).
    pub fn deregister(&self, id: ObjectId) -> Result<(), RegistryError> {
        let owner = {
            let mut shard = self.shard(id).lock();
            let rec = shard
                .get_mut(&id)
                .filter(|r| !r.retired)
                .ok_or(RegistryError::UnknownObject(id))?;
            if rec.children > 0 {
                return Err(RegistryError::DanglingChildren {
                    id,
                    children: rec.children,
                });
            }
            rec.retired = true;
            rec.owner.clone()
        };
        let key = owner.key();
        self.slot_shard(&key).lock().remove(&key);
        if let Owner::Object { id: parent, .. } = owner {
            if let Some(p) = self.shard(parent).lock().get_mut(&parent) {
                p.children -= 1;
            }
        }
        self.live.fetch_sub(1, Ordering::AcqRel);
        Ok(())
    }

    /// Physically removes retired records, returning `(address, size, heap)`
    /// of each so the caller can release the bytes.
    pub fn reap_retired(&self) -> Vec<(u64, u64, HeapId)> {
        let mut out = Vec::new();
        for shard in self.shards.iter() {
            shard.lock().retain(|_, r| {
                if r.retired {
                    out.push((r.address, r.size, r.heap));
                }
                !r.retired
            });
        }
        out
    }

    pub fn contains(&self, id: ObjectId) -> bool {
        self.shard(id).lock().get(&id).is_some_and(|r| !r.retired)
    }

    pub fn record(&self, id: ObjectId) -> Option<RecordInfo> {
        let shard = self.shard(id).lock();
        let r = shard.get(&id).filter(|r| !r.retired)?;
        Some(info(id, r))
    }

    /// Every live record, sorted by id.
    pub fn records(&self) -> Vec<RecordInfo> {
        let mut v: Vec<RecordInfo> = self
            .shards
            .iter()
            .flat_map(|s| {
                s.lock()
                    .iter()
                    .filter(|(_, r)| !r.retired)
                    .map(|(id, r)| info(*id, r))
                    .collect::<Vec<_>>()
            })
            .collect();
        v.sort_unstable_by_key(|r| r.object_id);
        v
    }

    pub fn locate(&self, id: ObjectId) -> Option<Located> {
        let (owner, address, size, heap) = {
            let shard = self.shard(id).lock();
            let r = shard.get(&id)?;
            (r.owner.clone(), r.address, r.size, r.heap)
        };
        let slot = match owner {
            Owner::Root(s) => SlotHandle::Root(s),
            Owner::Object { id: parent, offset } => {
                let base = self.shard(parent).lock().get(&parent)?.address;
                SlotHandle::Embedded(base + offset)
            }
        };
        Some(Located {
            slot,
            address,
            size,
            heap,
        })
    }

    /// Whether a record is retired (deregistered but not yet reaped).
    pub fn is_retired(&self, id: ObjectId) -> bool {
        self.shard(id).lock().get(&id).is_some_and(|r| r.retired)
    }

    /// Records a completed move. Called before the new address is published.
    pub fn update_location(&self, id: ObjectId, address: u64, heap: HeapId) {
        if let Some(r) = self.shard(id).lock().get_mut(&id) {
            r.address = address;
            r.heap = heap;
        }
    }

    fn views(&self) -> Vec<View> {
        let mut v: Vec<View> = Vec::with_capacity(self.len());
        for shard in self.shards.iter() {
            v.extend(
                shard
                    .lock()
                    .iter()
                    .filter(|(_, r)| !r.retired)
                    .map(|(id, r)| View {
                        id: *id,
                        owner: r.owner.clone(),
                        address: r.address,
                    }),
            );
        }
        v.sort_unstable_by_key(|v| v.id);
        v
    }

    /// Reads and clears every access bit, updating CIW counters.
    pub fn scan_window(&self) -> WindowReport {
        let window = self.windows.fetch_add(1, Ordering::AcqRel);
        let views = self.views();
        let mut accessed = Vec::with_capacity(views.len());
        for v in &views {
            let slot = match &v.owner {
                Owner::Root(s) => SlotHandle::Root(s.clone()),
                Owner::Object { id, offset } => match views.binary_search_by_key(id, |p| p.id) {
                    Ok(i) => SlotHandle::Embedded(views[i].address + offset),
                    Err(_) => {
                        accessed.push(false);
                        continue;
                    }
                },
            };
            accessed.push(slot.slot().clear_access());
        }
        let mut report = WindowReport {
            window,
            ..WindowReport::default()
        };
        for (v, &hit) in views.iter().zip(&accessed) {
            let mut shard = self.shard(v.id).lock();
            let Some(r) = shard.get_mut(&v.id).filter(|r| !r.retired) else {
                continue;
            };
            r.last_window_accessed = hit;
            r.ciw = if hit { 0 } else { r.ciw.saturating_add(1) };
            if hit {
                report.accessed_ids.push(v.id);
            }
            let k = r.ciw as usize;
            if report.ciw_histogram.len() <= k {
                report.ciw_histogram.resize(k + 1, 0);
            }
            report.ciw_histogram[k] += 1;
            report.heap_counts[r.heap.index()] += 1;
            report.scanned += 1;
        }
        report
    }

    /// Orders implied by the last scan under threshold `c_t`, sorted by id.
    pub fn classify_and_schedule(&self, c_t: u32) -> Vec<MigrationOrder> {
        let mut orders: Vec<MigrationOrder> = Vec::new();
        for shard in self.shards.iter() {
            for (id, r) in shard.lock().iter().filter(|(_, r)| !r.retired) {
                if let Some(dst) = classify(r.heap, r.last_window_accessed, r.ciw, c_t) {
                    orders.push(MigrationOrder {
                        object_id: *id,
                        dst_heap: dst,
                    });
                }
            }
        }
        orders.sort_unstable();
        orders
    }

    /// Whether a previously deferred order still makes sense.
    pub(crate) fn order_still_valid(&self, order: &MigrationOrder) -> bool {
        let shard = self.shard(order.object_id).lock();
        shard.get(&order.object_id).is_some_and(|r| {
            !r.retired
                && r.heap != order.dst_heap
                && (order.dst_heap != HeapId::Cold || !r.last_window_accessed)
        })
    }

    /// Address of the guide slot that owns `id`.
    pub fn slot_address(&self, id: ObjectId) -> Option<u64> {
        self.locate(id).map(|l| l.slot.slot_address())
    }
}

fn info(id: ObjectId, r: &ObjectRecord) -> RecordInfo {
    let (owner_id, owner_offset) = match &r.owner {
        Owner::Root(_) => (ObjectId::ROOT, 0),
        Owner::Object { id, offset } => (*id, *offset),
    };
    RecordInfo {
        object_id: id,
        owner_id,
        owner_offset,
        size: r.size,
        heap: r.heap,
        address: r.address,
        ciw: r.ciw,
        last_window_accessed: r.last_window_accessed,
    }
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("live", &self.len())
            .finish()
    }
}
