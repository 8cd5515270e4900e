//! Segmented-lock hash map. Each entry is a managed index node holding the
//! key and the guide of a managed value object.
//!
//! Node layout: `[value guide][key_len][key bytes]`.

use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::Arc;

use parking_lot::RwLock;

use super::{check_key, new_value, read_value, MapError, PrevValuePresence};
use crate::guide::{GuideSlot, GuideWord};
use crate::registry::{ObjectId, RootSlot};
use crate::runtime::{Instrumentation, ObjectScope};

const SEGMENTS: usize = 64;
const INITIAL_BUCKETS: usize = 16;
const NODE_HEADER: u64 = 16;

struct Entry {
    hash: u64,
    node: RootSlot,
    node_id: ObjectId,
    node_size: u64,
    value_id: ObjectId,
    value_size: u64,
}

struct Segment {
    buckets: Vec<Vec<Entry>>,
    len: usize,
}

impl Segment {
    fn new() -> Self {
        Segment {
            buckets: (0..INITIAL_BUCKETS).map(|_| Vec::new()).collect(),
            len: 0,
        }
    }

    fn bucket_of(&self, hash: u64) -> usize {
        // The low bits pick the segment.
        ((hash >> 6) as usize) & (self.buckets.len() - 1)
    }

    fn grow(&mut self) {
        let n = self.buckets.len() * 2;
        let old = std::mem::replace(&mut self.buckets, (0..n).map(|_| Vec::new()).collect());
        for e in old.into_iter().flatten() {
            let b = self.bucket_of(e.hash);
            self.buckets[b].push(e);
        }
    }
}

pub struct ManagedHashMap<I: Instrumentation> {
    inst: I,
    segments: Box<[RwLock<Segment>]>,
}

fn hash_key(key: &[u8]) -> u64 {
    let mut h = DefaultHasher::new();
    key.hash(&mut h);
    h.finish()
}

impl<I: Instrumentation> ManagedHashMap<I> {
    pub fn new(inst: I) -> Self {
        ManagedHashMap {
            inst,
            segments: (0..SEGMENTS).map(|_| RwLock::new(Segment::new())).collect(),
        }
    }

    pub fn instrumentation(&self) -> &I {
        &self.inst
    }

    fn segment(&self, hash: u64) -> &RwLock<Segment> {
        &self.segments[hash as usize % SEGMENTS]
    }

    fn key_matches(&self, e: &Entry, key: &[u8]) -> bool {
        let node = self.inst.enter(&e.node, e.node_size);
        node.read_u64(8) == key.len() as u64 && node.bytes(NODE_HEADER, key.len()) == key
    }

    pub fn get(&self, key: &[u8]) -> Option<Vec<u8>> {
        let h = hash_key(key);
        let seg = self.segment(h).read();
        for e in seg.buckets[seg.bucket_of(h)].iter().filter(|e| e.hash == h) {
            let node = self.inst.enter(&e.node, e.node_size);
            if node.read_u64(8) != key.len() as u64 || node.bytes(NODE_HEADER, key.len()) != key {
                continue;
            }
            let value = self.inst.enter(node.slot_at(0), e.value_size);
            return Some(read_value(&value));
        }
        None
    }

    pub fn contains_key(&self, key: &[u8]) -> bool {
        let h = hash_key(key);
        let seg = self.segment(h).read();
        seg.buckets[seg.bucket_of(h)]
            .iter()
            .any(|e| e.hash == h && self.key_matches(e, key))
    }

    pub fn put(&self, key: &[u8], value: &[u8]) -> Result<PrevValuePresence, MapError> {
        check_key(key)?;
        let rt = self.inst.runtime().clone();
        let (vaddr, vsize) = new_value(&rt, value)?;
        let vword = GuideWord::managed(vaddr).expect("heap addresses fit in 48 bits");
        let h = hash_key(key);
        let mut seg = self.segment(h).write();
        let b = seg.bucket_of(h);
        let found = seg.buckets[b]
            .iter()
            .position(|e| e.hash == h && self.key_matches(e, key));
        if let Some(i) = found {
            let e = &mut seg.buckets[b][i];
            let value_id = {
                let node = self.inst.enter(&e.node, e.node_size);
                self.inst.deregister(e.value_id)?;
                node.slot_at(0).replace(vword);
                self.inst.register_child(e.node_id, 0, vsize, vaddr)?
            };
            e.value_id = value_id;
            e.value_size = vsize;
            return Ok(PrevValuePresence::PresentBefore);
        }

        let node_size = NODE_HEADER + key.len() as u64;
        let naddr = rt.allocate(node_size)?;
        // SAFETY: fresh allocation of `node_size` bytes, not yet published.
        unsafe {
            crate::heap::write_bytes(naddr, &vword.raw().to_ne_bytes());
            crate::heap::write_bytes(naddr + 8, &(key.len() as u64).to_ne_bytes());
            crate::heap::write_bytes(naddr + NODE_HEADER, key);
        }
        let node: RootSlot = Arc::new(GuideSlot::new(
            GuideWord::managed(naddr).expect("heap addresses fit in 48 bits"),
        ));
        let node_id = self.inst.register_root(&node, node_size)?;
        let value_id = self.inst.register_child(node_id, 0, vsize, vaddr)?;
        seg.buckets[b].push(Entry {
            hash: h,
            node,
            node_id,
            node_size,
            value_id,
            value_size: vsize,
        });
        seg.len += 1;
        if seg.len > seg.buckets.len() {
            seg.grow();
        }
        Ok(PrevValuePresence::AbsentBefore)
    }

    pub fn remove(&self, key: &[u8]) -> Result<bool, MapError> {
        let h = hash_key(key);
        let mut seg = self.segment(h).write();
        let b = seg.bucket_of(h);
        let Some(i) = seg.buckets[b]
            .iter()
            .position(|e| e.hash == h && self.key_matches(e, key))
        else {
            return Ok(false);
        };
        let e = seg.buckets[b].swap_remove(i);
        seg.len -= 1;
        {
            let node = self.inst.enter(&e.node, e.node_size);
            node.slot_at(0).replace(GuideWord::NULL);
        }
        self.inst.deregister(e.value_id)?;
        self.inst.deregister(e.node_id)?;
        Ok(true)
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.read().len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
