//! Coarse-locked skiplist. Towers are ordinary heap memory; only the values
//! are managed, each behind a root guide held by its tower node.

use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_key, new_value, read_value, MapError, PrevValuePresence};
use crate::guide::{GuideSlot, GuideWord};
use crate::registry::{ObjectId, RootSlot};
use crate::runtime::Instrumentation;

const MAX_LEVEL: usize = 20;
const NIL: usize = usize::MAX;
const HEAD: usize = 0;

struct Node {
    key: Box<[u8]>,
    value: RootSlot,
    value_id: ObjectId,
    value_size: u64,
    next: Vec<usize>,
}

struct Inner {
    nodes: Vec<Node>,
    free: Vec<usize>,
    level: usize,
    len: usize,
    rng: ChaCha8Rng,
}

impl Inner {
    /// Predecessor of `key` on every level, and the node holding `key` if any.
    fn search(&self, key: &[u8]) -> ([usize; MAX_LEVEL], Option<usize>) {
        let mut update = [HEAD; MAX_LEVEL];
        let mut x = HEAD;
        for lvl in (0..self.level).rev() {
            loop {
                let n = self.nodes[x].next[lvl];
                if n != NIL && &*self.nodes[n].key < key {
                    x = n;
                } else {
                    break;
                }
            }
            update[lvl] = x;
        }
        let n = self.nodes[x].next[0];
        let hit = (n != NIL && &*self.nodes[n].key == key).then_some(n);
        (update, hit)
    }

    fn random_level(&mut self) -> usize {
        let mut lvl = 1;
        while lvl < MAX_LEVEL && self.rng.random_bool(0.5) {
            lvl += 1;
        }
        lvl
    }
}

pub struct ManagedSkipList<I: Instrumentation> {
    inst: I,
    inner: Mutex<Inner>,
}

impl<I: Instrumentation> ManagedSkipList<I> {
    pub fn new(inst: I, seed: u64) -> Self {
        let head = Node {
            key: Box::new([]),
            value: Arc::new(GuideSlot::new(GuideWord::NULL)),
            value_id: ObjectId::ROOT,
            value_size: 0,
            next: vec![NIL; MAX_LEVEL],
        };
        ManagedSkipList {
            inst,
            inner: Mutex::new(Inner {
                nodes: vec![head],
                free: Vec::new(),
                level: 1,
                len: 0,
                rng: ChaCha8Rng::seed_from_u64(seed),
            }),
        }
    }

    pub fn get(&self, key: &[u8]) -> Option<Vec<u8>> {
        let inner = self.inner.lock();
        let (_, hit) = inner.search(key);
        let node = &inner.nodes[hit?];
        let scope = self.inst.enter(&node.value, node.value_size);
        Some(read_value(&scope))
    }

    pub fn put(&self, key: &[u8], value: &[u8]) -> Result<PrevValuePresence, MapError> {
        check_key(key)?;
        let (vaddr, vsize) = new_value(self.inst.runtime(), value)?;
        let vword = GuideWord::managed(vaddr).expect("heap addresses fit in 48 bits");
        let mut inner = self.inner.lock();
        let (update, hit) = inner.search(key);
        if let Some(i) = hit {
            let node = &mut inner.nodes[i];
            self.inst.deregister(node.value_id)?;
            node.value.replace(vword);
            node.value_id = self.inst.register_root(&node.value, vsize)?;
            node.value_size = vsize;
            return Ok(PrevValuePresence::PresentBefore);
        }
        let slot: RootSlot = Arc::new(GuideSlot::new(vword));
        let value_id = self.inst.register_root(&slot, vsize)?;
        let lvl = inner.random_level();
        if lvl > inner.level {
            inner.level = lvl;
        }
        let node = Node {
            key: key.into(),
            value: slot,
            value_id,
            value_size: vsize,
            next: vec![NIL; lvl],
        };
        let idx = match inner.free.pop() {
            Some(i) => {
                inner.nodes[i] = node;
                i
            }
            None => {
                inner.nodes.push(node);
                inner.nodes.len() - 1
            }
        };
        for (l, &pred) in update.iter().enumerate().take(lvl) {
            inner.nodes[idx].next[l] = inner.nodes[pred].next[l];
            inner.nodes[pred].next[l] = idx;
        }
        inner.len += 1;
        Ok(PrevValuePresence::AbsentBefore)
    }

    pub fn remove(&self, key: &[u8]) -> Result<bool, MapError> {
        let mut inner = self.inner.lock();
        let (update, hit) = inner.search(key);
        let Some(i) = hit else {
            return Ok(false);
        };
        for (l, &pred) in update.iter().enumerate().take(inner.nodes[i].next.len()) {
            inner.nodes[pred].next[l] = inner.nodes[i].next[l];
        }
        let node = &mut inner.nodes[i];
        node.value.replace(GuideWord::NULL);
        self.inst.deregister(node.value_id)?;
        node.key = Box::new([]);
        node.next.clear();
        inner.free.push(i);
        inner.len -= 1;
        Ok(true)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
