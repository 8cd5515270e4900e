//! Key-value structures whose values (and, for the hash map, index nodes)
//! are managed objects.

use crate::heap::HeapError;
use crate::registry::RegistryError;

pub mod hash_map;
pub mod skiplist;

pub use hash_map::ManagedHashMap;
pub use skiplist::ManagedSkipList;

pub const MAX_KEY_LEN: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MapError {
    #[error("keys must be non-empty")]
    EmptyKey,
    #[error("key of {0} bytes exceeds {MAX_KEY_LEN}")]
    KeyTooLong(usize),
    #[error("capacity exhausted: {0}")]
    Capacity(#[from] HeapError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrevValuePresence {
    AbsentBefore,
    PresentBefore,
}

fn check_key(key: &[u8]) -> Result<(), MapError> {
    if key.is_empty() {
        return Err(MapError::EmptyKey);
    }
    if key.len() > MAX_KEY_LEN {
        return Err(MapError::KeyTooLong(key.len()));
    }
    Ok(())
}

/// Allocates a value object `[len: u64][bytes]` in the NEW heap.
fn new_value(rt: &crate::Runtime, value: &[u8]) -> Result<(u64, u64), MapError> {
    let size = 8 + value.len() as u64;
    let addr = rt.allocate(size)?;
    // SAFETY: fresh allocation of `size` bytes, not yet published.
    unsafe {
        crate::heap::write_bytes(addr, &(value.len() as u64).to_ne_bytes());
        crate::heap::write_bytes(addr + 8, value);
    }
    Ok((addr, size))
}

fn read_value<S: crate::ObjectScope>(scope: &S) -> Vec<u8> {
    let len = scope.read_u64(0) as usize;
    scope.read(8, len)
}
