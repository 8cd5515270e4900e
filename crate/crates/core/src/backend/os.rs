//! Linux adapter: forwards advice to `madvise` and measures residency with
//! `mincore`.

use std::collections::BTreeMap;

use super::{Backend, BackendError, FaultReport, ReclaimReport};
use crate::heap::{Advice, AdviceEvent};

const MADV_COLD: libc::c_int = 20;
const MADV_PAGEOUT: libc::c_int = 21;

/// Environment toggle enabling tests against the real kernel.
pub const ENV_TOGGLE: &str = "HADES_OS_BACKEND";

pub fn enabled_by_env() -> bool {
    std::env::var(ENV_TOGGLE).is_ok_and(|v| v == "1")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OsRegion {
    pub base: u64,
    pub length: u64,
    pub last_advice: Option<Advice>,
}

#[derive(Debug)]
pub struct OsBackend {
    page_size: u64,
    regions: BTreeMap<u64, OsRegion>,
}

impl Default for OsBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl OsBackend {
    pub fn new() -> Self {
        // SAFETY: sysconf has no preconditions.
        let page_size = unsafe { libc::sysconf(libc::_SC_PAGESIZE) } as u64;
        OsBackend {
            page_size,
            regions: BTreeMap::new(),
        }
    }

    pub fn region(&self, base: u64) -> Option<OsRegion> {
        self.regions.get(&base).copied()
    }

    /// Resident bytes of one range according to the kernel.
    pub fn resident_bytes(&self, base: u64, length: u64) -> u64 {
        let pages = length.div_ceil(self.page_size) as usize;
        let mut vec = vec![0u8; pages];
        // SAFETY: the range belongs to a live mapping and `vec` has one byte per page.
        let rc =
            unsafe { libc::mincore(base as *mut libc::c_void, length as usize, vec.as_mut_ptr()) };
        if rc != 0 {
            log::warn!("mincore failed: {}", std::io::Error::last_os_error());
            return 0;
        }
        vec.iter().filter(|b| *b & 1 == 1).count() as u64 * self.page_size
    }
}

impl Backend for OsBackend {
    fn map_region(&mut self, base: u64, length: u64, _window: u64) -> Result<(), BackendError> {
        if base % self.page_size != 0 || length % self.page_size != 0 {
            return Err(BackendError::UnknownRegion { base, length });
        }
        self.regions.insert(
            base,
            OsRegion {
                base,
                length,
                last_advice: None,
            },
        );
        Ok(())
    }

    fn unmap_region(&mut self, base: u64, length: u64) -> Result<(), BackendError> {
        self.regions
            .remove(&base)
            .map(|_| ())
            .ok_or(BackendError::UnknownRegion { base, length })
    }

    fn apply_advice(&mut self, event: &AdviceEvent) -> Result<(), BackendError> {
        let region = self
            .regions
            .get_mut(&event.base)
            .ok_or(BackendError::UnknownRegion {
                base: event.base,
                length: event.length,
            })?;
        let advice = match event.advice {
            Advice::Huge => libc::MADV_HUGEPAGE,
            Advice::Cold => MADV_COLD,
            Advice::Pageout => MADV_PAGEOUT,
            Advice::Reset => libc::MADV_NORMAL,
        };
        // SAFETY: advice never changes memory contents for these flags; the
        // range is a mapping owned by the heap manager.
        let rc = unsafe {
            libc::madvise(
                event.base as *mut libc::c_void,
                event.length as usize,
                advice,
            )
        };
        if rc != 0 {
            log::warn!(
                "madvise({}) on {:#x} failed: {}",
                event.advice.as_str(),
                event.base,
                std::io::Error::last_os_error()
            );
        }
        region.last_advice = Some(event.advice);
        Ok(())
    }

    fn touch(
        &mut self,
        address: u64,
        _size: u64,
        _window: u64,
    ) -> Result<FaultReport, BackendError> {
        let covered = self
            .regions
            .range(..=address)
            .next_back()
            .is_some_and(|(_, r)| address < r.base + r.length);
        if covered {
            Ok(FaultReport::default())
        } else {
            Err(BackendError::UnmappedAccess { address })
        }
    }

    fn pressure_tick(&mut self, _window: u64) -> ReclaimReport {
        ReclaimReport::default()
    }

    fn rss(&self) -> u64 {
        self.regions
            .values()
            .map(|r| self.resident_bytes(r.base, r.length))
            .sum()
    }
}
