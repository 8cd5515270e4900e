//! Page-level backends that consume heap advice.
//!
//! [`SimBackend`] models residency and fault cost deterministically. The
//! [`os`] adapter issues the same advice to the kernel.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::heap::{Advice, AdviceEvent, RegionEvent};

#[cfg(target_os = "linux")]
pub mod os;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("no mapped region covers {base:#x}+{length}")]
    UnknownRegion { base: u64, length: u64 },
    #[error("access to unmapped memory at {address:#x}")]
    UnmappedAccess { address: u64 },
    #[error("region {base:#x}+{length} overlaps an existing mapping")]
    Overlap { base: u64, length: u64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultReport {
    pub major_faults: u64,
    pub charged_ns: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReclaimReport {
    pub bytes_reclaimed: u64,
}

/// Interface shared by the simulator and the OS adapter.
pub trait Backend: Send {
    fn map_region(&mut self, base: u64, length: u64, window: u64) -> Result<(), BackendError>;
    fn unmap_region(&mut self, base: u64, length: u64) -> Result<(), BackendError>;
    fn apply_advice(&mut self, event: &AdviceEvent) -> Result<(), BackendError>;
    fn touch(&mut self, address: u64, size: u64, window: u64) -> Result<FaultReport, BackendError>;
    fn pressure_tick(&mut self, window: u64) -> ReclaimReport;
    fn rss(&self) -> u64;

    fn apply_region_event(&mut self, event: &RegionEvent, window: u64) -> Result<(), BackendError> {
        match *event {
            RegionEvent::Mapped { base, length, .. } => self.map_region(base, length, window),
            RegionEvent::Unmapped { base, length } => self.unmap_region(base, length),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendMode {
    AdviceOnly,
    /// Background pressure: evicts down to the limit but never touches the
    /// recently active working set.
    Pressure(u64),
    /// Hard limit: strict LRU down to the limit.
    CgroupLimit(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub mode: BackendMode,
    pub page_size: u64,
    pub fault_penalty_ns: u64,
    /// Pages touched within this many windows are on the active list and
    /// exempt from `Pressure` eviction.
    pub active_windows: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            mode: BackendMode::AdviceOnly,
            page_size: 4096,
            fault_penalty_ns: 10_000,
            active_windows: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Residency {
    Resident,
    ColdListed,
    Swapped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageState {
    pub residency: Residency,
    pub last_touch_window: u64,
    pub huge: bool,
}

#[derive(Debug, Clone)]
struct Region {
    pages: Vec<PageState>,
}

/// Deterministic residency model.
#[derive(Debug, Clone)]
pub struct SimBackend {
    config: SimConfig,
    regions: BTreeMap<u64, Region>,
    resident_pages: u64,
    huge_pages: u64,
    total_faults: u64,
}

impl SimBackend {
    pub fn new(config: SimConfig) -> Self {
        SimBackend {
            config,
            regions: BTreeMap::new(),
            resident_pages: 0,
            huge_pages: 0,
            total_faults: 0,
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn set_mode(&mut self, mode: BackendMode) {
        self.config.mode = mode;
    }

    pub fn total_faults(&self) -> u64 {
        self.total_faults
    }

    pub fn huge_pages(&self) -> u64 {
        self.huge_pages
    }

    pub fn mapped_bytes(&self) -> u64 {
        self.regions
            .values()
            .map(|r| r.pages.len() as u64)
            .sum::<u64>()
            * self.config.page_size
    }

    /// State of the page containing `address`.
    pub fn page(&self, address: u64) -> Option<PageState> {
        let (base, region) = self.regions.range(..=address).next_back()?;
        let idx = ((address - base) / self.config.page_size) as usize;
        region.pages.get(idx).copied()
    }

    /// Every mapped page as `(page address, state)`, ascending.
    pub fn pages(&self) -> impl Iterator<Item = (u64, PageState)> + '_ {
        let ps = self.config.page_size;
        self.regions.iter().flat_map(move |(base, r)| {
            r.pages
                .iter()
                .enumerate()
                .map(move |(i, p)| (base + i as u64 * ps, *p))
        })
    }

    /// Region containing `[base, base+length)`, as (region base, first page, page count).
    fn span(&self, base: u64, length: u64) -> Option<(u64, usize, usize)> {
        let (rbase, region) = self.regions.range(..=base).next_back()?;
        let ps = self.config.page_size;
        let end = base.checked_add(length)?;
        let rend = rbase + region.pages.len() as u64 * ps;
        if end > rend || length == 0 {
            return None;
        }
        let first = ((base - rbase) / ps) as usize;
        let last = ((end - 1 - rbase) / ps) as usize;
        Some((*rbase, first, last - first + 1))
    }

    fn evict(&mut self, limit: u64, window: u64, protect_active: bool) -> u64 {
        let ps = self.config.page_size;
        let limit_pages = limit / ps;
        if self.resident_pages <= limit_pages {
            return 0;
        }
        let active = self.config.active_windows;
        let mut candidates: Vec<(bool, u64, u64, usize)> = Vec::new();
        for (base, r) in &self.regions {
            for (i, p) in r.pages.iter().enumerate() {
                if p.residency == Residency::Swapped {
                    continue;
                }
                if protect_active && p.last_touch_window + active > window {
                    continue;
                }
                candidates.push((
                    p.residency != Residency::ColdListed,
                    p.last_touch_window,
                    *base,
                    i,
                ));
            }
        }
        candidates.sort_unstable();
        let mut evicted = 0;
        for (_, _, base, i) in candidates {
            if self.resident_pages <= limit_pages {
                break;
            }
            let page = &mut self.regions.get_mut(&base).expect("candidate region").pages[i];
            page.residency = Residency::Swapped;
            self.resident_pages -= 1;
            evicted += 1;
        }
        evicted * ps
    }
}

impl Backend for SimBackend {
    fn map_region(&mut self, base: u64, length: u64, window: u64) -> Result<(), BackendError> {
        let ps = self.config.page_size;
        let overlaps = self
            .regions
            .range(..base + length)
            .next_back()
            .is_some_and(|(b, r)| b + r.pages.len() as u64 * ps > base);
        if overlaps {
            return Err(BackendError::Overlap { base, length });
        }
        let n = length.div_ceil(ps) as usize;
        self.regions.insert(
            base,
            Region {
                pages: vec![
                    PageState {
                        residency: Residency::Resident,
                        last_touch_window: window,
                        huge: false,
                    };
                    n
                ],
            },
        );
        self.resident_pages += n as u64;
        Ok(())
    }

    fn unmap_region(&mut self, base: u64, length: u64) -> Result<(), BackendError> {
        let region = self
            .regions
            .remove(&base)
            .ok_or(BackendError::UnknownRegion { base, length })?;
        for p in &region.pages {
            if p.residency != Residency::Swapped {
                self.resident_pages -= 1;
            }
            if p.huge {
                self.huge_pages -= 1;
            }
        }
        Ok(())
    }

    fn apply_advice(&mut self, event: &AdviceEvent) -> Result<(), BackendError> {
        let (rbase, first, count) =
            self.span(event.base, event.length)
                .ok_or(BackendError::UnknownRegion {
                    base: event.base,
                    length: event.length,
                })?;
        let pages =
            &mut self.regions.get_mut(&rbase).expect("span region").pages[first..first + count];
        for p in pages {
            match event.advice {
                Advice::Huge => {
                    if !p.huge {
                        p.huge = true;
                        self.huge_pages += 1;
                    }
                }
                Advice::Cold => {
                    if p.residency == Residency::Resident {
                        p.residency = Residency::ColdListed;
                    }
                }
                Advice::Pageout => {
                    if p.residency != Residency::Swapped {
                        p.residency = Residency::Swapped;
                        self.resident_pages -= 1;
                    }
                }
                Advice::Reset => {
                    if p.residency == Residency::ColdListed {
                        p.residency = Residency::Resident;
                    }
                }
            }
        }
        Ok(())
    }

    fn touch(&mut self, address: u64, size: u64, window: u64) -> Result<FaultReport, BackendError> {
        let (rbase, first, count) = self
            .span(address, size.max(1))
            .ok_or(BackendError::UnmappedAccess { address })?;
        let mut report = FaultReport::default();
        let pages =
            &mut self.regions.get_mut(&rbase).expect("span region").pages[first..first + count];
        for p in pages {
            if p.residency == Residency::Swapped {
                report.major_faults += 1;
                self.resident_pages += 1;
            }
            p.residency = Residency::Resident;
            p.last_touch_window = p.last_touch_window.max(window);
        }
        report.charged_ns = report.major_faults * self.config.fault_penalty_ns;
        self.total_faults += report.major_faults;
        Ok(report)
    }

    fn pressure_tick(&mut self, window: u64) -> ReclaimReport {
        let bytes_reclaimed = match self.config.mode {
            BackendMode::AdviceOnly => 0,
            BackendMode::Pressure(limit) => self.evict(limit, window, true),
            BackendMode::CgroupLimit(limit) => self.evict(limit, window, false),
        };
        ReclaimReport { bytes_reclaimed }
    }

    fn rss(&self) -> u64 {
        self.resident_pages * self.config.page_size
    }
}

/// One line of a backend trace log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceRecord {
    Map { window: u64, base: u64, length: u64 },
    Unmap { window: u64, base: u64, length: u64 },
    Advice { window: u64, event: AdviceEvent },
    Touch { window: u64, base: u64, length: u64 },
    Tick { window: u64 },
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TraceRecord::Map {
                window,
                base,
                length,
            } => write!(f, "{window},map,{base:#x},{length}"),
            TraceRecord::Unmap {
                window,
                base,
                length,
            } => {
                write!(f, "{window},unmap,{base:#x},{length}")
            }
            TraceRecord::Advice { window, event } => write!(
                f,
                "{window},{},{:#x},{}",
                event.advice.as_str(),
                event.base,
                event.length
            ),
            TraceRecord::Touch {
                window,
                base,
                length,
            } => {
                write!(f, "{window},touch,{base:#x},{length}")
            }
            TraceRecord::Tick { window } => write!(f, "{window},tick,0x0,0"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl TraceRecord {
    pub fn parse(line: &str) -> Result<TraceRecord, String> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        let [window, kind, base, length] = fields[..] else {
            return Err(format!("expected 4 fields, got {}", fields.len()));
        };
        let window: u64 = window.parse().map_err(|e| format!("window: {e}"))?;
        let base = u64::from_str_radix(base.trim_start_matches("0x"), 16)
            .map_err(|e| format!("base: {e}"))?;
        let length: u64 = length.parse().map_err(|e| format!("length: {e}"))?;
        let advice = |advice| TraceRecord::Advice {
            window,
            event: AdviceEvent {
                base,
                length,
                advice,
            },
        };
        Ok(match kind {
            "map" => TraceRecord::Map {
                window,
                base,
                length,
            },
            "unmap" => TraceRecord::Unmap {
                window,
                base,
                length,
            },
            "touch" => TraceRecord::Touch {
                window,
                base,
                length,
            },
            "tick" => TraceRecord::Tick { window },
            "huge" => advice(Advice::Huge),
            "cold" => advice(Advice::Cold),
            "pageout" => advice(Advice::Pageout),
            "reset" => advice(Advice::Reset),
            other => return Err(format!("unknown kind {other:?}")),
        })
    }

    /// Feeds this record to a backend.
    pub fn apply<B: Backend + ?Sized>(&self, backend: &mut B) -> Result<Replayed, BackendError> {
        Ok(match *self {
            TraceRecord::Map {
                window,
                base,
                length,
            } => {
                backend.map_region(base, length, window)?;
                Replayed::None
            }
            TraceRecord::Unmap { base, length, .. } => {
                backend.unmap_region(base, length)?;
                Replayed::None
            }
            TraceRecord::Advice { event, .. } => {
                backend.apply_advice(&event)?;
                Replayed::None
            }
            TraceRecord::Touch {
                window,
                base,
                length,
            } => Replayed::Fault(backend.touch(base, length, window)?),
            TraceRecord::Tick { window } => Replayed::Reclaim(backend.pressure_tick(window)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Replayed {
    None,
    Fault(FaultReport),
    Reclaim(ReclaimReport),
}

/// Wraps a backend and logs every call as a [`TraceRecord`] line.
pub struct Traced<B, W> {
    inner: B,
    out: W,
    window: u64,
}

impl<B: Backend, W: Write + Send> Traced<B, W> {
    pub fn new(inner: B, out: W) -> Self {
        Traced {
            inner,
            out,
            window: 0,
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn into_parts(self) -> (B, W) {
        (self.inner, self.out)
    }

    fn log(&mut self, rec: TraceRecord) {
        if let Err(e) = writeln!(self.out, "{rec}") {
            log::warn!("trace write failed: {e}");
        }
    }
}

impl<B: Backend, W: Write + Send> Backend for Traced<B, W> {
    fn map_region(&mut self, base: u64, length: u64, window: u64) -> Result<(), BackendError> {
        self.window = window;
        self.log(TraceRecord::Map {
            window,
            base,
            length,
        });
        self.inner.map_region(base, length, window)
    }

    fn unmap_region(&mut self, base: u64, length: u64) -> Result<(), BackendError> {
        let window = self.window;
        self.log(TraceRecord::Unmap {
            window,
            base,
            length,
        });
        self.inner.unmap_region(base, length)
    }

    fn apply_advice(&mut self, event: &AdviceEvent) -> Result<(), BackendError> {
        let window = self.window;
        self.log(TraceRecord::Advice {
            window,
            event: *event,
        });
        self.inner.apply_advice(event)
    }

    fn touch(&mut self, address: u64, size: u64, window: u64) -> Result<FaultReport, BackendError> {
        self.window = window;
        self.log(TraceRecord::Touch {
            window,
            base: address,
            length: size,
        });
        self.inner.touch(address, size, window)
    }

    fn pressure_tick(&mut self, window: u64) -> ReclaimReport {
        self.window = window;
        self.log(TraceRecord::Tick { window });
        self.inner.pressure_tick(window)
    }

    fn rss(&self) -> u64 {
        self.inner.rss()
    }
}

/// Replays a trace log into `backend`, returning every report produced.
pub fn replay<B: Backend + ?Sized, R: BufRead>(
    backend: &mut B,
    input: R,
) -> Result<Vec<Replayed>, TraceError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec =
            TraceRecord::parse(&line).map_err(|msg| TraceError::Parse { line: i + 1, msg })?;
        let r = rec.apply(backend).map_err(|e| TraceError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SEG: u64 = 2 << 20;

    fn sim(mode: BackendMode) -> SimBackend {
        SimBackend::new(SimConfig {
            mode,
            ..SimConfig::default()
        })
    }

    fn ev(base: u64, advice: Advice) -> AdviceEvent {
        AdviceEvent {
            base,
            length: SEG,
            advice,
        }
    }

    #[test]
    fn fresh_segment_is_resident() {
        let mut b = sim(BackendMode::AdviceOnly);
        b.map_region(0x20_0000, SEG, 0).unwrap();
        assert_eq!(b.rss(), SEG);
    }

    #[test]
    fn pageout_swaps_whole_segment() {
        let mut b = sim(BackendMode::AdviceOnly);
        b.map_region(0x20_0000, SEG, 0).unwrap();
        b.apply_advice(&ev(0x20_0000, Advice::Pageout)).unwrap();
        assert_eq!(b.rss(), 0);
        assert_eq!(
            b.pages()
                .filter(|(_, p)| p.residency == Residency::Swapped)
                .count(),
            512
        );
    }

    #[test]
    fn cold_then_touch_is_free() {
        let mut b = sim(BackendMode::AdviceOnly);
        b.map_region(0x20_0000, SEG, 0).unwrap();
        b.apply_advice(&ev(0x20_0000, Advice::Cold)).unwrap();
        assert_eq!(b.rss(), SEG);
        let r = b.touch(0x20_0000, 64, 1).unwrap();
        assert_eq!(r, FaultReport::default());
        assert_eq!(b.page(0x20_0000).unwrap().residency, Residency::Resident);
    }

    #[test]
    fn swapped_touch_charges_penalty() {
        let mut b = sim(BackendMode::AdviceOnly);
        b.map_region(0x20_0000, SEG, 0).unwrap();
        b.apply_advice(&ev(0x20_0000, Advice::Pageout)).unwrap();
        let r = b.touch(0x20_0010, 8, 1).unwrap();
        assert_eq!(r.major_faults, 1);
        assert_eq!(r.charged_ns, 10_000);
        assert_eq!(b.rss(), 4096);
        let r = b.touch(0x20_0ff8, 16, 1).unwrap();
        assert_eq!(r.major_faults, 1);
    }

    #[test]
    fn errors_for_unknown_memory() {
        let mut b = sim(BackendMode::AdviceOnly);
        assert!(b.apply_advice(&ev(0x20_0000, Advice::Cold)).is_err());
        assert!(b.touch(0x20_0000, 8, 0).is_err());
        b.map_region(0x20_0000, SEG, 0).unwrap();
        assert!(b.touch(0x20_0000 + SEG - 4, 8, 0).is_err());
        assert!(b.map_region(0x20_0000 + 4096, SEG, 0).is_err());
    }

    #[test]
    fn reset_unlists_cold_pages_only() {
        let mut b = sim(BackendMode::AdviceOnly);
        b.map_region(0, SEG, 0).unwrap();
        b.map_region(SEG, SEG, 0).unwrap();
        b.apply_advice(&ev(0, Advice::Cold)).unwrap();
        b.apply_advice(&ev(SEG, Advice::Pageout)).unwrap();
        b.apply_advice(&ev(0, Advice::Reset)).unwrap();
        b.apply_advice(&ev(SEG, Advice::Reset)).unwrap();
        assert_eq!(b.page(0).unwrap().residency, Residency::Resident);
        assert_eq!(b.page(SEG).unwrap().residency, Residency::Swapped);
    }

    #[test]
    fn cgroup_limit_evicts_oldest_first() {
        let mut b = sim(BackendMode::CgroupLimit(SEG));
        for i in 0..3u64 {
            b.map_region(i * SEG, SEG, i).unwrap();
        }
        assert_eq!(b.rss(), 3 * SEG);
        let r = b.pressure_tick(3);
        assert_eq!(r.bytes_reclaimed, 2 * SEG);
        assert_eq!(b.rss(), SEG);
        assert_eq!(b.page(0).unwrap().residency, Residency::Swapped);
        assert_eq!(b.page(2 * SEG).unwrap().residency, Residency::Resident);
        assert_eq!(b.pressure_tick(4).bytes_reclaimed, 0);
    }

    #[test]
    fn cold_listed_pages_go_first() {
        let mut b = sim(BackendMode::CgroupLimit(SEG));
        b.map_region(0, SEG, 0).unwrap();
        b.map_region(SEG, SEG, 5).unwrap();
        b.apply_advice(&ev(SEG, Advice::Cold)).unwrap();
        b.pressure_tick(6);
        assert_eq!(b.page(SEG).unwrap().residency, Residency::Swapped);
        assert_eq!(b.page(0).unwrap().residency, Residency::Resident);
    }

    #[test]
    fn pressure_spares_active_pages() {
        let mut b = sim(BackendMode::Pressure(4096));
        b.map_region(0, SEG, 0).unwrap();
        b.map_region(SEG, SEG, 0).unwrap();
        b.touch(SEG, SEG, 10).unwrap();
        b.pressure_tick(10);
        assert_eq!(b.rss(), SEG);
        assert_eq!(b.page(SEG).unwrap().residency, Residency::Resident);
        b.pressure_tick(12);
        assert_eq!(b.rss(), 4096);
    }

    #[test]
    fn huge_is_counted_only() {
        let mut b = sim(BackendMode::AdviceOnly);
        b.map_region(0, SEG, 0).unwrap();
        b.apply_advice(&ev(0, Advice::Huge)).unwrap();
        b.apply_advice(&ev(0, Advice::Huge)).unwrap();
        assert_eq!(b.huge_pages(), 512);
        assert_eq!(b.rss(), SEG);
        b.unmap_region(0, SEG).unwrap();
        assert_eq!(b.huge_pages(), 0);
        assert_eq!(b.rss(), 0);
    }

    #[test]
    fn trace_round_trips_through_replay() {
        let mut traced = Traced::new(sim(BackendMode::CgroupLimit(SEG)), Vec::new());
        traced.map_region(0, SEG, 0).unwrap();
        traced.map_region(SEG, SEG, 0).unwrap();
        traced.apply_advice(&ev(SEG, Advice::Pageout)).unwrap();
        let live = traced.touch(SEG + 100, 5000, 1).unwrap();
        traced.pressure_tick(1);
        traced.unmap_region(0, SEG).unwrap();
        let rss = traced.rss();
        let (_, log) = traced.into_parts();
        let mut fresh = sim(BackendMode::CgroupLimit(SEG));
        let reports = replay(&mut fresh, log.as_slice()).unwrap();
        assert_eq!(reports[3], Replayed::Fault(live));
        assert_eq!(fresh.rss(), rss);
        let text = String::from_utf8(log).unwrap();
        assert!(text.lines().all(|l| l.split(',').count() == 4));
    }
}
