//! Tracking epochs and per-thread quiescence stamps.
//!
//! ATC counting only happens while a migration epoch is open. Threads that
//! entered an instrumented scope before the epoch opened are not counted in
//! any ATC, so the collector must wait for them to leave before it moves
//! anything. Each application thread publishes the epoch value it observed at
//! its outermost scope entry; the collector waits until every thread is either
//! outside all scopes or stamped with the current value.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crossbeam_utils::{Backoff, CachePadded};
use parking_lot::Mutex;

/// Monotone epoch value plus the global tracking flag, packed as
/// `value << 1 | tracking`.
#[derive(Debug, Default)]
pub struct EpochCounter {
    state: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochSnapshot {
    pub value: u64,
    pub tracking_active: bool,
}

impl EpochCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn snapshot(&self) -> EpochSnapshot {
        decode(self.state.load(Ordering::SeqCst))
    }

    #[inline]
    pub fn tracking_active(&self) -> bool {
        self.state.load(Ordering::Acquire) & 1 == 1
    }

    pub fn value(&self) -> u64 {
        self.snapshot().value
    }

    /// Bumps the value and sets the tracking flag. Collector only.
    pub(crate) fn advance(&self, tracking_active: bool) -> EpochSnapshot {
        let current = self.snapshot();
        let next = EpochSnapshot {
            value: current.value + 1,
            tracking_active,
        };
        self.state.store(encode(next), Ordering::SeqCst);
        next
    }
}

fn encode(s: EpochSnapshot) -> u64 {
    s.value << 1 | s.tracking_active as u64
}

fn decode(raw: u64) -> EpochSnapshot {
    EpochSnapshot {
        value: raw >> 1,
        tracking_active: raw & 1 == 1,
    }
}

/// One application thread's published stamp: 0 when outside every scope,
/// otherwise `observed_value << 1 | 1`.
#[derive(Debug, Default)]
pub struct Participant {
    stamp: CachePadded<AtomicU64>,
    index: usize,
}

impl Participant {
    pub fn index(&self) -> usize {
        self.index
    }

    fn quiescent_for(&self, value: u64) -> bool {
        let s = self.stamp.load(Ordering::SeqCst);
        s == 0 || s >> 1 >= value
    }
}

#[derive(Debug, Default)]
pub struct Participants {
    list: Mutex<Vec<Arc<Participant>>>,
}

impl Participants {
    fn register(&self) -> Arc<Participant> {
        let mut list = self.list.lock();
        let p = Arc::new(Participant {
            stamp: CachePadded::new(AtomicU64::new(0)),
            index: list.len(),
        });
        list.push(p.clone());
        p
    }

    pub fn len(&self) -> usize {
        self.list.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True when no thread is inside a scope that started before `value`.
    pub fn all_quiescent_for(&self, value: u64) -> bool {
        self.list.lock().iter().all(|p| p.quiescent_for(value))
    }

    /// Spins (with backoff) until [`all_quiescent_for`](Self::all_quiescent_for).
    pub fn wait_quiescent(&self, value: u64) {
        let snapshot: Vec<Arc<Participant>> = self.list.lock().clone();
        for p in snapshot {
            let backoff = Backoff::new();
            while !p.quiescent_for(value) {
                backoff.snooze();
            }
        }
    }
}

struct Local {
    domain: u64,
    participant: Arc<Participant>,
    depth: u32,
}

thread_local! {
    static LOCALS: RefCell<Vec<Local>> = const { RefCell::new(Vec::new()) };
}

/// Marks the calling thread as inside a scope of `domain` and returns the
/// epoch state the scope should act on, plus the participant index.
pub(crate) fn pin(
    domain: u64,
    participants: &Participants,
    counter: &EpochCounter,
) -> (EpochSnapshot, usize) {
    LOCALS.with(|cell| {
        let mut locals = cell.borrow_mut();
        let pos = match locals.iter().position(|l| l.domain == domain) {
            Some(pos) => pos,
            None => {
                locals.push(Local {
                    domain,
                    participant: participants.register(),
                    depth: 0,
                });
                locals.len() - 1
            }
        };
        let local = &mut locals[pos];
        local.depth += 1;
        let index = local.participant.index;
        if local.depth > 1 {
            return (counter.snapshot(), index);
        }
        let mut seen = counter.snapshot();
        loop {
            local
                .participant
                .stamp
                .store(seen.value << 1 | 1, Ordering::SeqCst);
            let again = counter.snapshot();
            if again == seen {
                return (seen, index);
            }
            seen = again;
        }
    })
}

pub(crate) fn unpin(domain: u64) {
    LOCALS.with(|cell| {
        let mut locals = cell.borrow_mut();
        if let Some(local) = locals.iter_mut().find(|l| l.domain == domain) {
            debug_assert!(local.depth > 0, "unbalanced unpin");
            local.depth -= 1;
            if local.depth == 0 {
                local.participant.stamp.store(0, Ordering::Release);
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicBool;
    use std::thread;
    use std::time::Duration;

    #[test]
    fn counter_is_monotone() {
        let c = EpochCounter::new();
        assert_eq!(
            c.snapshot(),
            EpochSnapshot {
                value: 0,
                tracking_active: false
            }
        );
        let a = c.advance(true);
        let b = c.advance(false);
        assert!(a.value < b.value);
        assert!(a.tracking_active && !b.tracking_active);
        assert!(!c.tracking_active());
    }

    #[test]
    fn nested_pins_keep_outer_stamp() {
        let parts = Participants::default();
        let c = EpochCounter::new();
        let (s0, _) = pin(1, &parts, &c);
        assert!(!s0.tracking_active);
        c.advance(true);
        let (s1, _) = pin(1, &parts, &c);
        assert!(s1.tracking_active);
        // Still stamped with the outer epoch, so not quiescent for the new one.
        assert!(!parts.all_quiescent_for(1));
        unpin(1);
        assert!(!parts.all_quiescent_for(1));
        unpin(1);
        assert!(parts.all_quiescent_for(1));
    }

    #[test]
    fn grace_waits_for_scopes_opened_before_epoch() {
        let parts = Arc::new(Participants::default());
        let counter = Arc::new(EpochCounter::new());
        let inside = Arc::new(AtomicBool::new(false));
        let released = Arc::new(AtomicBool::new(false));
        let t = {
            let (parts, counter, inside, released) = (
                parts.clone(),
                counter.clone(),
                inside.clone(),
                released.clone(),
            );
            thread::spawn(move || {
                let (snap, _) = pin(9, &parts, &counter);
                assert!(!snap.tracking_active);
                inside.store(true, Ordering::SeqCst);
                thread::sleep(Duration::from_millis(20));
                released.store(true, Ordering::SeqCst);
                unpin(9);
            })
        };
        while !inside.load(Ordering::SeqCst) {
            thread::yield_now();
        }
        let opened = counter.advance(true);
        parts.wait_quiescent(opened.value);
        assert!(released.load(Ordering::SeqCst));
        t.join().unwrap();
    }
}
