//! The instrumentation API and the collector loop.

use std::cell::Cell;
use std::marker::PhantomData;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crossbeam_utils::Backoff;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::epoch::{self, EpochCounter, Participants};
use crate::guide::{EnterOutcome, GuideError, GuideSlot};
use crate::heap::{AdviceEvent, HeapConfig, HeapError, HeapId, HeapManager};
use crate::migration::{EpochSummary, MigrationEngine, MigrationError, MoveOutcome};
use crate::policy::{AccessCounters, PolicyConfig, PolicyDecision, PolicyState};
use crate::registry::{
    MigrationOrder, ObjectId, Owner, Registry, RegistryError, RootSlot, WindowReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub heap: HeapConfig,
    pub policy: PolicyConfig,
    /// Every n-th access per thread feeds the promotion-rate counters and
    /// is flagged as sampled to the sink. 1 means exact.
    pub sample_every: u32,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            heap: HeapConfig::default(),
            policy: PolicyConfig::default(),
            sample_every: 16,
        }
    }
}

/// Observer of every instrumented access (metrics, backend touches).
pub trait AccessSink: Send + Sync {
    fn on_access(&self, runtime: &Runtime, address: u64, size: u64, sampled: bool);
}

static NEXT_RUNTIME_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static SAMPLE_TICK: Cell<u32> = const { Cell::new(0) };
}

const COUNTER_SHARDS: usize = 64;

pub struct Runtime {
    id: u64,
    config: RuntimeConfig,
    heaps: HeapManager,
    registry: Registry,
    counter: EpochCounter,
    participants: Participants,
    counters: AccessCounters,
    sink: Option<Arc<dyn AccessSink>>,
}

impl std::fmt::Debug for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runtime")
            .field("id", &self.id)
            .field("heaps", &self.heaps)
            .field("registry", &self.registry)
            .finish()
    }
}

impl Runtime {
    pub fn new(config: RuntimeConfig) -> Result<Arc<Runtime>, HeapError> {
        Self::with_sink(config, None)
    }

    pub fn with_sink(
        config: RuntimeConfig,
        sink: Option<Arc<dyn AccessSink>>,
    ) -> Result<Arc<Runtime>, HeapError> {
        Ok(Arc::new(Runtime {
            id: NEXT_RUNTIME_ID.fetch_add(1, Ordering::Relaxed),
            heaps: HeapManager::new(config.heap.clone())?,
            registry: Registry::new(),
            counter: EpochCounter::new(),
            participants: Participants::default(),
            counters: AccessCounters::new(COUNTER_SHARDS),
            sink,
            config,
        }))
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn heaps(&self) -> &HeapManager {
        &self.heaps
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn epoch(&self) -> &EpochCounter {
        &self.counter
    }

    pub fn participants(&self) -> &Participants {
        &self.participants
    }

    pub fn access_counters(&self) -> &AccessCounters {
        &self.counters
    }

    /// Allocates a fresh object in the NEW heap.
    pub fn allocate(&self, size: u64) -> Result<u64, HeapError> {
        self.heaps.allocate(size, HeapId::New).map(|(a, _)| a)
    }

    pub fn register_root(&self, slot: &RootSlot, size: u64) -> Result<ObjectId, RegistryError> {
        let address = slot.load().address();
        self.registry
            .register(Owner::Root(slot.clone()), size, address)
    }

    /// Registers the object referenced by the guide embedded at `offset` in `owner`.
    ///
    /// The caller must be inside `owner`'s scope or own it exclusively.
    pub fn register_child(
        &self,
        owner: ObjectId,
        offset: u64,
        size: u64,
        address: u64,
    ) -> Result<ObjectId, RegistryError> {
        self.registry
            .register(Owner::Object { id: owner, offset }, size, address)
    }

    pub fn deregister(&self, id: ObjectId) -> Result<(), RegistryError> {
        self.registry.deregister(id)
    }

    /// Opens an instrumented scope on the object `slot` refers to.
    ///
    /// While the scope lives the object cannot be moved and its address is
    /// stable.
    pub fn enter<'a>(&'a self, slot: &'a GuideSlot, size: u64) -> Scope<'a> {
        let (snap, shard) = epoch::pin(self.id, &self.participants, &self.counter);
        let backoff = Backoff::new();
        let entered = loop {
            match slot.atc_enter(snap.tracking_active) {
                Ok(EnterOutcome::Entered(_)) => break true,
                Ok(EnterOutcome::TrackingInactive(_)) => break false,
                Ok(EnterOutcome::BlockedMigrating) => backoff.snooze(),
                Err(GuideError::AtcSaturated) => backoff.snooze(),
                Err(e) => panic!("guide protocol violation on enter: {e}"),
            }
        };
        let address = slot.load().address();
        slot.mark_access();
        let every = self.config.sample_every.max(1);
        let sampled = SAMPLE_TICK.with(|t| {
            let n = t.get().wrapping_add(1);
            t.set(n);
            n % every == 0
        });
        if sampled {
            let cold = self.heaps.heap_of(address) == Some(HeapId::Cold);
            self.counters.record(shard, cold);
        }
        if let Some(sink) = &self.sink {
            sink.on_access(self, address, size, sampled);
        }
        Scope {
            runtime: self,
            slot,
            entered,
            address,
            size,
            _not_send: PhantomData,
        }
    }
}

/// Read/write access to one managed object for the duration of a scope.
pub trait ObjectScope {
    fn address(&self) -> u64;
    fn size(&self) -> u64;

    /// Borrowed view of object bytes, valid while the scope is open.
    fn bytes(&self, offset: u64, len: usize) -> &[u8] {
        assert!(
            offset + len as u64 <= self.size(),
            "read past end of object"
        );
        // SAFETY: in bounds of a live object whose address is pinned by the scope.
        unsafe { std::slice::from_raw_parts((self.address() + offset) as *const u8, len) }
    }

    fn read(&self, offset: u64, len: usize) -> Vec<u8> {
        self.bytes(offset, len).to_vec()
    }

    fn read_u64(&self, offset: u64) -> u64 {
        assert!(
            offset % 8 == 0 && offset + 8 <= self.size(),
            "bad u64 offset"
        );
        // SAFETY: aligned and in bounds of a pinned live object.
        unsafe { ((self.address() + offset) as *const u64).read() }
    }

    /// Guide slot embedded at `offset`.
    fn slot_at(&self, offset: u64) -> &GuideSlot {
        assert!(
            offset % 8 == 0 && offset + 8 <= self.size(),
            "bad slot offset"
        );
        // SAFETY: aligned, in bounds, and lives as long as the scope pins the object.
        unsafe { GuideSlot::from_addr(self.address() + offset) }
    }
}

pub struct Scope<'a> {
    runtime: &'a Runtime,
    slot: &'a GuideSlot,
    entered: bool,
    address: u64,
    size: u64,
    _not_send: PhantomData<*const ()>,
}

impl Scope<'_> {
    /// Whether this scope was counted in the object's ATC.
    pub fn counted(&self) -> bool {
        self.entered
    }
}

impl ObjectScope for Scope<'_> {
    fn address(&self) -> u64 {
        self.address
    }

    fn size(&self) -> u64 {
        self.size
    }
}

impl Drop for Scope<'_> {
    fn drop(&mut self) {
        if self.entered {
            if let Err(e) = self.slot.atc_exit() {
                debug_assert!(false, "unbalanced scope exit: {e}");
                log::error!("unbalanced scope exit: {e}");
            }
        }
        epoch::unpin(self.runtime.id);
    }
}

/// Scope of an uninstrumented build: resolves the address and nothing else.
pub struct RawScope<'a> {
    address: u64,
    size: u64,
    _slot: PhantomData<&'a GuideSlot>,
}

impl ObjectScope for RawScope<'_> {
    fn address(&self) -> u64 {
        self.address
    }

    fn size(&self) -> u64 {
        self.size
    }
}

/// How a structure reaches its managed objects.
pub trait Instrumentation: Send + Sync + 'static {
    type Scope<'a>: ObjectScope
    where
        Self: 'a;

    fn runtime(&self) -> &Arc<Runtime>;
    fn enter<'a>(&'a self, slot: &'a GuideSlot, size: u64) -> Self::Scope<'a>;
    fn register_root(&self, slot: &RootSlot, size: u64) -> Result<ObjectId, RegistryError>;
    fn register_child(
        &self,
        owner: ObjectId,
        offset: u64,
        size: u64,
        address: u64,
    ) -> Result<ObjectId, RegistryError>;
    fn deregister(&self, id: ObjectId) -> Result<(), RegistryError>;
}

/// Full instrumentation: scopes, access bits, registration.
#[derive(Debug, Clone)]
pub struct Tracked(pub Arc<Runtime>);

impl Instrumentation for Tracked {
    type Scope<'a> = Scope<'a>;

    fn runtime(&self) -> &Arc<Runtime> {
        &self.0
    }

    #[inline]
    fn enter<'a>(&'a self, slot: &'a GuideSlot, size: u64) -> Scope<'a> {
        self.0.enter(slot, size)
    }

    fn register_root(&self, slot: &RootSlot, size: u64) -> Result<ObjectId, RegistryError> {
        self.0.register_root(slot, size)
    }

    fn register_child(
        &self,
        owner: ObjectId,
        offset: u64,
        size: u64,
        address: u64,
    ) -> Result<ObjectId, RegistryError> {
        self.0.register_child(owner, offset, size, address)
    }

    fn deregister(&self, id: ObjectId) -> Result<(), RegistryError> {
        self.0.deregister(id)
    }
}

/// No instrumentation: objects live in the same heaps but are never
/// registered, tracked or moved.
#[derive(Debug, Clone)]
pub struct Untracked(pub Arc<Runtime>);

impl Instrumentation for Untracked {
    type Scope<'a> = RawScope<'a>;

    fn runtime(&self) -> &Arc<Runtime> {
        &self.0
    }

    #[inline]
    fn enter<'a>(&'a self, slot: &'a GuideSlot, size: u64) -> RawScope<'a> {
        RawScope {
            address: slot.load().address(),
            size,
            _slot: PhantomData,
        }
    }

    fn register_root(&self, _slot: &RootSlot, _size: u64) -> Result<ObjectId, RegistryError> {
        Ok(ObjectId::ROOT)
    }

    fn register_child(
        &self,
        _owner: ObjectId,
        _offset: u64,
        _size: u64,
        _address: u64,
    ) -> Result<ObjectId, RegistryError> {
        Ok(ObjectId::ROOT)
    }

    fn deregister(&self, id: ObjectId) -> Result<(), RegistryError> {
        if id != ObjectId::ROOT {
            return Err(RegistryError::UnknownObject(id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplyReport {
    pub moved: u64,
    pub deferred: u64,
    pub oom: u64,
}

/// Everything one collector window did.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowOutcome {
    pub window: u64,
    pub report: WindowReport,
    pub decision: PolicyDecision,
    pub orders: Vec<MigrationOrder>,
    pub apply: ApplyReport,
    pub epoch: Option<EpochSummary>,
    pub advice: Vec<AdviceEvent>,
    pub reaped: usize,
    pub reclaimed: usize,
}

pub type SharedBackend = Arc<Mutex<dyn Backend>>;

/// Drives scans, classification, migration and advice. One per runtime.
pub struct Collector {
    runtime: Arc<Runtime>,
    policy: PolicyState,
    engine: MigrationEngine,
    deferred: Vec<MigrationOrder>,
    backend: Option<SharedBackend>,
    window: u64,
}

impl Collector {
    pub fn new(runtime: Arc<Runtime>, backend: Option<SharedBackend>) -> Self {
        let policy = PolicyState::new(runtime.config.policy.clone());
        Collector {
            runtime,
            policy,
            engine: MigrationEngine::new(),
            deferred: Vec::new(),
            backend,
            window: 0,
        }
    }

    pub fn runtime(&self) -> &Arc<Runtime> {
        &self.runtime
    }

    pub fn policy(&self) -> &PolicyState {
        &self.policy
    }

    pub fn engine(&self) -> &MigrationEngine {
        &self.engine
    }

    pub fn open_epoch(&mut self) -> Result<u64, MigrationError> {
        self.engine
            .open_epoch(&self.runtime.counter, &self.runtime.participants)
    }

    pub fn close_epoch(&mut self) -> Result<EpochSummary, MigrationError> {
        self.engine
            .close_epoch(&self.runtime.counter, &self.runtime.participants)
    }

    pub fn move_object(
        &mut self,
        id: ObjectId,
        dst: HeapId,
    ) -> Result<MoveOutcome, MigrationError> {
        self.engine
            .move_object(&self.runtime.heaps, &self.runtime.registry, id, dst)
    }

    /// Attempts every order; busy and out-of-memory orders are kept for the
    /// next window.
    pub fn apply_orders(
        &mut self,
        orders: &[MigrationOrder],
    ) -> Result<ApplyReport, MigrationError> {
        let mut report = ApplyReport::default();
        for order in orders {
            match self.move_object(order.object_id, order.dst_heap) {
                Ok(MoveOutcome::Moved(_)) => report.moved += 1,
                Ok(MoveOutcome::Busy) => {
                    report.deferred += 1;
                    self.deferred.push(*order);
                }
                Ok(MoveOutcome::Oom) => {
                    report.deferred += 1;
                    report.oom += 1;
                    self.deferred.push(*order);
                }
                // Deregistered since classification.
                Err(MigrationError::UnknownObject(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(report)
    }

    /// Sends pending segment map/unmap notifications, then `advice`, to the backend.
    fn deliver(&self, advice: &[AdviceEvent]) {
        let Some(backend) = &self.backend else {
            return;
        };
        let mut b = backend.lock();
        for ev in self.runtime.heaps.drain_region_events() {
            if let Err(e) = b.apply_region_event(&ev, self.window) {
                log::warn!("backend rejected {ev:?}: {e}");
            }
        }
        for ev in advice {
            if let Err(e) = b.apply_advice(ev) {
                log::warn!("backend rejected {ev:?}: {e}");
            }
        }
    }

    /// One full collector window.
    pub fn run_window(&mut self) -> WindowOutcome {
        let rt = self.runtime.clone();
        let reaped = rt.registry.reap_retired();
        for &(address, size, _) in &reaped {
            rt.heaps.release(address, size);
        }
        let report = rt.registry.scan_window();
        let (accesses, cold) = rt.counters.take();
        self.policy.record_counts(accesses, cold);
        let decision = self.policy.end_window();

        let mut orders = rt.registry.classify_and_schedule(decision.new_c_t);
        let pending = std::mem::take(&mut self.deferred);
        for d in pending {
            if orders
                .binary_search_by_key(&d.object_id, |o| o.object_id)
                .is_err()
                && rt.registry.order_still_valid(&d)
            {
                orders.push(d);
            }
        }
        orders.sort_unstable();

        let (apply, epoch) = if orders.is_empty() {
            (ApplyReport::default(), None)
        } else {
            self.open_epoch()
                .expect("collector epoch is idle between windows");
            let apply = self.apply_orders(&orders).unwrap_or_else(|e| {
                log::error!("migration failed: {e}");
                ApplyReport::default()
            });
            (apply, Some(self.close_epoch().expect("epoch opened above")))
        };

        let advice = rt.heaps.segment_advice_sweep(decision.stage);
        self.deliver(&advice);
        let reclaimed = rt.heaps.reclaim_empty_segments();
        self.deliver(&[]);

        let outcome = WindowOutcome {
            window: self.window,
            report,
            decision,
            orders,
            apply,
            epoch,
            advice,
            reaped: reaped.len(),
            reclaimed,
        };
        log::debug!(
            "window {} c_t={} stage={:?} moved={} deferred={} advice={} reclaimed={}",
            outcome.window,
            outcome.decision.new_c_t,
            outcome.decision.stage,
            outcome.apply.moved,
            outcome.apply.deferred,
            outcome.advice.len(),
            outcome.reclaimed
        );
        self.window += 1;
        outcome
    }
}
