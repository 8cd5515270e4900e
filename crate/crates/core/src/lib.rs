//! Object-level memory tiering.
//!
//! Managed objects are reached through [`GuideSlot`]s: 64-bit words packing
//! the object's address with an access bit, an active thread count and
//! migration flags. A [`Collector`] scans access bits once per window, sorts
//! objects into NEW, HOT and COLD heaps, moves them without stopping
//! application threads, and hands region-level advice to a page [`Backend`].
//!
//! ```
//! use hades::{Collector, ManagedHashMap, Runtime, RuntimeConfig, Tracked};
//!
//! let rt = Runtime::new(RuntimeConfig::default()).unwrap();
//! let map = ManagedHashMap::new(Tracked(rt.clone()));
//! map.put(b"k", b"v").unwrap();
//! let mut collector = Collector::new(rt, None);
//! assert_eq!(map.get(b"k").as_deref(), Some(&b"v"[..]));
//! collector.run_window();
//! assert_eq!(map.get(b"k").as_deref(), Some(&b"v"[..]));
//! ```

pub mod backend;
pub mod epoch;
pub mod guide;
pub mod heap;
pub mod metrics;
pub mod migration;
pub mod policy;
pub mod registry;
pub mod runtime;
pub mod structures;

pub use backend::{Backend, BackendMode, SimBackend, SimConfig};
pub use guide::{EnterOutcome, GuideError, GuideSlot, GuideWord};
pub use heap::{Advice, AdviceEvent, HeapConfig, HeapId, HeapManager};
pub use metrics::{EpochStats, LatencyHistogram, WindowRecorder};
pub use migration::{EpochSummary, MoveOutcome};
pub use policy::{AdviceStage, PolicyConfig, PolicyState};
pub use registry::{MigrationOrder, ObjectId, Registry, RootSlot};
pub use runtime::{
    AccessSink, Collector, Instrumentation, ObjectScope, Runtime, RuntimeConfig, Scope,
    SharedBackend, Tracked, Untracked, WindowOutcome,
};
pub use structures::{ManagedHashMap, ManagedSkipList, MapError, PrevValuePresence};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/guides.md")]
    mod guides {}
    #[doc = include_str!("../../../book/src/heaps.md")]
    mod heaps {}
    #[doc = include_str!("../../../book/src/collector.md")]
    mod collector {}
    #[doc = include_str!("../../../book/src/structures.md")]
    mod structures {}
    #[doc = include_str!("../../../book/src/backends.md")]
    mod backends {}
}
