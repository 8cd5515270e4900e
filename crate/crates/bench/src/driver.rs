//! Load and run phases against a simulated page backend.

use std::cell::Cell;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use hades::backend::BackendMode;
use hades::heap::HeapError;
use hades::metrics::{utilization_of, write_json_line, CsvWriter};
use hades::runtime::SharedBackend;
use hades::{
    Advice, AdviceStage, Backend, Collector, EpochStats, HeapConfig, HeapId, LatencyHistogram,
    ManagedHashMap, ManagedSkipList, MapError, Runtime, RuntimeConfig, SimBackend, SimConfig,
    Tracked,
};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::workload::{fill_value, KeySpace, Op, OpStream, WorkloadError, WorkloadSpec};

/// Keys checked after the load phase.
pub const VERIFY_SAMPLE: usize = 1000;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("heap: {0}")]
    Heap(#[from] HeapError),
    #[error("map: {0}")]
    Map(#[from] MapError),
    #[error("load verification failed for key index {0}")]
    Verification(u64),
    #[error("read of loaded key index {0} returned nothing")]
    MissingKey(u64),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendChoice {
    SimAdvice,
    SimPressure(u64),
    SimCgroup(u64),
}

impl BackendChoice {
    pub fn mode(self) -> BackendMode {
        match self {
            BackendChoice::SimAdvice => BackendMode::AdviceOnly,
            BackendChoice::SimPressure(b) => BackendMode::Pressure(b),
            BackendChoice::SimCgroup(b) => BackendMode::CgroupLimit(b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Hash,
    Skiplist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub spec: WorkloadSpec,
    pub backend: BackendChoice,
    pub structure: Structure,
    pub collector: bool,
    /// Feed every access to the utilization metric instead of a sample.
    pub exact_metrics: bool,
    pub fault_penalty_ns: u64,
    pub heap: HeapConfig,
    pub csv: Option<PathBuf>,
    pub jsonl: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            spec: WorkloadSpec::default(),
            backend: BackendChoice::SimAdvice,
            structure: Structure::Hash,
            collector: true,
            exact_metrics: false,
            fault_penalty_ns: SimConfig::default().fault_penalty_ns,
            heap: HeapConfig::default(),
            csv: None,
            jsonl: None,
        }
    }
}

impl RunOptions {
    pub fn validate(&self) -> Result<(), RunError> {
        self.spec.validate()?;
        match self.backend {
            BackendChoice::SimPressure(0) | BackendChoice::SimCgroup(0) => {
                return Err(RunError::Config("backend limit must be positive".into()))
            }
            _ => {}
        }
        let records = self.spec.record_count as f64;
        let per_record = (self.spec.key_size + self.spec.value_size + 64) as f64;
        let per_heap = self.heap.region_bytes as f64 / 3.0;
        if records * per_record * 2.0 > per_heap {
            return Err(RunError::Config(format!(
                "heap region of {} bytes is too small for {} records",
                self.heap.region_bytes, self.spec.record_count
            )));
        }
        Ok(())
    }
}

/// Per-window collector and backend observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowLog {
    pub window: u64,
    pub c_t: u32,
    pub stage: AdviceStage,
    pub promotion_rate: Option<f64>,
    pub pageout_emitted: bool,
    pub moved: u64,
    pub deferred: u64,
    pub rss_bytes: u64,
    pub faults: u64,
    /// Client op time including simulated fault penalty.
    pub busy_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub records: u64,
    pub windows: u64,
    pub post_load_rss: u64,
    /// Highest RSS seen from the end of the load phase on.
    pub peak_rss: u64,
    pub final_rss: u64,
    /// Live bytes of the records the zipfian draws cover.
    pub hot_set_bytes: u64,
    pub mean_utilization: Option<f64>,
    pub final10_utilization: Option<f64>,
    pub ops: u64,
    pub throughput_ops_per_sec: f64,
    /// Throughput over the second half of the windows.
    pub steady_throughput_ops_per_sec: f64,
    pub latency_mean_ns: Option<f64>,
    pub latency_p50_ns: u64,
    pub latency_p99_ns: u64,
    pub steady_latency_p99_ns: u64,
    pub total_faults: u64,
    pub first_proactive_window: Option<u64>,
    pub pageout_windows: u64,
    pub max_rate_in_pageout_window: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub stats: Vec<EpochStats>,
    pub windows: Vec<WindowLog>,
    pub summary: Summary,
}

thread_local! {
    static FAULT_NS: Cell<u64> = const { Cell::new(0) };
}

fn take_fault_ns() -> u64 {
    FAULT_NS.with(|c| c.replace(0))
}

/// Forwards instrumented accesses to the backend and the metric trace.
struct BenchSink<B> {
    backend: Arc<Mutex<B>>,
    window: AtomicU64,
    exact: bool,
    trace: Mutex<Vec<(u64, u64)>>,
    faults: AtomicU64,
}

impl<B: Backend> hades::AccessSink for BenchSink<B> {
    fn on_access(&self, rt: &Runtime, address: u64, size: u64, sampled: bool) {
        let window = self.window.load(Ordering::Relaxed);
        {
            let mut b = self.backend.lock();
            sync_regions(rt, &mut *b, window);
            match b.touch(address, size, window) {
                Ok(r) if r.major_faults > 0 => {
                    FAULT_NS.with(|c| c.set(c.get() + r.charged_ns));
                    self.faults.fetch_add(r.major_faults, Ordering::Relaxed);
                }
                Ok(_) => {}
                Err(e) => log::warn!("touch {address:#x}+{size}: {e}"),
            }
        }
        if sampled || self.exact {
            self.trace.lock().push((address, size));
        }
    }
}

fn sync_regions<B: Backend + ?Sized>(rt: &Runtime, b: &mut B, window: u64) {
    if rt.heaps().has_region_events() {
        for ev in rt.heaps().drain_region_events() {
            if let Err(e) = b.apply_region_event(&ev, window) {
                log::warn!("backend rejected {ev:?}: {e}");
            }
        }
    }
}

enum Store {
    Hash(ManagedHashMap<Tracked>),
    Skip(ManagedSkipList<Tracked>),
}

impl Store {
    fn get(&self, key: &[u8]) -> Option<Vec<u8>> {
        match self {
            Store::Hash(m) => m.get(key),
            Store::Skip(m) => m.get(key),
        }
    }

    fn put(&self, key: &[u8], value: &[u8]) -> Result<(), MapError> {
        match self {
            Store::Hash(m) => m.put(key, value).map(drop),
            Store::Skip(m) => m.put(key, value).map(drop),
        }
    }
}

/// State the client threads share.
struct Shared {
    opts: RunOptions,
    rt: Arc<Runtime>,
    sink: Arc<BenchSink<SimBackend>>,
    store: Store,
    keys: Vec<Vec<u8>>,
    space: KeySpace,
}

/// State owned by the window loop.
struct Output {
    collector: Option<Collector>,
    csv: Option<CsvWriter<BufWriter<File>>>,
    jsonl: Option<BufWriter<File>>,
    stats: Vec<EpochStats>,
    windows: Vec<WindowLog>,
    hists: Vec<LatencyHistogram>,
}

struct Bench {
    shared: Shared,
    out: Output,
}

/// Loads the records and runs the configured number of windows.
pub fn run(opts: &RunOptions) -> Result<RunReport, RunError> {
    opts.validate()?;
    let mut bench = Bench::new(opts.clone())?;
    let post_load_rss = bench.shared.load()?;
    if opts.spec.client_threads == 1 {
        bench.run_inline()?;
    } else {
        bench.run_threaded()?;
    }
    bench.finish(post_load_rss)
}

impl Bench {
    fn new(opts: RunOptions) -> Result<Self, RunError> {
        let spec = &opts.spec;
        let backend = Arc::new(Mutex::new(SimBackend::new(SimConfig {
            mode: opts.backend.mode(),
            page_size: opts.heap.page_size,
            fault_penalty_ns: opts.fault_penalty_ns,
            ..SimConfig::default()
        })));
        let sink = Arc::new(BenchSink {
            backend: backend.clone(),
            window: AtomicU64::new(0),
            exact: opts.exact_metrics,
            trace: Mutex::new(Vec::new()),
            faults: AtomicU64::new(0),
        });
        let rt = Runtime::with_sink(
            RuntimeConfig {
                heap: opts.heap.clone(),
                ..RuntimeConfig::default()
            },
            Some(sink.clone()),
        )?;
        let store = match opts.structure {
            Structure::Hash => Store::Hash(ManagedHashMap::new(Tracked(rt.clone()))),
            Structure::Skiplist => {
                Store::Skip(ManagedSkipList::new(Tracked(rt.clone()), spec.scatter_seed))
            }
        };
        let space = KeySpace::new(spec.record_count, spec.key_size, spec.scatter_seed);
        let keys = (0..spec.record_count)
            .map(|i| space.key_for_index(i))
            .collect();
        let collector = opts.collector.then(|| {
            let shared: SharedBackend = backend.clone();
            Collector::new(rt.clone(), Some(shared))
        });
        let csv = match &opts.csv {
            Some(p) => Some(CsvWriter::new(BufWriter::new(File::create(p)?))),
            None => None,
        };
        let jsonl = match &opts.jsonl {
            Some(p) => Some(BufWriter::new(File::create(p)?)),
            None => None,
        };
        Ok(Bench {
            shared: Shared {
                opts,
                rt,
                sink,
                store,
                keys,
                space,
            },
            out: Output {
                collector,
                csv,
                jsonl,
                stats: Vec::new(),
                windows: Vec::new(),
                hists: Vec::new(),
            },
        })
    }

    /// Single client; the collector runs inline every `ops_per_window` ops.
    fn run_inline(&mut self) -> Result<(), RunError> {
        let (sh, out) = (&self.shared, &mut self.out);
        let spec = &sh.opts.spec;
        let mut stream = OpStream::new(spec, 0)?;
        let mut value = vec![0u8; spec.value_size];
        let mut version = 0;
        for w in 0..spec.duration_windows {
            sh.sink.window.store(w, Ordering::Relaxed);
            let mut hist = LatencyHistogram::new();
            let mut busy = 0;
            for _ in 0..spec.ops_per_window {
                let op = stream.next_op();
                version += 1;
                let t0 = Instant::now();
                sh.do_op(op, version, &mut value)?;
                let ns = t0.elapsed().as_nanos() as u64 + take_fault_ns();
                hist.record(ns);
                busy += ns;
            }
            out.end_window(sh, w, hist, spec.ops_per_window, busy)?;
        }
        Ok(())
    }

    /// `client_threads` clients; windows are `collector_period_ms` of wall
    /// time with the collector running on this thread.
    fn run_threaded(&mut self) -> Result<(), RunError> {
        let (sh, out) = (&self.shared, &mut self.out);
        let spec = &sh.opts.spec;
        let stop = AtomicBool::new(false);
        let shards: Vec<Mutex<(LatencyHistogram, u64, u64)>> = (0..spec.client_threads)
            .map(|_| Mutex::new((LatencyHistogram::new(), 0, 0)))
            .collect();
        let version = AtomicU64::new(0);
        let failure: Mutex<Option<RunError>> = Mutex::new(None);
        let period = Duration::from_millis(spec.collector_period_ms);
        std::thread::scope(|s| {
            for (t, shard) in shards.iter().enumerate() {
                let (stop, version, failure) = (&stop, &version, &failure);
                s.spawn(move || {
                    let mut stream = match OpStream::new(spec, t as u64) {
                        Ok(st) => st,
                        Err(e) => {
                            *failure.lock() = Some(e.into());
                            return;
                        }
                    };
                    let mut value = vec![0u8; spec.value_size];
                    while !stop.load(Ordering::Relaxed) {
                        let op = stream.next_op();
                        let v = version.fetch_add(1, Ordering::Relaxed);
                        let t0 = Instant::now();
                        if let Err(e) = sh.do_op(op, v, &mut value) {
                            *failure.lock() = Some(e);
                            return;
                        }
                        let ns = t0.elapsed().as_nanos() as u64 + take_fault_ns();
                        let mut g = shard.lock();
                        g.0.record(ns);
                        g.1 += 1;
                        g.2 += ns;
                    }
                });
            }
            let mut result = Ok(());
            for w in 0..spec.duration_windows {
                std::thread::sleep(period);
                let mut hist = LatencyHistogram::new();
                let (mut ops, mut busy) = (0, 0);
                for shard in &shards {
                    let mut g = shard.lock();
                    hist.merge(&g.0);
                    g.0.clear();
                    ops += std::mem::take(&mut g.1);
                    busy += std::mem::take(&mut g.2);
                }
                result = out.end_window(sh, w, hist, ops, busy);
                sh.sink.window.store(w + 1, Ordering::Relaxed);
                if result.is_err() || failure.lock().is_some() {
                    break;
                }
            }
            stop.store(true, Ordering::Relaxed);
            if let Err(e) = result {
                *failure.lock() = Some(e);
            }
        });
        match failure.into_inner() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

impl Shared {
    /// Inserts every record in keyspace order and spot-checks a sample.
    /// Returns the post-load RSS.
    fn load(&self) -> Result<u64, RunError> {
        let spec = &self.opts.spec;
        let mut value = vec![0u8; spec.value_size];
        for (i, k) in self.keys.iter().enumerate() {
            fill_value(&mut value, i as u64, 0);
            self.store.put(k, &value)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.scatter_seed ^ 0x10ad);
        for _ in 0..VERIFY_SAMPLE.min(self.keys.len()) {
            let i = rng.random_range(0..spec.record_count);
            fill_value(&mut value, i, 0);
            if self.store.get(&self.keys[i as usize]).as_deref() != Some(&value[..]) {
                return Err(RunError::Verification(i));
            }
        }
        self.sink.trace.lock().clear();
        self.sink.faults.store(0, Ordering::Relaxed);
        self.rt.access_counters().take();
        take_fault_ns();
        let mut b = self.sink.backend.lock();
        sync_regions(&self.rt, &mut *b, 0);
        Ok(b.rss())
    }

    fn do_op(&self, op: Op, version: u64, value: &mut [u8]) -> Result<(), RunError> {
        match op {
            Op::Read(rank) => {
                let i = self.space.index_of(rank)?;
                if self.store.get(&self.keys[i as usize]).is_none() {
                    return Err(RunError::MissingKey(i));
                }
            }
            Op::Update(rank) => {
                let i = self.space.index_of(rank)?;
                fill_value(value, i, version);
                self.store.put(&self.keys[i as usize], value)?;
            }
        }
        Ok(())
    }
}

impl Output {
    fn end_window(
        &mut self,
        sh: &Shared,
        w: u64,
        hist: LatencyHistogram,
        ops: u64,
        busy: u64,
    ) -> Result<(), RunError> {
        let (c_t, stage, rate, pageout, moved, deferred) = match self.collector.as_mut() {
            Some(c) => {
                let o = c.run_window();
                (
                    o.decision.new_c_t,
                    o.decision.stage,
                    o.decision.rate,
                    o.advice.iter().any(|a| a.advice == Advice::Pageout),
                    o.apply.moved,
                    o.apply.deferred,
                )
            }
            None => {
                let (acc, cold) = sh.rt.access_counters().take();
                let rate = (acc > 0).then(|| cold as f64 / acc as f64);
                let cfg = &sh.rt.config().policy;
                (cfg.initial_c_t, AdviceStage::Reactive, rate, false, 0, 0)
            }
        };
        let rss = {
            let mut b = sh.sink.backend.lock();
            sync_regions(&sh.rt, &mut *b, w);
            b.pressure_tick(w);
            b.rss()
        };
        let accesses = std::mem::take(&mut *sh.sink.trace.lock());
        let u =
            utilization_of(accesses, sh.opts.heap.page_size).expect("accesses have positive size");
        let stats = EpochStats {
            window: w,
            page_utilization: u.fraction(),
            unique_pages: u.unique_pages,
            unique_bytes: u.unique_bytes,
            rss_bytes: rss,
            promotion_rate: rate.unwrap_or(0.0),
            throughput_ops: ops,
            latency_p50_ns: hist.percentile(0.50),
            latency_p99_ns: hist.percentile(0.99),
        };
        if let Some(csv) = &mut self.csv {
            csv.write(&stats)?;
        }
        if let Some(j) = &mut self.jsonl {
            write_json_line(&mut *j, &stats)?;
        }
        self.windows.push(WindowLog {
            window: w,
            c_t,
            stage,
            promotion_rate: rate,
            pageout_emitted: pageout,
            moved,
            deferred,
            rss_bytes: rss,
            faults: sh.sink.faults.swap(0, Ordering::Relaxed),
            busy_ns: busy,
        });
        self.stats.push(stats);
        self.hists.push(hist);
        Ok(())
    }
}

impl Bench {
    fn finish(self, post_load_rss: u64) -> Result<RunReport, RunError> {
        let (sh, out) = (self.shared, self.out);
        if let Some(mut csv) = out.csv {
            csv.flush()?;
        }
        if let Some(mut j) = out.jsonl {
            j.flush()?;
        }
        let spec = &sh.opts.spec;
        let n = out.stats.len();
        let live: u64 = HeapId::ALL
            .iter()
            .map(|&h| sh.rt.heaps().live_bytes(h))
            .sum();
        let hot_set_bytes = live / spec.record_count * spec.active_keys();
        let mean = |xs: &[EpochStats]| {
            let v: Vec<f64> = xs.iter().filter_map(|s| s.page_utilization).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let throughput = |from: usize| {
            let ops: u64 = out.stats[from..].iter().map(|s| s.throughput_ops).sum();
            let busy: u64 = out.windows[from..].iter().map(|w| w.busy_ns).sum();
            let clients = spec.client_threads as f64;
            if busy == 0 {
                0.0
            } else {
                ops as f64 * 1e9 * clients / busy as f64
            }
        };
        let merged = |from: usize| {
            let mut h = LatencyHistogram::new();
            out.hists[from..].iter().for_each(|x| h.merge(x));
            h
        };
        let all = merged(0);
        let steady = merged(n / 2);
        let pageout: Vec<&WindowLog> = out.windows.iter().filter(|w| w.pageout_emitted).collect();
        let summary = Summary {
            records: spec.record_count,
            windows: n as u64,
            post_load_rss,
            peak_rss: out
                .stats
                .iter()
                .map(|s| s.rss_bytes)
                .fold(post_load_rss, u64::max),
            final_rss: out.stats.last().map_or(post_load_rss, |s| s.rss_bytes),
            hot_set_bytes,
            mean_utilization: mean(&out.stats),
            final10_utilization: mean(&out.stats[n.saturating_sub(10)..]),
            ops: out.stats.iter().map(|s| s.throughput_ops).sum(),
            throughput_ops_per_sec: throughput(0),
            steady_throughput_ops_per_sec: throughput(n / 2),
            latency_mean_ns: all.mean_ns(),
            latency_p50_ns: all.percentile(0.50),
            latency_p99_ns: all.percentile(0.99),
            steady_latency_p99_ns: steady.percentile(0.99),
            total_faults: out.windows.iter().map(|w| w.faults).sum(),
            first_proactive_window: out
                .windows
                .iter()
                .find(|w| w.stage == AdviceStage::Proactive)
                .map(|w| w.window),
            pageout_windows: pageout.len() as u64,
            max_rate_in_pageout_window: pageout
                .iter()
                .map(|w| w.promotion_rate.unwrap_or(0.0))
                .reduce(f64::max),
        };
        Ok(RunReport {
            stats: out.stats,
            windows: out.windows,
            summary,
        })
    }
}
