//! Page utilization, latency histograms and per-window statistics.

use std::io::Write;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("trace entry at {address:#x} has zero size")]
    ZeroSize { address: u64 },
    #[error("page size {0} is not a power of two")]
    PageSize(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub address: u64,
    pub size: u64,
    pub window: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessTrace {
    pub entries: Vec<TraceEntry>,
    pub page_size: u64,
}

impl AccessTrace {
    pub fn new(page_size: u64) -> Self {
        AccessTrace {
            entries: Vec::new(),
            page_size,
        }
    }

    pub fn push(&mut self, address: u64, size: u64, window: u64) {
        self.entries.push(TraceEntry {
            address,
            size,
            window,
        });
    }
}

/// Unique bytes and pages touched by a set of accesses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utilization {
    pub unique_bytes: u64,
    pub unique_pages: u64,
    pub page_size: u64,
}

impl Utilization {
    /// `None` when nothing was touched.
    pub fn fraction(&self) -> Option<f64> {
        (self.unique_pages > 0)
            .then(|| self.unique_bytes as f64 / (self.unique_pages * self.page_size) as f64)
    }
}

/// Sorted interval union over `(address, size)` pairs.
pub fn utilization_of<I>(accesses: I, page_size: u64) -> Result<Utilization, MetricsError>
where
    I: IntoIterator<Item = (u64, u64)>,
{
    if !page_size.is_power_of_two() {
        return Err(MetricsError::PageSize(page_size));
    }
    let mut spans: Vec<(u64, u64)> = Vec::new();
    for (address, size) in accesses {
        if size == 0 {
            return Err(MetricsError::ZeroSize { address });
        }
        spans.push((address, address.saturating_add(size)));
    }
    spans.sort_unstable();
    let mut out = Utilization {
        page_size,
        ..Utilization::default()
    };
    let mut last_page: Option<u64> = None;
    let mut iter = spans.into_iter();
    let Some((mut start, mut end)) = iter.next() else {
        return Ok(out);
    };
    let mut flush = |start: u64, end: u64, out: &mut Utilization| {
        out.unique_bytes += end - start;
        let first = start / page_size;
        let last = (end - 1) / page_size;
        let first = match last_page {
            Some(p) if p >= first => p + 1,
            _ => first,
        };
        if last >= first {
            out.unique_pages += last - first + 1;
        }
        last_page = Some(last_page.map_or(last, |p| p.max(last)));
    };
    for (s, e) in iter {
        if s <= end {
            end = end.max(e);
        } else {
            flush(start, end, &mut out);
            start = s;
            end = e;
        }
    }
    flush(start, end, &mut out);
    Ok(out)
}

/// Page utilization of the entries in `window`; `Ok(None)` if there are none.
pub fn page_utilization(trace: &AccessTrace, window: u64) -> Result<Option<f64>, MetricsError> {
    let u = utilization_of(
        trace
            .entries
            .iter()
            .filter(|e| e.window == window)
            .map(|e| (e.address, e.size)),
        trace.page_size,
    )?;
    Ok(u.fraction())
}

pub const HISTOGRAM_BUCKETS: usize = 64;
const DECADES: f64 = 9.0;

/// Log-scale latency histogram over 1 ns to 1 s.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyHistogram {
    buckets: Vec<u64>,
    count: u64,
    sum_ns: u128,
}

impl Default for LatencyHistogram {
    fn default() -> Self {
        LatencyHistogram {
            buckets: vec![0; HISTOGRAM_BUCKETS],
            count: 0,
            sum_ns: 0,
        }
    }
}

impl LatencyHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bucket_of(ns: u64) -> usize {
        if ns <= 1 {
            return 0;
        }
        let b = ((ns as f64).log10() * HISTOGRAM_BUCKETS as f64 / DECADES).floor() as usize;
        b.min(HISTOGRAM_BUCKETS - 1)
    }

    /// Upper edge of bucket `i` in nanoseconds.
    pub fn upper_bound(i: usize) -> u64 {
        10f64
            .powf((i + 1) as f64 * DECADES / HISTOGRAM_BUCKETS as f64)
            .round() as u64
    }

    pub fn record(&mut self, ns: u64) {
        self.buckets[Self::bucket_of(ns)] += 1;
        self.count += 1;
        self.sum_ns += ns as u128;
    }

    pub fn merge(&mut self, other: &LatencyHistogram) {
        for (a, b) in self.buckets.iter_mut().zip(&other.buckets) {
            *a += b;
        }
        self.count += other.count;
        self.sum_ns += other.sum_ns;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean_ns(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum_ns as f64 / self.count as f64)
    }

    /// Upper bound of the bucket holding quantile `q`; 0 when empty.
    pub fn percentile(&self, q: f64) -> u64 {
        if self.count == 0 {
            return 0;
        }
        let rank = ((q * self.count as f64).ceil() as u64).clamp(1, self.count);
        let mut seen = 0;
        for (i, n) in self.buckets.iter().enumerate() {
            seen += n;
            if seen >= rank {
                return Self::upper_bound(i);
            }
        }
        Self::upper_bound(HISTOGRAM_BUCKETS - 1)
    }

    pub fn clear(&mut self) {
        *self = Self::default();
    }
}

/// One row of per-window output. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub window: u64,
    /// `None` (empty CSV cell) when nothing was touched.
    pub page_utilization: Option<f64>,
    pub unique_pages: u64,
    pub unique_bytes: u64,
    pub rss_bytes: u64,
    pub promotion_rate: f64,
    pub throughput_ops: u64,
    pub latency_p50_ns: u64,
    pub latency_p99_ns: u64,
}

pub const CSV_HEADER: &str = "window,page_utilization,unique_pages,unique_bytes,rss_bytes,promotion_rate,throughput_ops,latency_p50_ns,latency_p99_ns";

/// Accumulates one window of accesses and latencies.
#[derive(Debug, Clone)]
pub struct WindowRecorder {
    page_size: u64,
    accesses: Vec<(u64, u64)>,
    latency: LatencyHistogram,
    ops: u64,
}

impl WindowRecorder {
    pub fn new(page_size: u64) -> Self {
        WindowRecorder {
            page_size,
            accesses: Vec::new(),
            latency: LatencyHistogram::new(),
            ops: 0,
        }
    }

    pub fn record_access(&mut self, address: u64, size: u64) {
        self.accesses.push((address, size));
    }

    pub fn extend_accesses(&mut self, accesses: impl IntoIterator<Item = (u64, u64)>) {
        self.accesses.extend(accesses);
    }

    pub fn record_op(&mut self, latency_ns: u64) {
        self.ops += 1;
        self.latency.record(latency_ns);
    }

    pub fn latency(&self) -> &LatencyHistogram {
        &self.latency
    }

    /// Closes the window and resets the recorder.
    pub fn fold_epoch(&mut self, window: u64, rss_bytes: u64, promotion_rate: f64) -> EpochStats {
        let u = utilization_of(self.accesses.drain(..), self.page_size)
            .expect("recorder only holds non-empty accesses");
        let stats = EpochStats {
            window,
            page_utilization: u.fraction(),
            unique_pages: u.unique_pages,
            unique_bytes: u.unique_bytes,
            rss_bytes,
            promotion_rate,
            throughput_ops: self.ops,
            latency_p50_ns: self.latency.percentile(0.50),
            latency_p99_ns: self.latency.percentile(0.99),
        };
        self.ops = 0;
        self.latency.clear();
        stats
    }
}

pub struct CsvWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> CsvWriter<W> {
    pub fn new(out: W) -> Self {
        CsvWriter {
            inner: csv::Writer::from_writer(out),
        }
    }

    pub fn write(&mut self, stats: &EpochStats) -> Result<(), csv::Error> {
        self.inner.serialize(stats)
    }

    pub fn into_inner(self) -> std::io::Result<W> {
        self.inner.into_inner().map_err(|e| e.into_error())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

pub fn write_json_line<W: Write>(mut out: W, stats: &EpochStats) -> std::io::Result<()> {
    serde_json::to_writer(&mut out, stats)?;
    out.write_all(b"\n")
}
