//! Paired read throughput of an instrumented and an uninstrumented map.

use std::hint::black_box;
use std::time::Instant;

use hades::{Instrumentation, ManagedHashMap, Runtime, RuntimeConfig, Tracked, Untracked};
use serde::{Deserialize, Serialize};

use crate::driver::RunError;
use crate::workload::{fill_value, KeySpace, Mix, Op, OpStream, WorkloadSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadConfig {
    pub records: u64,
    pub value_size: usize,
    pub ops: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for OverheadConfig {
    fn default() -> Self {
        OverheadConfig {
            records: 100_000,
            value_size: 1024,
            ops: 200_000,
            repetitions: 9,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    /// Median over repetitions.
    pub tracked_ops_per_sec: f64,
    pub untracked_ops_per_sec: f64,
    /// `1 - tracked / untracked`.
    pub degradation: f64,
}

fn loaded<I: Instrumentation>(
    inst: I,
    keys: &[Vec<u8>],
    value_size: usize,
) -> Result<ManagedHashMap<I>, RunError> {
    let m = ManagedHashMap::new(inst);
    let mut v = vec![0u8; value_size];
    for (i, k) in keys.iter().enumerate() {
        fill_value(&mut v, i as u64, 0);
        m.put(k, &v)?;
    }
    Ok(m)
}

fn pass<I: Instrumentation>(m: &ManagedHashMap<I>, keys: &[Vec<u8>], order: &[usize]) -> f64 {
    let t0 = Instant::now();
    let mut bytes = 0usize;
    for &i in order {
        bytes += m.get(&keys[i]).map_or(0, |v| v.len());
    }
    black_box(bytes);
    order.len() as f64 / t0.elapsed().as_secs_f64()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// C-mix reads with tracking compiled in but no collector ever opening an
/// epoch, against the same map built with [`Untracked`].
pub fn measure(cfg: &OverheadConfig) -> Result<OverheadReport, RunError> {
    let spec = WorkloadSpec {
        record_count: cfg.records,
        value_size: cfg.value_size,
        mix: Mix::C,
        scatter_seed: cfg.seed,
        client_threads: 1,
        ..WorkloadSpec::default()
    };
    spec.validate()?;
    let space = KeySpace::new(spec.record_count, spec.key_size, spec.scatter_seed);
    let keys: Vec<Vec<u8>> = (0..spec.record_count)
        .map(|i| space.key_for_index(i))
        .collect();
    let mut stream = OpStream::new(&spec, 0)?;
    let order = (0..cfg.ops)
        .map(|_| match stream.next_op() {
            Op::Read(r) | Op::Update(r) => space.index_of(r).map(|i| i as usize),
        })
        .collect::<Result<Vec<_>, _>>()?;

    let tracked = loaded(
        Tracked(Runtime::new(RuntimeConfig::default())?),
        &keys,
        cfg.value_size,
    )?;
    let untracked = loaded(
        Untracked(Runtime::new(RuntimeConfig::default())?),
        &keys,
        cfg.value_size,
    )?;
    pass(&tracked, &keys, &order);
    pass(&untracked, &keys, &order);
    let (mut t, mut u) = (Vec::new(), Vec::new());
    for rep in 0..cfg.repetitions.max(1) {
        if rep % 2 == 0 {
            t.push(pass(&tracked, &keys, &order));
            u.push(pass(&untracked, &keys, &order));
        } else {
            u.push(pass(&untracked, &keys, &order));
            t.push(pass(&tracked, &keys, &order));
        }
    }
    let (t, u) = (median(t), median(u));
    Ok(OverheadReport {
        tracked_ops_per_sec: t,
        untracked_ops_per_sec: u,
        degradation: 1.0 - t / u,
    })
}
