//! Workload harness for the hades runtime.
//!
//! Loads a key-value structure, drives a YCSB-style zipfian op mix through
//! it with the collector and a simulated page backend active, and reports
//! per-window page utilization, RSS, promotion rate and latency.

pub mod config;
pub mod driver;
pub mod overhead;
pub mod workload;

pub use config::{parse_args, Cli, ConfigError};
pub use driver::{
    run, BackendChoice, RunError, RunOptions, RunReport, Structure, Summary, WindowLog,
};
pub use workload::{KeySpace, Mix, RankSampler, WorkloadSpec};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/bench.md")]
mod book {}
