//! Command line and `key = value` config file.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{CommandFactory, Parser, ValueEnum};
use hades::HeapConfig;
use thiserror::Error;

use crate::driver::{BackendChoice, RunError, RunOptions, Structure};
use crate::workload::{Mix, WorkloadSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Line {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Args(#[from] clap::Error),
    #[error(transparent)]
    Invalid(#[from] RunError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

/// Parses `sim-advice`, `sim-pressure=<bytes>` or `sim-cgroup=<bytes>`.
impl FromStr for BackendChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('=') {
            None if s == "sim-advice" => Ok(BackendChoice::SimAdvice),
            Some(("sim-pressure", b)) => Ok(BackendChoice::SimPressure(parse_bytes(b)?)),
            Some(("sim-cgroup", b)) => Ok(BackendChoice::SimCgroup(parse_bytes(b)?)),
            _ => Err(format!(
                "unknown backend `{s}` (expected sim-advice, sim-pressure=<bytes> or sim-cgroup=<bytes>)"
            )),
        }
    }
}

/// Byte count with an optional binary suffix: `4096`, `64K`, `32M`, `2G`.
pub fn parse_bytes(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (digits, shift) = match s.char_indices().find(|(_, c)| !c.is_ascii_digit()) {
        None => (s, 0),
        Some((i, _)) => {
            let shift = match s[i..].to_ascii_lowercase().as_str() {
                "k" | "kb" | "kib" => 10,
                "m" | "mb" | "mib" => 20,
                "g" | "gb" | "gib" => 30,
                other => return Err(format!("unknown size suffix `{other}`")),
            };
            (&s[..i], shift)
        }
    };
    let n: u64 = digits
        .parse()
        .map_err(|_| format!("bad byte count `{s}`"))?;
    n.checked_mul(1 << shift)
        .ok_or_else(|| format!("byte count `{s}` overflows"))
}

#[derive(Debug, Clone, Parser)]
#[command(
    name = "hades-bench",
    version,
    about = "YCSB-style workloads over hades-managed structures"
)]
#[command(args_override_self = true)]
pub struct Cli {
    /// Flat `key = value` file; keys are flag names without dashes.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 100_000)]
    pub records: u64,
    #[arg(long, default_value_t = 30)]
    pub key_size: usize,
    #[arg(long, default_value_t = 1024)]
    pub value_size: usize,
    #[arg(long, default_value = "c")]
    pub mix: Mix,
    #[arg(long, default_value_t = 0.99)]
    pub theta: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 60)]
    pub windows: u64,
    #[arg(long, default_value_t = 100)]
    pub collector_period_ms: u64,
    /// Window length in single-client mode.
    #[arg(long, default_value_t = 100_000)]
    pub ops_per_window: u64,
    /// Fraction of the keyspace the zipfian draws cover.
    #[arg(long, default_value_t = 1.0)]
    pub active_fraction: f64,
    /// 1 gives the deterministic inline-collector mode.
    #[arg(long, default_value_t = 6)]
    pub client_threads: usize,
    #[arg(long, default_value = "sim-advice")]
    pub backend: BackendChoice,
    #[arg(long, value_enum, default_value_t = StructureArg::Hash)]
    pub structure: StructureArg,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    pub collector: Toggle,
    /// Compute utilization from every access rather than a 1-in-16 sample.
    #[arg(long)]
    pub exact_metrics: bool,
    #[arg(long, default_value_t = 10_000)]
    pub fault_penalty_ns: u64,
    #[arg(long, default_value = "2M", value_parser = parse_bytes)]
    pub segment_size: u64,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub jsonl: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StructureArg {
    Hash,
    Skiplist,
}

impl Cli {
    pub fn into_options(self) -> Result<RunOptions, ConfigError> {
        let opts = RunOptions {
            spec: WorkloadSpec {
                record_count: self.records,
                key_size: self.key_size,
                value_size: self.value_size,
                mix: self.mix,
                zipf_theta: self.theta,
                scatter_seed: self.seed,
                client_threads: self.client_threads,
                duration_windows: self.windows,
                collector_period_ms: self.collector_period_ms,
                ops_per_window: self.ops_per_window,
                active_fraction: self.active_fraction,
            },
            backend: self.backend,
            structure: match self.structure {
                StructureArg::Hash => Structure::Hash,
                StructureArg::Skiplist => Structure::Skiplist,
            },
            collector: self.collector == Toggle::On,
            exact_metrics: self.exact_metrics,
            fault_penalty_ns: self.fault_penalty_ns,
            heap: HeapConfig {
                segment_size: self.segment_size,
                ..HeapConfig::default()
            },
            csv: self.csv,
            jsonl: self.jsonl,
        };
        if opts.heap.segment_size == 0 || opts.heap.segment_size % opts.heap.page_size != 0 {
            return Err(RunError::Config(
                "segment size must be a positive multiple of the page size".into(),
            )
            .into());
        }
        opts.validate()?;
        Ok(opts)
    }
}

/// Turns config file lines into `--key=value` arguments.
pub fn config_file_args(path: &Path) -> Result<Vec<OsString>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::File {
        path: path.to_owned(),
        source,
    })?;
    let cmd = Cli::command();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| ConfigError::Line {
            path: path.to_owned(),
            line: n + 1,
            message,
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected key = value, got `{line}`")))?;
        let (k, v) = (k.trim().replace('_', "-"), v.trim());
        let arg = cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(k.as_str()))
            .filter(|_| k != "config")
            .ok_or_else(|| err(format!("unknown key `{k}`")))?;
        if !arg.get_action().takes_values() {
            match v {
                "true" | "on" | "1" => out.push(format!("--{k}").into()),
                "false" | "off" | "0" => {}
                _ => return Err(err(format!("`{k}` expects true or false"))),
            }
        } else {
            out.push(format!("--{k}={v}").into());
        }
    }
    Ok(out)
}

/// Parses the command line, splicing in `--config` file entries so that
/// explicit flags win.
pub fn parse_args<I, T>(args: I) -> Result<Cli, ConfigError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let first = Cli::try_parse_from(&args)?;
    let Some(path) = &first.config else {
        return Ok(first);
    };
    let mut spliced = vec![args
        .first()
        .cloned()
        .unwrap_or_else(|| "hades-bench".into())];
    spliced.extend(config_file_args(path)?);
    spliced.extend(args.into_iter().skip(1));
    Ok(Cli::try_parse_from(spliced)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn byte_sizes() {
        assert_eq!(parse_bytes("4096"), Ok(4096));
        assert_eq!(parse_bytes("64K"), Ok(64 << 10));
        assert_eq!(parse_bytes("3MiB"), Ok(3 << 20));
        assert!(parse_bytes("3X").is_err());
        assert!(parse_bytes("").is_err());
    }

    #[test]
    fn backend_values() {
        assert_eq!("sim-advice".parse(), Ok(BackendChoice::SimAdvice));
        assert_eq!(
            "sim-cgroup=1G".parse(),
            Ok(BackendChoice::SimCgroup(1 << 30))
        );
        assert_eq!(
            "sim-pressure=100".parse(),
            Ok(BackendChoice::SimPressure(100))
        );
        assert!("sim-cgroup".parse::<BackendChoice>().is_err());
    }

    #[test]
    fn config_file_and_flag_precedence() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            f,
            "# comment\nrecords = 500\nmix = a\nexact_metrics = true\nwindows=3"
        )
        .unwrap();
        let p = f.path().to_str().unwrap();
        let cli = parse_args(["hades-bench", "--config", p, "--windows", "7"]).unwrap();
        assert_eq!(
            (cli.records, cli.mix, cli.exact_metrics, cli.windows),
            (500, Mix::A, true, 7)
        );
    }

    #[test]
    fn config_errors() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "bogus = 1").unwrap();
        let p = f.path().to_str().unwrap();
        assert!(matches!(
            parse_args(["hades-bench", "--config", p]),
            Err(ConfigError::Line { line: 1, .. })
        ));
        assert!(parse_args(["hades-bench", "--mix", "z"]).is_err());
        let cli = parse_args(["hades-bench", "--records", "0"]).unwrap();
        assert!(cli.into_options().is_err());
    }
}
