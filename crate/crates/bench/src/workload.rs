//! YCSB-style key generation and operation mixes.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("rank {rank} out of range for {records} records")]
    RankOutOfRange { rank: u64, records: u64 },
    #[error("invalid workload: {0}")]
    Invalid(String),
}

/// Operation mix letter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mix {
    /// 50% read, 50% update.
    A,
    /// 95% read, 5% update.
    B,
    /// Read only.
    C,
}

impl Mix {
    /// (read, update) percentages.
    pub fn percentages(self) -> (u32, u32) {
        match self {
            Mix::A => (50, 50),
            Mix::B => (95, 5),
            Mix::C => (100, 0),
        }
    }
}

impl FromStr for Mix {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Mix::A),
            "b" => Ok(Mix::B),
            "c" => Ok(Mix::C),
            _ => Err(WorkloadError::Invalid(format!("unknown mix `{s}`"))),
        }
    }
}

impl fmt::Display for Mix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mix::A => "a",
            Mix::B => "b",
            Mix::C => "c",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub record_count: u64,
    pub key_size: usize,
    pub value_size: usize,
    pub mix: Mix,
    pub zipf_theta: f64,
    pub scatter_seed: u64,
    pub client_threads: usize,
    pub duration_windows: u64,
    pub collector_period_ms: u64,
    /// Operations per window in single-client mode.
    pub ops_per_window: u64,
    /// Fraction of the keyspace the zipfian draws cover.
    pub active_fraction: f64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            record_count: 100_000,
            key_size: 30,
            value_size: 1024,
            mix: Mix::C,
            zipf_theta: 0.99,
            scatter_seed: 1,
            client_threads: 6,
            duration_windows: 60,
            collector_period_ms: 100,
            ops_per_window: 100_000,
            active_fraction: 1.0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::Invalid(m.to_string()));
        let (r, u) = self.mix.percentages();
        if r + u != 100 {
            return bad("mix percentages must sum to 100");
        }
        if self.record_count == 0 || self.record_count > u32::MAX as u64 {
            return bad("record count must be in 1..=2^32-1");
        }
        let digits = self.record_count.to_string().len();
        if self.key_size < 4 + digits || self.key_size > hades::structures::MAX_KEY_LEN {
            return bad("key size cannot hold the key prefix and index, or exceeds 256 bytes");
        }
        if self.value_size < 16 {
            return bad("value size must be at least 16 bytes");
        }
        if !(self.zipf_theta > 0.0 && self.zipf_theta.is_finite()) {
            return bad("zipf theta must be positive");
        }
        if !(self.active_fraction > 0.0 && self.active_fraction <= 1.0) {
            return bad("active fraction must be in (0, 1]");
        }
        if self.client_threads == 0 {
            return bad("client threads must be at least 1");
        }
        if self.duration_windows == 0 || self.ops_per_window == 0 || self.collector_period_ms == 0 {
            return bad("windows, ops per window and collector period must be positive");
        }
        Ok(())
    }

    /// Number of keys the zipfian draws cover.
    pub fn active_keys(&self) -> u64 {
        ((self.record_count as f64 * self.active_fraction).ceil() as u64)
            .clamp(1, self.record_count)
    }
}

/// Seeded permutation of the keyspace. Rank `r` maps to key index
/// `perm[r]`, so popular ranks land far apart.
#[derive(Debug, Clone)]
pub struct KeySpace {
    perm: Vec<u32>,
    key_size: usize,
}

impl KeySpace {
    pub fn new(records: u64, key_size: usize, seed: u64) -> Self {
        let mut perm: Vec<u32> = (0..records as u32).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        KeySpace { perm, key_size }
    }

    pub fn len(&self) -> u64 {
        self.perm.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn index_of(&self, rank: u64) -> Result<u64, WorkloadError> {
        self.perm
            .get(rank as usize)
            .map(|&i| i as u64)
            .ok_or(WorkloadError::RankOutOfRange {
                rank,
                records: self.len(),
            })
    }

    pub fn generate_key(&self, rank: u64) -> Result<Vec<u8>, WorkloadError> {
        Ok(self.key_for_index(self.index_of(rank)?))
    }

    /// Key bytes for a keyspace index: `user` + zero-padded index.
    pub fn key_for_index(&self, index: u64) -> Vec<u8> {
        let width = self.key_size - 4;
        format!("user{index:0width$}").into_bytes()
    }
}

/// Zipfian rank sampler over the first `n` ranks.
#[derive(Debug, Clone)]
pub struct RankSampler {
    zipf: Zipf<f64>,
}

impl RankSampler {
    pub fn new(n: u64, theta: f64) -> Result<Self, WorkloadError> {
        let zipf = Zipf::new(n as f64, theta).map_err(|e| WorkloadError::Invalid(e.to_string()))?;
        Ok(RankSampler { zipf })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        self.zipf.sample(rng) as u64 - 1
    }
}

/// Analytic zipf probability of rank `k` (0-based) among `n`.
pub fn zipf_mass(k: u64, n: u64, theta: f64) -> f64 {
    let h: f64 = (1..=n).map(|i| (i as f64).powf(-theta)).sum();
    ((k + 1) as f64).powf(-theta) / h
}

/// Deterministic value contents for (key index, version).
pub fn fill_value(buf: &mut [u8], index: u64, version: u64) {
    buf[..8].copy_from_slice(&index.to_le_bytes());
    buf[8..16].copy_from_slice(&version.to_le_bytes());
    let b = (index.wrapping_mul(31) ^ version) as u8;
    buf[16..].fill(b);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Read(u64),
    Update(u64),
}

/// Draws operations for one client.
#[derive(Debug, Clone)]
pub struct OpStream {
    rng: ChaCha8Rng,
    sampler: RankSampler,
    read_pct: u32,
}

impl OpStream {
    pub fn new(spec: &WorkloadSpec, stream: u64) -> Result<Self, WorkloadError> {
        Ok(OpStream {
            rng: ChaCha8Rng::seed_from_u64(spec.scatter_seed ^ 0x5eed_0000_0000 ^ stream),
            sampler: RankSampler::new(spec.active_keys(), spec.zipf_theta)?,
            read_pct: spec.mix.percentages().0,
        })
    }

    /// Next op as a rank.
    pub fn next_op(&mut self) -> Op {
        let rank = self.sampler.sample(&mut self.rng);
        if self.rng.random_range(0..100) < self.read_pct {
            Op::Read(rank)
        } else {
            Op::Update(rank)
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_deterministic_and_sized() {
        let a = KeySpace::new(1000, 30, 9);
        let b = KeySpace::new(1000, 30, 9);
        assert_eq!(a.generate_key(0).unwrap(), b.generate_key(0).unwrap());
        assert_eq!(a.generate_key(0).unwrap().len(), 30);
        assert_eq!(
            a.generate_key(1000),
            Err(WorkloadError::RankOutOfRange {
                rank: 1000,
                records: 1000
            })
        );
    }

    #[test]
    fn validation() {
        assert!(WorkloadSpec::default().validate().is_ok());
        let bad = WorkloadSpec {
            record_count: 0,
            ..WorkloadSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = WorkloadSpec {
            active_fraction: 0.0,
            ..WorkloadSpec::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("B".parse::<Mix>().unwrap(), Mix::B);
        assert!("d".parse::<Mix>().is_err());
    }

    #[test]
    fn values_encode_index_and_version() {
        let mut v = vec![0; 64];
        fill_value(&mut v, 7, 3);
        assert_eq!(u64::from_le_bytes(v[..8].try_into().unwrap()), 7);
        assert_eq!(u64::from_le_bytes(v[8..16].try_into().unwrap()), 3);
    }
}
