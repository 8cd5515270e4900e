//! MIAD control of the demotion threshold and staging of region advice.

use std::sync::atomic::{AtomicU64, Ordering};

use crossbeam_utils::CachePadded;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdviceStage {
    /// COLD segments get cold advice only.
    Reactive,
    /// COLD segments are paged out.
    Proactive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub initial_c_t: u32,
    pub target_rate: f64,
    pub mi_factor: f64,
    pub ad_step: u32,
    pub c_t_min: u32,
    pub c_t_max: u32,
    pub hysteresis_windows: u32,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            initial_c_t: 4,
            target_rate: 0.01,
            mi_factor: 2.0,
            ad_step: 1,
            c_t_min: 1,
            c_t_max: 64,
            hysteresis_windows: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub new_c_t: u32,
    pub stage: AdviceStage,
    /// `None` when the window saw no accesses.
    pub rate: Option<f64>,
    pub promotions: u64,
    pub accesses: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState {
    config: PolicyConfig,
    c_t: u32,
    stage: AdviceStage,
    window_promotions: u64,
    window_accesses: u64,
    below_streak: u32,
}

impl Default for PolicyState {
    fn default() -> Self {
        Self::new(PolicyConfig::default())
    }
}

impl PolicyState {
    pub fn new(config: PolicyConfig) -> Self {
        let c_t = config.initial_c_t.clamp(config.c_t_min, config.c_t_max);
        PolicyState {
            config,
            c_t,
            stage: AdviceStage::Reactive,
            window_promotions: 0,
            window_accesses: 0,
            below_streak: 0,
        }
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn c_t(&self) -> u32 {
        self.c_t
    }

    pub fn current_advice_stage(&self) -> AdviceStage {
        self.stage
    }

    pub fn window_counts(&self) -> (u64, u64) {
        (self.window_promotions, self.window_accesses)
    }

    pub fn record_access(&mut self, is_cold_hit: bool) {
        self.window_accesses += 1;
        self.window_promotions += is_cold_hit as u64;
    }

    /// Adds pre-aggregated counts, as folded from [`AccessCounters`].
    pub fn record_counts(&mut self, accesses: u64, cold_hits: u64) {
        self.window_accesses += accesses;
        self.window_promotions += cold_hits;
    }

    /// Promotion rate of the open window, if it has any accesses.
    pub fn rate(&self) -> Option<f64> {
        (self.window_accesses > 0)
            .then(|| self.window_promotions as f64 / self.window_accesses as f64)
    }

    pub fn end_window(&mut self) -> PolicyDecision {
        let (promotions, accesses) = (self.window_promotions, self.window_accesses);
        let rate = self.rate();
        self.window_promotions = 0;
        self.window_accesses = 0;
        if let Some(rate) = rate {
            let cfg = &self.config;
            if rate > cfg.target_rate {
                let grown = (self.c_t as f64 * cfg.mi_factor).ceil() as u32;
                self.c_t = grown.min(cfg.c_t_max);
                self.stage = AdviceStage::Reactive;
                self.below_streak = 0;
            } else {
                self.c_t = self.c_t.saturating_sub(cfg.ad_step).max(cfg.c_t_min);
                if rate < cfg.target_rate {
                    self.below_streak += 1;
                    if self.below_streak >= cfg.hysteresis_windows {
                        self.stage = AdviceStage::Proactive;
                    }
                } else {
                    self.below_streak = 0;
                }
            }
        }
        PolicyDecision {
            new_c_t: self.c_t,
            stage: self.stage,
            rate,
            promotions,
            accesses,
        }
    }
}

#[derive(Debug, Default)]
struct Shard {
    accesses: AtomicU64,
    cold_hits: AtomicU64,
}

/// Per-thread access counters folded into [`PolicyState`] once per window.
#[derive(Debug)]
pub struct AccessCounters {
    shards: Box<[CachePadded<Shard>]>,
}

impl AccessCounters {
    pub fn new(shards: usize) -> Self {
        AccessCounters {
            shards: (0..shards.max(1))
                .map(|_| CachePadded::new(Shard::default()))
                .collect(),
        }
    }

    #[inline]
    pub fn record(&self, shard: usize, is_cold_hit: bool) {
        let s = &self.shards[shard % self.shards.len()];
        s.accesses.fetch_add(1, Ordering::Relaxed);
        if is_cold_hit {
            s.cold_hits.fetch_add(1, Ordering::Relaxed);
        }
    }

    /// Returns `(accesses, cold_hits)` and zeroes every shard.
    pub fn take(&self) -> (u64, u64) {
        self.shards.iter().fold((0, 0), |(a, c), s| {
            (
                a + s.accesses.swap(0, Ordering::Relaxed),
                c + s.cold_hits.swap(0, Ordering::Relaxed),
            )
        })
    }
}
