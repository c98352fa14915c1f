//! Single-level set-associative cache with flush and timed-probe semantics.
//!
//! Probes are binary. An absent line always probes as a miss; a resident line
//! probes as a hit except with probability `hit_false_negative_rate`, which
//! models timing noise that only ever inflates measured access times.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{AccessEvent, ExecutionObserver, Layout, RegionId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CacheConfigError {
    #[error("line size {0} must be a power of two")]
    LineSize(usize),
    #[error("set count {0} must be a power of two")]
    Sets(usize),
    #[error("associativity must be at least 1")]
    Ways,
    #[error("false negative rate {0} must lie in [0, 1)")]
    Noise(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Replacement {
    #[default]
    Lru,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub line_size: usize,
    pub n_sets: usize,
    pub ways: usize,
    #[serde(default)]
    pub replacement: Replacement,
    /// Probability that a resident line probes as a miss.
    pub hit_false_negative_rate: f64,
    pub seed: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            line_size: 64,
            n_sets: 1024,
            ways: 16,
            replacement: Replacement::Lru,
            hit_false_negative_rate: 0.01,
            seed: 0,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<(), CacheConfigError> {
        if self.line_size == 0 || !self.line_size.is_power_of_two() {
            return Err(CacheConfigError::LineSize(self.line_size));
        }
        if self.n_sets == 0 || !self.n_sets.is_power_of_two() {
            return Err(CacheConfigError::Sets(self.n_sets));
        }
        if self.ways == 0 {
            return Err(CacheConfigError::Ways);
        }
        let eps = self.hit_false_negative_rate;
        if !(0.0..1.0).contains(&eps) {
            return Err(CacheConfigError::Noise(eps));
        }
        Ok(())
    }
}

/// A cache line of a region, counted from the line holding the region start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LineId {
    pub region: RegionId,
    pub line_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum ProbeOutcome {
    Miss = 0,
    Hit = 1,
}

impl ProbeOutcome {
    pub fn is_hit(self) -> bool {
        self == ProbeOutcome::Hit
    }
}

/// Resident lines per set, least recently used first.
#[derive(Debug, Clone)]
pub struct CacheState {
    line_shift: u32,
    set_mask: u64,
    ways: usize,
    eps: f64,
    sets: Vec<Vec<u64>>,
}

impl CacheState {
    pub fn new(config: &CacheConfig) -> Result<Self, CacheConfigError> {
        config.validate()?;
        Ok(CacheState {
            line_shift: config.line_size.trailing_zeros(),
            set_mask: config.n_sets as u64 - 1,
            ways: config.ways,
            eps: config.hit_false_negative_rate,
            sets: vec![Vec::new(); config.n_sets],
        })
    }

    #[inline]
    fn set_of(&self, line: u64) -> usize {
        (line & self.set_mask) as usize
    }

    /// Makes `line` resident and most recently used.
    pub fn touch_line(&mut self, line: u64) {
        let ways = self.ways;
        let idx = self.set_of(line);
        let set = &mut self.sets[idx];
        if let Some(pos) = set.iter().position(|&l| l == line) {
            if pos + 1 != set.len() {
                set.remove(pos);
                set.push(line);
            }
            return;
        }
        if set.len() == ways {
            set.remove(0);
        }
        set.push(line);
    }

    pub fn touch(&mut self, event: &AccessEvent) {
        let first = event.global >> self.line_shift;
        let last = (event.global + event.size.max(1) as u64 - 1) >> self.line_shift;
        for line in first..=last {
            self.touch_line(line);
        }
    }

    pub fn is_resident(&self, line: u64) -> bool {
        self.sets[self.set_of(line)].contains(&line)
    }

    pub fn evict_line(&mut self, line: u64) {
        let idx = self.set_of(line);
        self.sets[idx].retain(|&l| l != line);
    }

    pub fn evict(&mut self, layout: &Layout, lines: &[LineId]) {
        for l in lines {
            self.evict_line(layout.global_line(*l));
        }
    }

    /// Timed reload of `line`: reports the outcome, then leaves the line
    /// resident.
    pub fn probe_line<R: Rng + ?Sized>(&mut self, line: u64, rng: &mut R) -> ProbeOutcome {
        // The noise draw only happens for resident lines.
        let outcome = if !self.is_resident(line) || (self.eps > 0.0 && rng.gen::<f64>() < self.eps) {
            ProbeOutcome::Miss
        } else {
            ProbeOutcome::Hit
        };
        self.touch_line(line);
        outcome
    }

    pub fn probe<R: Rng + ?Sized>(&mut self, layout: &Layout, line: LineId, rng: &mut R) -> ProbeOutcome {
        self.probe_line(layout.global_line(line), rng)
    }
}

impl ExecutionObserver for CacheState {
    fn on_access(&mut self, event: &AccessEvent) {
        self.touch(event);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn cfg(n_sets: usize, ways: usize, eps: f64) -> CacheConfig {
        CacheConfig { line_size: 64, n_sets, ways, hit_false_negative_rate: eps, ..Default::default() }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(1024, 16, 0.01).validate().is_ok());
        assert!(cfg(1000, 16, 0.01).validate().is_err());
        assert!(cfg(1024, 16, 1.0).validate().is_err());
        let odd_line = CacheConfig { line_size: 48, ..Default::default() };
        assert!(odd_line.validate().is_err());
    }

    #[test]
    fn evict_touch_probe() {
        let mut c = CacheState::new(&cfg(16, 2, 0.0)).unwrap();
        let mut rng = substream(0, &[]);
        c.evict_line(5);
        assert_eq!(c.probe_line(5, &mut rng), ProbeOutcome::Miss);
        assert_eq!(c.probe_line(5, &mut rng), ProbeOutcome::Hit, "probe reloads the line");
        c.evict_line(5);
        c.evict_line(5);
        assert!(!c.is_resident(5));
        c.touch_line(5);
        assert_eq!(c.probe_line(5, &mut rng), ProbeOutcome::Hit);
    }

    #[test]
    fn lru_overflow_evicts_first_touched() {
        // 2 ways, lines 0, 4, 8 all map to set 0 of a 4-set cache.
        let mut c = CacheState::new(&cfg(4, 2, 0.0)).unwrap();
        for l in [0, 4, 8] {
            c.touch_line(l);
        }
        assert!(!c.is_resident(0));
        assert!(c.is_resident(4) && c.is_resident(8));
        c.touch_line(4);
        c.touch_line(12);
        assert!(!c.is_resident(8));
    }

    #[test]
    fn absent_lines_never_hit_under_noise() {
        let mut c = CacheState::new(&cfg(4, 2, 0.9)).unwrap();
        let mut rng = substream(1, &[]);
        for _ in 0..1000 {
            c.evict_line(3);
            assert_eq!(c.probe_line(3, &mut rng), ProbeOutcome::Miss);
        }
    }

    #[test]
    fn spanning_access_touches_both_lines() {
        let mut c = CacheState::new(&cfg(16, 4, 0.0)).unwrap();
        let ev = AccessEvent {
            kind: crate::exec::AccessKind::Read,
            address: crate::exec::Address { region: RegionId(0), offset: 63 },
            size: 4,
            global: 63,
            index_taint: crate::taint::Taint::NONE,
            value_taint: crate::taint::Taint::NONE,
        };
        c.touch(&ev);
        assert!(c.is_resident(0) && c.is_resident(1));
    }
}
