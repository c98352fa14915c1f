//! Plug-in mutual information and noise-threshold calibration.
//!
//! All estimates are maximum-likelihood (no bias correction). The verdict
//! compares an estimate with a threshold computed by the same estimator on
//! data without any dependence, so the estimator bias appears on both sides.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheConfig, CacheState};
use crate::rng::{substream, tag};

#[derive(Debug, Error)]
pub enum MiaError {
    #[error("entropy of an all-zero histogram")]
    EmptyHistogram,
    #[error("mutual information of an empty sample set")]
    EmptySamples,
    #[error("calibration needs at least 2 rounds, got {0}")]
    TooFewRounds(usize),
    #[error("calibration needs at least 1 sample per round")]
    NoSamples,
    #[error("noise rate {0} outside [0, 1)")]
    BadEpsilon(f64),
    #[error("invalid threshold rule: {0}")]
    BadRule(String),
    #[error("calibration file: {0}")]
    Io(#[from] std::io::Error),
    #[error("calibration file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Shannon entropy in bits of the distribution proportional to `counts`.
pub fn entropy(counts: &[u64]) -> Result<f64, MiaError> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(MiaError::EmptyHistogram);
    }
    let n = total as f64;
    let h: f64 = counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 / n * (n / c as f64).log2()).sum();
    Ok(h.max(0.0))
}

/// Paired observations of a secret chunk `x` and a probe symbol `y`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSet {
    pub pairs: Vec<(i64, u64)>,
}

impl SampleSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: i64, y: u64) {
        self.pairs.push((x, y));
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Dense joint histogram with symbols numbered in ascending value order.
    pub fn contingency(&self) -> Contingency {
        let xs = dense_index(self.pairs.iter().map(|p| p.0));
        let ys = dense_index(self.pairs.iter().map(|p| p.1));
        let mut table = Contingency::new(xs.len(), ys.len());
        for (x, y) in &self.pairs {
            table.add(xs[x], ys[y]);
        }
        table
    }
}

impl FromIterator<(i64, u64)> for SampleSet {
    fn from_iter<I: IntoIterator<Item = (i64, u64)>>(iter: I) -> Self {
        SampleSet { pairs: iter.into_iter().collect() }
    }
}

fn dense_index<T: Ord + Copy>(values: impl Iterator<Item = T>) -> BTreeMap<T, usize> {
    let mut m: BTreeMap<T, usize> = values.map(|v| (v, 0)).collect();
    for (i, v) in m.values_mut().enumerate() {
        *v = i;
    }
    m
}

/// Row-major joint count table over dense alphabets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contingency {
    pub nx: usize,
    pub ny: usize,
    pub counts: Vec<u64>,
}

impl Contingency {
    pub fn new(nx: usize, ny: usize) -> Self {
        Contingency { nx, ny, counts: vec![0; nx * ny] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let ny = rows.first().map_or(0, |r| r.len());
        let mut t = Contingency::new(rows.len(), ny);
        for (x, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), ny, "ragged contingency rows");
            t.counts[x * ny..(x + 1) * ny].copy_from_slice(r);
        }
        t
    }

    #[inline]
    pub fn add(&mut self, x: usize, y: usize) {
        self.counts[x * self.ny + y] += 1;
    }

    #[inline]
    pub fn add_n(&mut self, x: usize, y: usize, n: u64) {
        self.counts[x * self.ny + y] += n;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn x_marginal(&self) -> Vec<u64> {
        self.counts.chunks(self.ny.max(1)).map(|r| r.iter().sum()).collect()
    }

    pub fn y_marginal(&self) -> Vec<u64> {
        let mut m = vec![0u64; self.ny];
        for r in self.counts.chunks(self.ny.max(1)) {
            for (acc, c) in m.iter_mut().zip(r) {
                *acc += c;
            }
        }
        m
    }

    pub fn mutual_information(&self) -> Result<MIResult, MiaError> {
        let total = self.total();
        if total == 0 {
            return Err(MiaError::EmptySamples);
        }
        let n = total as f64;
        let px = self.x_marginal();
        let py = self.y_marginal();
        let hx = entropy(&px)?;
        let hy = entropy(&py)?;
        let mut mi = 0.0;
        for (x, row) in self.counts.chunks(self.ny).enumerate() {
            for (y, &c) in row.iter().enumerate() {
                if c > 0 {
                    let c = c as f64;
                    mi += c * (c * n / (px[x] as f64 * py[y] as f64)).log2();
                }
            }
        }
        let mi = (mi / n).clamp(0.0, hx.min(hy));
        Ok(MIResult {
            mi_bits: mi,
            n_samples: total,
            x_alphabet: px.iter().filter(|&&c| c > 0).count(),
            y_alphabet: py.iter().filter(|&&c| c > 0).count(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MIResult {
    pub mi_bits: f64,
    pub n_samples: u64,
    /// Observed symbol counts.
    pub x_alphabet: usize,
    pub y_alphabet: usize,
}

pub fn mutual_information(samples: &SampleSet) -> Result<MIResult, MiaError> {
    if samples.is_empty() {
        return Err(MiaError::EmptySamples);
    }
    samples.contingency().mutual_information()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdRule {
    /// mu + k * sigma.
    Sigma { k: f64 },
    /// Empirical quantile of the round MIs.
    Quantile { q: f64 },
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::Sigma { k: 3.0 }
    }
}

impl ThresholdRule {
    pub fn validate(&self) -> Result<(), MiaError> {
        match *self {
            ThresholdRule::Sigma { k } if !(k.is_finite() && k >= 0.0) => Err(MiaError::BadRule(format!("k = {k}"))),
            ThresholdRule::Quantile { q } if !(q > 0.0 && q <= 1.0) => Err(MiaError::BadRule(format!("q = {q}"))),
            _ => Ok(()),
        }
    }

    /// Returns (mu, sigma, value).
    pub fn apply(&self, mis: &[f64]) -> (f64, f64, f64) {
        let n = mis.len() as f64;
        let mu = mis.iter().sum::<f64>() / n;
        let var = if mis.len() > 1 { mis.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        let sigma = var.sqrt();
        let value = match *self {
            ThresholdRule::Sigma { k } => mu + k * sigma,
            ThresholdRule::Quantile { q } => {
                let mut sorted = mis.to_vec();
                sorted.sort_by(f64::total_cmp);
                let idx = ((q * n).ceil() as usize).clamp(1, sorted.len()) - 1;
                sorted[idx]
            }
        };
        (mu, sigma, value.max(mu))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub rounds: usize,
    pub samples_per_round: usize,
    pub epsilon: f64,
    pub seed: u64,
    /// Size of the uniform secret alphabet paired with the probes.
    pub x_alphabet: usize,
    pub rule: ThresholdRule,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        CalibrationParams {
            rounds: 100,
            samples_per_round: 100_000,
            epsilon: 0.01,
            seed: 0,
            x_alphabet: 256,
            rule: ThresholdRule::default(),
        }
    }
}

impl CalibrationParams {
    pub fn validate(&self) -> Result<(), MiaError> {
        if self.rounds < 2 {
            return Err(MiaError::TooFewRounds(self.rounds));
        }
        if self.samples_per_round == 0 || self.x_alphabet == 0 {
            return Err(MiaError::NoSamples);
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(MiaError::BadEpsilon(self.epsilon));
        }
        self.rule.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub mu: f64,
    pub sigma: f64,
    pub value: f64,
    pub params: CalibrationParams,
    /// One MI per calibration round, in round order.
    pub round_mis: Vec<f64>,
}

impl Threshold {
    /// The noise-free threshold: every calibration MI is exactly 0.
    pub fn zero(params: CalibrationParams) -> Self {
        let params = CalibrationParams { epsilon: 0.0, ..params };
        Threshold { mu: 0.0, sigma: 0.0, value: 0.0, round_mis: vec![0.0; params.rounds], params }
    }

    pub fn fraction_below(&self) -> f64 {
        let below = self.round_mis.iter().filter(|&&m| m <= self.value).count();
        below as f64 / self.round_mis.len().max(1) as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("threshold serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), MiaError> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MiaError> {
        let t: Threshold = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        t.params.validate()?;
        Ok(t)
    }
}

/// One round of the always-cached-variable experiment: a resident line is
/// probed (and so kept resident) `samples` times against uniform secrets.
fn calibration_round(params: &CalibrationParams, round: usize) -> f64 {
    let mut rng = substream(params.seed, &[tag::CALIBRATION, round as u64]);
    let config = CacheConfig {
        n_sets: 1,
        ways: 1,
        hit_false_negative_rate: params.epsilon,
        seed: params.seed,
        ..CacheConfig::default()
    };
    let mut cache = CacheState::new(&config).expect("validated noise rate");
    let line = 0;
    cache.touch_line(line);
    let mut table = Contingency::new(params.x_alphabet, 2);
    for _ in 0..params.samples_per_round {
        let x = rng.gen_range(0..params.x_alphabet);
        let y = cache.probe_line(line, &mut rng) as usize;
        table.add(x, y);
    }
    table.mutual_information().map(|r| r.mi_bits).unwrap_or(0.0)
}

pub fn calibrate_threshold(params: &CalibrationParams) -> Result<Threshold, MiaError> {
    params.validate()?;
    let round_mis: Vec<f64> = (0..params.rounds).into_par_iter().map(|r| calibration_round(params, r)).collect();
    let (mu, sigma, value) = params.rule.apply(&round_mis);
    Ok(Threshold { mu, sigma, value, params: params.clone(), round_mis })
}

/// How a location's probes are turned into symbols, for null simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NullModel {
    /// Each line scored on its own, the location keeps the maximum.
    PerLineMax { lines: usize },
    /// All lines of the location form one symbol.
    Joint { lines: usize },
}

fn binomial<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("probability in (0, 1)").sample(rng)
}

fn null_per_line<R: Rng + ?Sized>(x_counts: &[u64], lines: usize, eps: f64, rng: &mut R) -> f64 {
    let mut best = 0.0f64;
    let mut table = Contingency::new(x_counts.len(), 2);
    for _ in 0..lines {
        for (x, &c) in x_counts.iter().enumerate() {
            let miss = binomial(c, eps, rng);
            table.counts[2 * x] = miss;
            table.counts[2 * x + 1] = c - miss;
        }
        if let Ok(r) = table.mutual_information() {
            best = best.max(r.mi_bits);
        }
    }
    best
}

fn null_joint<R: Rng + ?Sized>(x_counts: &[u64], lines: usize, eps: f64, rng: &mut R) -> f64 {
    let lines = lines.clamp(1, 64);
    let q = 1.0 - eps;
    let any_miss = 1.0 - q.powi(lines as i32);
    // Symbols seen so far, numbered on first appearance; the MI does not
    // depend on the numbering.
    let mut symbols: BTreeMap<u64, usize> = BTreeMap::new();
    symbols.insert(0, 0);
    let mut rows: Vec<Vec<u64>> = vec![Vec::new(); x_counts.len()];
    for (x, &c) in x_counts.iter().enumerate() {
        let k = binomial(c, any_miss, rng);
        let mut row = vec![c - k];
        for _ in 0..k {
            // First missing line, truncated geometric on 0..lines.
            let u: f64 = rng.gen::<f64>() * any_miss;
            let first = if q > 0.0 { ((1.0 - u).ln() / q.ln()).floor() as usize } else { 0 };
            let mut pattern = 1u64 << first.min(lines - 1);
            for l in first.min(lines - 1) + 1..lines {
                if rng.gen::<f64>() < eps {
                    pattern |= 1 << l;
                }
            }
            let next = symbols.len();
            let s = *symbols.entry(pattern).or_insert(next);
            if row.len() <= s {
                row.resize(s + 1, 0);
            }
            row[s] += 1;
        }
        rows[x] = row;
    }
    let ny = symbols.len();
    for r in &mut rows {
        r.resize(ny, 0);
    }
    Contingency::from_rows(&rows).mutual_information().map(|r| r.mi_bits).unwrap_or(0.0)
}

/// Threshold for one key matched to its secret histograms: each round
/// simulates always-resident lines with noise `eps` paired with exactly the
/// given chunk counts, scores every component the way the detector would,
/// and keeps the maximum over components.
pub fn matched_threshold<R: Rng + ?Sized>(
    components: &[(&[u64], NullModel)],
    eps: f64,
    rounds: usize,
    rule: ThresholdRule,
    rng: &mut R,
) -> f64 {
    let informative = |c: &[u64]| c.iter().filter(|&&n| n > 0).count() >= 2;
    if eps <= 0.0 || !components.iter().any(|(c, _)| informative(c)) {
        return 0.0;
    }
    let mis: Vec<f64> = (0..rounds.max(2))
        .map(|_| {
            components
                .iter()
                .map(|&(x_counts, model)| match model {
                    NullModel::PerLineMax { lines } => null_per_line(x_counts, lines, eps, rng),
                    NullModel::Joint { lines } => null_joint(x_counts, lines, eps, rng),
                })
                .fold(0.0, f64::max)
        })
        .collect();
    rule.apply(&mis).2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[5, 5]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(entropy(&[0, 9]).unwrap(), 0.0);
        assert!((entropy(&[4, 6]).unwrap() - 0.970951).abs() < 1e-6);
        assert!(entropy(&[0, 0]).is_err());
    }

    #[test]
    fn mi_examples() {
        let t = Contingency::from_rows(&[vec![40, 10], vec![10, 40]]);
        assert!((t.mutual_information().unwrap().mi_bits - 0.278072).abs() < 1e-6);
        let ind = Contingency::from_rows(&[vec![6, 3], vec![4, 2]]);
        assert!(ind.mutual_information().unwrap().mi_bits.abs() < 1e-12);
        let s: SampleSet = (0..100).map(|i| (i % 2, (i % 2) as u64)).collect();
        assert!((mutual_information(&s).unwrap().mi_bits - 1.0).abs() < 1e-12);
        assert!(mutual_information(&SampleSet::new()).is_err());
    }

    #[test]
    fn zero_noise_threshold_is_zero() {
        let p = CalibrationParams { rounds: 4, samples_per_round: 1000, epsilon: 0.0, ..Default::default() };
        let t = calibrate_threshold(&p).unwrap();
        assert_eq!(t.value, 0.0);
        assert!(t.round_mis.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn rules() {
        let mis = [1.0, 2.0, 3.0, 4.0];
        let (mu, sigma, v) = ThresholdRule::Sigma { k: 3.0 }.apply(&mis);
        assert_eq!(mu, 2.5);
        assert!((sigma - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((v - (mu + 3.0 * sigma)).abs() < 1e-12);
        assert_eq!(ThresholdRule::Quantile { q: 0.5 }.apply(&mis).2, 2.5);
        assert_eq!(ThresholdRule::Quantile { q: 1.0 }.apply(&mis).2, 4.0);
        assert!(ThresholdRule::Quantile { q: 0.0 }.validate().is_err());
        assert!(CalibrationParams { rounds: 1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn joint_null_matches_per_line_for_one_line() {
        let counts = vec![500u64; 4];
        let mut a = substream(3, &[]);
        let mut b = substream(3, &[]);
        let per = matched_threshold(
            &[(&counts, NullModel::PerLineMax { lines: 1 })],
            0.05,
            50,
            ThresholdRule::default(),
            &mut a,
        );
        let joint =
            matched_threshold(&[(&counts, NullModel::Joint { lines: 1 })], 0.05, 50, ThresholdRule::default(), &mut b);
        assert!(per > 0.0 && joint > 0.0);
        assert!((per / joint).ln().abs() < 1.0, "{per} vs {joint}");
    }
}
