//! End-to-end leak detection: taint, evict/run/probe tracing, MI per suspect
//! location, and the verdict against the noise threshold.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cache::{CacheConfig, CacheConfigError, CacheState};
use crate::exec::{build_address_space, run_kernel, AccessEvent, ExecError, ExecutionObserver, Layout, Marker};
use crate::kernels::{KernelVariant, SecretPolicy, Style};
use crate::keysplit::KeysplitError;
use crate::mia::{matched_threshold, Contingency, MiaError, NullModel, Threshold, ThresholdRule};
use crate::rng::{substream, tag, StreamRng};
use crate::taint::{default_taint_samples, list_secret_tainted_memory, Reason, SuspectLocation, Target};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Cache(#[from] CacheConfigError),
    #[error(transparent)]
    Mia(#[from] MiaError),
    #[error(transparent)]
    Keysplit(#[from] KeysplitError),
    #[error("kernel `{kernel}` runs under the {expected} schedule, not {requested}")]
    ScheduleMismatch { kernel: String, expected: ProbeSchedule, requested: ProbeSchedule },
    #[error("threshold was calibrated at noise {threshold}, the cache is configured with {config}")]
    EpsilonMismatch { threshold: f64, config: f64 },
    #[error("kernel produced {probes} probe points but its secret splits into {chunks} chunks")]
    StepMismatch { probes: usize, chunks: usize },
    #[error("location `{target}` spans {lines} lines, at most 64 are supported")]
    TooManyLines { target: String, lines: usize },
    #[error("unknown location `{0}`")]
    UnknownTarget(String),
    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),
}

/// Where the evict and probe steps wrap the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSchedule {
    /// Evict before the whole execution, probe after it.
    WholeRun,
    /// Around each loop iteration.
    PerIteration,
    /// Around each window step.
    PerWindow,
}

impl fmt::Display for ProbeSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeSchedule::WholeRun => "whole_run",
            ProbeSchedule::PerIteration => "per_iteration",
            ProbeSchedule::PerWindow => "per_window",
        })
    }
}

impl FromStr for ProbeSchedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "whole_run" => Ok(ProbeSchedule::WholeRun),
            "per_iteration" => Ok(ProbeSchedule::PerIteration),
            "per_window" => Ok(ProbeSchedule::PerWindow),
            _ => Err(format!("unknown schedule `{s}` (whole_run, per_iteration, per_window)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_keys: usize,
    /// Executions per key. Per-key-secret kernels see a fresh public input
    /// per execution; per-trace kernels a fresh secret.
    pub traces_per_key: usize,
    /// Requested schedule; must match the kernel's if set.
    pub schedule: Option<ProbeSchedule>,
    pub cache: CacheConfig,
    /// Draw the kernel's placement knobs per key.
    pub randomize_base_offsets: bool,
    /// Pinned region offsets. These win over randomization.
    #[serde(default)]
    pub fixed_offsets: BTreeMap<String, usize>,
    pub seed: u64,
    /// Rounds of the per-key null simulation.
    pub calibration_rounds: usize,
    /// Random secrets for the taint pass, on top of the degenerate ones.
    pub taint_random_secrets: usize,
    /// Worker threads; 0 uses every core. Results never depend on it.
    #[serde(skip)]
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_keys: 100,
            traces_per_key: 4,
            schedule: None,
            cache: CacheConfig::default(),
            randomize_base_offsets: true,
            fixed_offsets: BTreeMap::new(),
            seed: 0,
            calibration_rounds: 100,
            taint_random_secrets: 16,
            jobs: 0,
        }
    }
}

impl ExperimentConfig {
    /// Family defaults: AES runs 4 keys of 10^5 encryptions, the greeting
    /// example 10^3 invocations, modexp and ECC 100 keys with enough
    /// executions per key for a few thousand samples each.
    pub fn for_kernel(kernel: &KernelVariant) -> Self {
        let mut c = ExperimentConfig::default();
        match kernel.style {
            Style::Aes { .. } => {
                c.n_keys = 4;
                c.traces_per_key = 100_000;
            }
            Style::Hello { .. } => {
                c.n_keys = 1;
                c.traces_per_key = 1000;
            }
            Style::Modexp { .. } => c.traces_per_key = 16,
            Style::Ecc { .. } => c.traces_per_key = 64,
            Style::TaintToy => {}
        }
        c
    }

    pub fn epsilon(&self) -> f64 {
        self.cache.hit_false_negative_rate
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.n_keys == 0 || self.traces_per_key == 0 {
            return Err(DetectorError::InvalidConfig("n_keys and traces_per_key must be positive".into()));
        }
        if self.calibration_rounds < 2 {
            return Err(DetectorError::InvalidConfig("calibration_rounds must be at least 2".into()));
        }
        self.cache.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Leaks,
    NoLeak,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Leaks => "leaks",
            Verdict::NoLeak => "no_leak",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub name: String,
    pub per_key_mi: Vec<f64>,
    pub avg_mi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationReport {
    /// Display name: region name, or `@label` for code sites.
    pub name: String,
    pub target: Target,
    /// First reason the taint pass reported.
    pub reason: Option<Reason>,
    pub reasons: Vec<Reason>,
    pub per_key_mi: Vec<f64>,
    pub per_key_threshold: Vec<f64>,
    pub avg_mi: f64,
    /// Mean of the per-key thresholds. Each per-key threshold is the larger
    /// of the calibrated value and a null simulation matched to the key's
    /// chunk histogram and the location's line count.
    pub threshold: f64,
    pub verdict: Verdict,
    pub segments: Vec<SegmentReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakReport {
    pub kernel: String,
    pub config_digest: String,
    /// Value of the calibration the run was checked against.
    pub threshold: f64,
    /// The taint pass found nothing to measure.
    pub no_suspects: bool,
    pub verdict: Verdict,
    pub locations: Vec<LocationReport>,
    /// Region offsets used for each key.
    pub offsets: Vec<BTreeMap<String, usize>>,
}

impl LeakReport {
    pub fn location(&self, name: &str) -> Option<&LocationReport> {
        self.locations.iter().find(|l| l.name == name || l.target.name() == name)
    }

    pub fn leaking(&self) -> Vec<&str> {
        self.locations.iter().filter(|l| l.verdict == Verdict::Leaks).map(|l| l.name.as_str()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerKeyRow {
    pub key_index: usize,
    pub location: String,
    pub mi: f64,
    /// Offsets used for the key, as `region=bytes` joined by `;`.
    pub offset: String,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Executions per key.
    pub samples: usize,
    pub location: String,
    pub mi: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelloRow {
    pub gender: u8,
    pub b1_hit: bool,
    pub b2_hit: bool,
}

/// A monitored set of lines scored as one location.
#[derive(Debug, Clone)]
struct LocationDef {
    name: String,
    targets: Vec<Target>,
    reasons: Vec<Reason>,
    /// Score the full hit pattern as one symbol instead of per line.
    joint: bool,
}

/// Groups suspects by target, keeping discovery order.
fn group_suspects(suspects: &[SuspectLocation]) -> Vec<LocationDef> {
    let mut out: Vec<LocationDef> = Vec::new();
    for s in suspects {
        match out.iter_mut().find(|l| l.targets[0] == s.target) {
            Some(l) => {
                if !l.reasons.contains(&s.reason) {
                    l.reasons.push(s.reason);
                }
            }
            None => out.push(LocationDef {
                name: s.target.to_string(),
                targets: vec![s.target.clone()],
                reasons: vec![s.reason],
                joint: false,
            }),
        }
    }
    out
}

fn target_lines(layout: &Layout, target: &Target) -> Result<Vec<u64>, DetectorError> {
    let lines = match target {
        Target::Region { name, start, end } => {
            let id = layout.region_id(name).ok_or_else(|| DetectorError::UnknownTarget(name.clone()))?;
            let size = layout.region(id).size;
            layout.range_lines(id, (*start).min(size)..(*end).min(size))
        }
        Target::Site { label } => {
            let id = layout.site_id(label).ok_or_else(|| DetectorError::UnknownTarget(label.clone()))?;
            layout.site_lines(id)
        }
    };
    Ok(lines.into_iter().map(|l| layout.global_line(l)).collect())
}

fn location_lines(layout: &Layout, loc: &LocationDef) -> Result<Vec<u64>, DetectorError> {
    let mut lines = Vec::new();
    for t in &loc.targets {
        lines.extend(target_lines(layout, t)?);
    }
    lines.sort_unstable();
    lines.dedup();
    if lines.len() > 64 {
        return Err(DetectorError::TooManyLines { target: loc.name.clone(), lines: lines.len() });
    }
    Ok(lines)
}

/// Looks a name up as a region first, then as a code site label.
fn resolve_target(kernel: &KernelVariant, line_size: usize, name: &str) -> Result<Target, DetectorError> {
    let spec = kernel.spec(line_size);
    let name = name.strip_prefix('@').unwrap_or(name);
    if let Some(r) = spec.regions.iter().find(|r| r.name == name) {
        return Ok(Target::Region { name: r.name.clone(), start: 0, end: r.size });
    }
    if spec.sites.iter().any(|s| s.label == name) {
        return Ok(Target::Site { label: name.into() });
    }
    Err(DetectorError::UnknownTarget(name.into()))
}

/// Observer that evicts the monitored lines at `StepBegin` and probes them
/// at `probe_at`.
struct Tracer {
    cache: CacheState,
    rng: StreamRng,
    monitored: Vec<u64>,
    probe_at: Marker,
    /// Probe outcomes, `monitored.len()` per probe point.
    hits: Vec<bool>,
    probes: usize,
    open: bool,
}

impl Tracer {
    fn new(cache: CacheState, rng: StreamRng, monitored: Vec<u64>) -> Self {
        Tracer { cache, rng, monitored, probe_at: Marker::StepEnd, hits: Vec::new(), probes: 0, open: false }
    }

    fn reset(&mut self, probe_at: Marker) {
        self.probe_at = probe_at;
        self.hits.clear();
        self.probes = 0;
        self.open = false;
    }
}

impl ExecutionObserver for Tracer {
    fn on_access(&mut self, event: &AccessEvent) {
        self.cache.touch(event);
    }

    fn on_marker(&mut self, marker: Marker) {
        if marker == Marker::StepBegin {
            for &l in &self.monitored {
                self.cache.evict_line(l);
            }
            self.open = true;
        } else if marker == self.probe_at && self.open {
            for &l in &self.monitored {
                let hit = self.cache.probe_line(l, &mut self.rng).is_hit();
                self.hits.push(hit);
            }
            self.probes += 1;
            self.open = false;
        }
    }
}

/// Probe samples of one kind of execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Segment {
    /// One sample per kernel step against the step's secret chunk.
    Steps,
    /// Target key byte swept, other key bytes random, plaintext fixed;
    /// probed after the first round.
    AesFirstRound,
    /// Key fixed, plaintext random; probed after the run against a
    /// ciphertext byte.
    AesLastRound,
}

impl Segment {
    fn name(self) -> &'static str {
        match self {
            Segment::Steps => "steps",
            Segment::AesFirstRound => "first_round",
            Segment::AesLastRound => "last_round",
        }
    }

    fn for_kernel(kernel: &KernelVariant) -> Vec<Segment> {
        match kernel.style {
            Style::Aes { .. } => vec![Segment::AesFirstRound, Segment::AesLastRound],
            _ => vec![Segment::Steps],
        }
    }
}

type JointCounts = HashMap<(i64, u64), u64>;

/// Per-key, per-location scores.
#[derive(Debug, Clone)]
struct LocKey {
    mi: f64,
    threshold: f64,
    segment_mi: Vec<f64>,
}

#[derive(Debug, Clone)]
struct KeyOutcome {
    offsets: BTreeMap<String, usize>,
    scores: Vec<LocKey>,
    /// Scores at each checkpoint.
    curve: Vec<Vec<LocKey>>,
}

struct Plan<'a> {
    base: &'a KernelVariant,
    locations: &'a [LocationDef],
    config: &'a ExperimentConfig,
    rule: ThresholdRule,
    /// Calibrated threshold; no per-key threshold goes below it.
    floor: f64,
    /// Samples per calibration round behind `floor`.
    floor_samples: usize,
    checkpoints: &'a [usize],
}

fn key_variant(base: &KernelVariant, config: &ExperimentConfig, key: usize) -> KernelVariant {
    let mut v = base.clone();
    for (r, o) in &config.fixed_offsets {
        v.offsets.insert(r.clone(), *o);
    }
    if config.randomize_base_offsets {
        let mut rng = substream(config.seed, &[tag::OFFSET, key as u64]);
        let line = config.cache.line_size;
        for (region, align) in base.offset_knobs() {
            if config.fixed_offsets.contains_key(&region) {
                continue;
            }
            let slots = (line / align.max(1)).max(1);
            v.offsets.insert(region, rng.gen_range(0..slots) * align);
        }
    }
    v
}

fn dense_x(hist: &BTreeMap<i64, u64>) -> (BTreeMap<i64, usize>, Vec<u64>) {
    let index = hist.keys().enumerate().map(|(i, &x)| (x, i)).collect();
    (index, hist.values().copied().collect())
}

fn sorted_entries(counts: &JointCounts) -> Vec<((i64, u64), u64)> {
    let mut v: Vec<_> = counts.iter().map(|(&k, &c)| (k, c)).collect();
    v.sort_unstable();
    v
}

fn location_mi(counts: &JointCounts, hist: &BTreeMap<i64, u64>, lines: usize, joint: bool) -> f64 {
    if hist.is_empty() {
        return 0.0;
    }
    let (xi, _) = dense_x(hist);
    let entries = sorted_entries(counts);
    if joint {
        let mut syms: Vec<u64> = entries.iter().map(|((_, s), _)| *s).collect();
        syms.sort_unstable();
        syms.dedup();
        let mut t = Contingency::new(xi.len(), syms.len());
        for ((x, s), c) in &entries {
            t.add_n(xi[x], syms.binary_search(s).expect("symbol indexed"), *c);
        }
        t.mutual_information().map(|r| r.mi_bits).unwrap_or(0.0)
    } else {
        let mut best = 0.0f64;
        for b in 0..lines {
            let mut t = Contingency::new(xi.len(), 2);
            for ((x, s), c) in &entries {
                t.add_n(xi[x], ((s >> b) & 1) as usize, *c);
            }
            best = best.max(t.mutual_information().map(|r| r.mi_bits).unwrap_or(0.0));
        }
        best
    }
}

/// Scores every location for one key from the accumulated counts.
fn evaluate(
    plan: &Plan<'_>,
    key: usize,
    stage: u64,
    accum: &[Vec<JointCounts>],
    hists: &[BTreeMap<i64, u64>],
    line_counts: &[usize],
) -> Vec<LocKey> {
    let eps = plan.config.epsilon();
    let mut thresholds: BTreeMap<(bool, usize), f64> = BTreeMap::new();
    plan.locations
        .iter()
        .enumerate()
        .map(|(li, loc)| {
            let lines = line_counts[li];
            let segment_mi: Vec<f64> =
                accum.iter().zip(hists).map(|(seg, hist)| location_mi(&seg[li], hist, lines, loc.joint)).collect();
            let threshold = *thresholds.entry((loc.joint, lines)).or_insert_with(|| {
                let model = if loc.joint { NullModel::Joint { lines } } else { NullModel::PerLineMax { lines } };
                let counts: Vec<Vec<u64>> = hists.iter().map(|h| h.values().copied().collect()).collect();
                let components: Vec<(&[u64], NullModel)> = counts.iter().map(|c| (c.as_slice(), model)).collect();
                let mut rng =
                    substream(plan.config.seed, &[tag::CALIBRATION, key as u64, stage, loc.joint as u64, lines as u64]);
                // Null MI shrinks as 1/n, so the floor follows keys that
                // carry more samples than a calibration round.
                let n = counts.iter().map(|c| c.iter().sum::<u64>()).min().unwrap_or(0) as f64;
                let floor =
                    if n > plan.floor_samples as f64 { plan.floor * plan.floor_samples as f64 / n } else { plan.floor };
                matched_threshold(&components, eps, plan.config.calibration_rounds, plan.rule, &mut rng).max(floor)
            });
            LocKey { mi: segment_mi.iter().copied().fold(0.0, f64::max), threshold, segment_mi }
        })
        .collect()
}

fn run_key(plan: &Plan<'_>, key: usize) -> Result<KeyOutcome, DetectorError> {
    let config = plan.config;
    let line_size = config.cache.line_size;
    let variant = key_variant(plan.base, config, key);
    let spec = variant.spec(line_size);
    let mut space = build_address_space(&spec, line_size)?;
    let layout = space.layout.clone();

    let loc_lines: Vec<Vec<u64>> =
        plan.locations.iter().map(|l| location_lines(&layout, l)).collect::<Result<_, _>>()?;
    let mut monitored: Vec<u64> = loc_lines.concat();
    monitored.sort_unstable();
    monitored.dedup();
    let loc_pos: Vec<Vec<usize>> = loc_lines
        .iter()
        .map(|ls| ls.iter().map(|l| monitored.binary_search(l).expect("monitored")).collect())
        .collect();
    let line_counts: Vec<usize> = loc_lines.iter().map(Vec::len).collect();
    let m = monitored.len();

    let cache = CacheState::new(&config.cache)?;
    let mut tracer = Tracer::new(cache, substream(config.seed, &[tag::NOISE, key as u64]), monitored);
    let mut secret_rng = substream(config.seed, &[tag::KEY_SECRET, key as u64]);
    let mut input_rng = substream(config.seed, &[tag::INPUT, key as u64]);

    let segments = Segment::for_kernel(&variant);
    let n_traces = config.traces_per_key.max(plan.checkpoints.last().copied().unwrap_or(0));
    let key_secret = match variant.secret_policy() {
        SecretPolicy::PerKey => Some(variant.random_secret(&mut secret_rng)),
        SecretPolicy::PerTrace => None,
    };
    let batch = match (&key_secret, segments[0]) {
        (None, Segment::Steps) => variant.secret_batch(n_traces, &mut secret_rng),
        _ => Vec::new(),
    };
    // AES: byte `j` is the target; first-round plaintext and last-round key
    // stay fixed for the key index.
    let j = key % 16;
    let mut fixed_pt = [0u8; 16];
    let mut fixed_key = [0u8; 16];
    if matches!(variant.style, Style::Aes { .. }) {
        input_rng.fill_bytes(&mut fixed_pt);
        secret_rng.fill_bytes(&mut fixed_key);
    }

    let mut accum: Vec<Vec<JointCounts>> = vec![vec![JointCounts::new(); plan.locations.len()]; segments.len()];
    let mut hists: Vec<BTreeMap<i64, u64>> = vec![BTreeMap::new(); segments.len()];
    let mut curve = Vec::new();
    let mut next_checkpoint = 0;

    #[allow(clippy::needless_range_loop)]
    for t in 0..n_traces {
        for (si, &seg) in segments.iter().enumerate() {
            let (secret, input, probe_at) = match seg {
                Segment::Steps => {
                    let secret = match &key_secret {
                        Some(s) => s.clone(),
                        None => batch[t].clone(),
                    };
                    (secret, variant.sample_input(&mut input_rng), Marker::StepEnd)
                }
                Segment::AesFirstRound => {
                    let mut k = vec![0u8; 16];
                    secret_rng.fill_bytes(&mut k);
                    k[j] = (t % 256) as u8;
                    (k, fixed_pt.to_vec(), Marker::RoundEnd(1))
                }
                Segment::AesLastRound => {
                    let mut pt = vec![0u8; 16];
                    input_rng.fill_bytes(&mut pt);
                    (fixed_key.to_vec(), pt, Marker::StepEnd)
                }
            };
            tracer.reset(probe_at);
            let output = run_kernel(&variant, &mut space, &secret, &input, &mut [&mut tracer])?;
            let xs: Vec<i64> = match seg {
                Segment::Steps => variant.chunks(&secret)?.values(),
                Segment::AesFirstRound => vec![secret[j] as i64],
                Segment::AesLastRound => vec![output[j] as i64],
            };
            if tracer.probes != xs.len() {
                return Err(DetectorError::StepMismatch { probes: tracer.probes, chunks: xs.len() });
            }
            for (s, &x) in xs.iter().enumerate() {
                let hits = &tracer.hits[s * m..(s + 1) * m];
                for (li, pos) in loc_pos.iter().enumerate() {
                    let sym = pos.iter().enumerate().fold(0u64, |acc, (b, &p)| acc | ((hits[p] as u64) << b));
                    *accum[si][li].entry((x, sym)).or_insert(0) += 1;
                }
                *hists[si].entry(x).or_insert(0) += 1;
            }
        }
        while next_checkpoint < plan.checkpoints.len() && plan.checkpoints[next_checkpoint] == t + 1 {
            curve.push(evaluate(plan, key, 1 + next_checkpoint as u64, &accum, &hists, &line_counts));
            next_checkpoint += 1;
        }
    }

    let scores = if plan.checkpoints.last() == Some(&n_traces) && !curve.is_empty() {
        curve.last().cloned().expect("nonempty")
    } else {
        evaluate(plan, key, 0, &accum, &hists, &line_counts)
    };
    Ok(KeyOutcome { offsets: variant.offsets.clone(), scores, curve })
}

fn run_keys(plan: &Plan<'_>) -> Result<Vec<KeyOutcome>, DetectorError> {
    let n = plan.config.n_keys;
    let work = || (0..n).into_par_iter().map(|k| run_key(plan, k)).collect::<Result<Vec<_>, _>>();
    if plan.config.jobs == 0 {
        work()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(plan.config.jobs)
            .build()
            .map_err(|e| DetectorError::InvalidConfig(e.to_string()))?;
        pool.install(work)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn check_request(
    kernel: &KernelVariant,
    config: &ExperimentConfig,
    threshold: &Threshold,
) -> Result<(), DetectorError> {
    config.validate()?;
    let expected = kernel.schedule();
    if let Some(requested) = config.schedule {
        if requested != expected {
            return Err(DetectorError::ScheduleMismatch { kernel: kernel.name.clone(), expected, requested });
        }
    }
    if (threshold.params.epsilon - config.epsilon()).abs() > 1e-12 {
        return Err(DetectorError::EpsilonMismatch { threshold: threshold.params.epsilon, config: config.epsilon() });
    }
    let spec = kernel.spec(config.cache.line_size);
    for region in config.fixed_offsets.keys() {
        if !spec.regions.iter().any(|r| &r.name == region) {
            return Err(DetectorError::InvalidConfig(format!("offset for unknown region `{region}`")));
        }
    }
    Ok(())
}

/// Digest of everything that determines a report (worker count excluded).
pub fn config_digest(kernel: &KernelVariant, config: &ExperimentConfig) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(kernel).expect("kernel serializes"));
    h.update(serde_json::to_vec(config).expect("config serializes"));
    hex::encode(h.finalize())
}

/// Runs the taint pass with the configured samples.
pub fn suspects(kernel: &KernelVariant, config: &ExperimentConfig) -> Result<Vec<SuspectLocation>, DetectorError> {
    let (secrets, inputs) = default_taint_samples(kernel, config.taint_random_secrets, config.seed);
    Ok(list_secret_tainted_memory(kernel, &secrets, &inputs, config.cache.line_size)?)
}

fn assemble(
    kernel: &KernelVariant,
    config: &ExperimentConfig,
    threshold: &Threshold,
    locations: &[LocationDef],
    outcomes: &[KeyOutcome],
) -> LeakReport {
    let segments = Segment::for_kernel(kernel);
    let reports: Vec<LocationReport> = locations
        .iter()
        .enumerate()
        .map(|(li, loc)| {
            let per_key_mi: Vec<f64> = outcomes.iter().map(|o| o.scores[li].mi).collect();
            let per_key_threshold: Vec<f64> = outcomes.iter().map(|o| o.scores[li].threshold).collect();
            let avg_mi = mean(&per_key_mi);
            let loc_threshold = mean(&per_key_threshold);
            let segs = segments
                .iter()
                .enumerate()
                .map(|(si, s)| {
                    let per_key: Vec<f64> = outcomes.iter().map(|o| o.scores[li].segment_mi[si]).collect();
                    SegmentReport { name: s.name().into(), avg_mi: mean(&per_key), per_key_mi: per_key }
                })
                .collect();
            LocationReport {
                name: loc.name.clone(),
                target: loc.targets[0].clone(),
                reason: loc.reasons.first().copied(),
                reasons: loc.reasons.clone(),
                per_key_mi,
                per_key_threshold,
                avg_mi,
                threshold: loc_threshold,
                verdict: if avg_mi > loc_threshold { Verdict::Leaks } else { Verdict::NoLeak },
                segments: segs,
            }
        })
        .collect();
    let verdict = if reports.iter().any(|l| l.verdict == Verdict::Leaks) { Verdict::Leaks } else { Verdict::NoLeak };
    LeakReport {
        kernel: kernel.name.clone(),
        config_digest: config_digest(kernel, config),
        threshold: threshold.value,
        no_suspects: locations.is_empty(),
        verdict,
        locations: reports,
        offsets: outcomes.iter().map(|o| o.offsets.clone()).collect(),
    }
}

/// Taint, trace, score and decide. Each suspect target becomes one location
/// scored per line; a location leaks when its MI averaged over keys exceeds
/// the average of the per-key thresholds.
pub fn does_it_leak(
    kernel: &KernelVariant,
    config: &ExperimentConfig,
    threshold: &Threshold,
) -> Result<LeakReport, DetectorError> {
    check_request(kernel, config, threshold)?;
    let locations = group_suspects(&suspects(kernel, config)?);
    if locations.is_empty() {
        return Ok(assemble(kernel, config, threshold, &[], &[]));
    }
    let plan = Plan {
        base: kernel,
        locations: &locations,
        config,
        rule: threshold.params.rule,
        floor: threshold.value,
        floor_samples: threshold.params.samples_per_round,
        checkpoints: &[],
    };
    let outcomes = run_keys(&plan)?;
    Ok(assemble(kernel, config, threshold, &locations, &outcomes))
}

/// Scores named groups of regions and sites, each group's hit pattern taken
/// jointly as one symbol.
pub fn group_mi(
    kernel: &KernelVariant,
    config: &ExperimentConfig,
    threshold: &Threshold,
    groups: &[(&str, &[&str])],
) -> Result<Vec<LocationReport>, DetectorError> {
    check_request(kernel, config, threshold)?;
    let line_size = config.cache.line_size;
    let locations: Vec<LocationDef> = groups
        .iter()
        .map(|(name, members)| {
            let targets =
                members.iter().map(|m| resolve_target(kernel, line_size, m)).collect::<Result<Vec<_>, _>>()?;
            Ok(LocationDef { name: name.to_string(), targets, reasons: Vec::new(), joint: true })
        })
        .collect::<Result<_, DetectorError>>()?;
    let plan = Plan {
        base: kernel,
        locations: &locations,
        config,
        rule: threshold.params.rule,
        floor: threshold.value,
        floor_samples: threshold.params.samples_per_round,
        checkpoints: &[],
    };
    let outcomes = run_keys(&plan)?;
    Ok(assemble(kernel, config, threshold, &locations, &outcomes).locations)
}

/// MI and threshold per location after each checkpoint (executions per
/// key), all taken from one growing trace set.
pub fn mi_vs_samples_report(
    kernel: &KernelVariant,
    config: &ExperimentConfig,
    threshold: &Threshold,
    checkpoints: &[usize],
) -> Result<Vec<CurvePoint>, DetectorError> {
    if checkpoints.is_empty() || checkpoints[0] == 0 || checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DetectorError::InvalidConfig("checkpoints must be positive and strictly ascending".into()));
    }
    check_request(kernel, config, threshold)?;
    let locations = group_suspects(&suspects(kernel, config)?);
    let config = ExperimentConfig { traces_per_key: *checkpoints.last().expect("nonempty"), ..config.clone() };
    let plan = Plan {
        base: kernel,
        locations: &locations,
        config: &config,
        rule: threshold.params.rule,
        floor: threshold.value,
        floor_samples: threshold.params.samples_per_round,
        checkpoints,
    };
    let outcomes = run_keys(&plan)?;
    let mut out = Vec::new();
    for (ci, &samples) in checkpoints.iter().enumerate() {
        for (li, loc) in locations.iter().enumerate() {
            let mis: Vec<f64> = outcomes.iter().map(|o| o.curve[ci][li].mi).collect();
            let ths: Vec<f64> = outcomes.iter().map(|o| o.curve[ci][li].threshold).collect();
            out.push(CurvePoint { samples, location: loc.name.clone(), mi: mean(&mis), threshold: mean(&ths) });
        }
    }
    Ok(out)
}

/// One row per key and location.
pub fn per_key_report(report: &LeakReport) -> Vec<PerKeyRow> {
    let mut rows = Vec::new();
    for loc in &report.locations {
        for (k, (&mi, &threshold)) in loc.per_key_mi.iter().zip(&loc.per_key_threshold).enumerate() {
            let offset = report
                .offsets
                .get(k)
                .map(|o| o.iter().map(|(r, b)| format!("{r}={b}")).collect::<Vec<_>>().join(";"))
                .unwrap_or_default();
            rows.push(PerKeyRow { key_index: k, location: loc.name.clone(), mi, threshold, offset });
        }
    }
    rows
}

/// Probe outcomes of a single execution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepTrace {
    /// Secret chunk per probe point.
    pub chunks: Vec<i64>,
    /// Global lines of each requested target, ascending.
    pub lines: Vec<Vec<u64>>,
    /// Per probe point and target: bit `b` set when line `b` hit.
    pub hits: Vec<Vec<u64>>,
    pub output: Vec<u8>,
}

/// Runs `kernel` once on a fresh cache, evicting and probing the lines of
/// `targets` (region names or site labels) at every step.
pub fn probe_steps(
    kernel: &KernelVariant,
    cache: &CacheConfig,
    secret: &[u8],
    input: &[u8],
    targets: &[&str],
    rng: &mut StreamRng,
) -> Result<StepTrace, DetectorError> {
    let line_size = cache.line_size;
    let spec = kernel.spec(line_size);
    let mut space = build_address_space(&spec, line_size)?;
    let layout = space.layout.clone();
    let lines: Vec<Vec<u64>> = targets
        .iter()
        .map(|t| {
            let target = resolve_target(kernel, line_size, t)?;
            let mut l = target_lines(&layout, &target)?;
            l.sort_unstable();
            l.dedup();
            if l.len() > 64 {
                return Err(DetectorError::TooManyLines { target: t.to_string(), lines: l.len() });
            }
            Ok(l)
        })
        .collect::<Result<_, DetectorError>>()?;
    let mut monitored: Vec<u64> = lines.concat();
    monitored.sort_unstable();
    monitored.dedup();
    let m = monitored.len();
    let pos: Vec<Vec<usize>> =
        lines.iter().map(|ls| ls.iter().map(|l| monitored.binary_search(l).expect("monitored")).collect()).collect();
    let noise = substream(rng.next_u64(), &[]);
    let mut tracer = Tracer::new(CacheState::new(cache)?, noise, monitored);
    let output = run_kernel(kernel, &mut space, secret, input, &mut [&mut tracer])?;
    let chunks = kernel.chunks(secret)?.values();
    if tracer.probes != chunks.len() {
        return Err(DetectorError::StepMismatch { probes: tracer.probes, chunks: chunks.len() });
    }
    let hits = (0..tracer.probes)
        .map(|s| {
            let h = &tracer.hits[s * m..(s + 1) * m];
            pos.iter().map(|p| p.iter().enumerate().fold(0u64, |acc, (b, &i)| acc | ((h[i] as u64) << b))).collect()
        })
        .collect();
    Ok(StepTrace { chunks, lines, hits, output })
}

/// Per-invocation (gender, B1 probe, B2 probe) for the greeting kernel.
pub fn hello_trace(kernel: &KernelVariant, config: &ExperimentConfig) -> Result<Vec<HelloRow>, DetectorError> {
    if !matches!(kernel.style, Style::Hello { .. }) {
        return Err(DetectorError::InvalidConfig(format!("`{}` is not the greeting kernel", kernel.name)));
    }
    let mut secret_rng = substream(config.seed, &[tag::KEY_SECRET, 0]);
    let mut noise = substream(config.seed, &[tag::NOISE, 0]);
    let secrets = kernel.secret_batch(config.traces_per_key, &mut secret_rng);
    let b1 = crate::kernels::hello::B1;
    let b2 = crate::kernels::hello::B2;
    secrets
        .iter()
        .map(|s| {
            let tr = probe_steps(kernel, &config.cache, s, &[], &[b1, b2], &mut noise)?;
            Ok(HelloRow { gender: s[0], b1_hit: tr.hits[0][0] & 1 == 1, b2_hit: tr.hits[0][1] & 1 == 1 })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_parses() {
        assert_eq!("per-window".parse::<ProbeSchedule>().unwrap(), ProbeSchedule::PerWindow);
        assert_eq!(ProbeSchedule::WholeRun.to_string(), "whole_run");
        assert!("sometimes".parse::<ProbeSchedule>().is_err());
    }

    #[test]
    fn suspects_group_by_target() {
        let t = Target::Site { label: "x".into() };
        let s = |reason| SuspectLocation { target: t.clone(), reason, witness_digest: String::new() };
        let g = group_suspects(&[s(Reason::TaintedBranch), s(Reason::TaintedBranch), s(Reason::TaintedIndexRead)]);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].reasons, vec![Reason::TaintedBranch, Reason::TaintedIndexRead]);
        assert_eq!(g[0].name, "@x");
    }
}
