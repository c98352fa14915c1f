//! Dynamic taint tracking over the execution harness.
//!
//! Taint is tracked per byte in the address space shadow and per value in
//! kernels via [`Tv`]. Propagation is direct data flow only: copies,
//! arithmetic, logic, loads and stores take the union of their input taints.
//! A branch on tainted data flags the branch and the sites it decides, but
//! does not taint data assigned under it.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::exec::{
    build_address_space, run_kernel, AccessEvent, AccessKind, BranchEvent, ExecError, ExecutionObserver, Layout,
    RegionId, SiteId,
};
use crate::kernels::KernelVariant;
use crate::rng::{substream, tag};

/// Set of taint labels, as a bitmask over the labels interned by an
/// address space.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct Taint(u64);

impl Taint {
    pub const NONE: Taint = Taint(0);
    pub const ALL: Taint = Taint(u64::MAX);
    pub const MAX_LABELS: usize = 64;

    pub fn bit(i: usize) -> Taint {
        Taint(1 << i)
    }

    #[inline]
    pub fn union(self, other: Taint) -> Taint {
        Taint(self.0 | other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_tainted(self) -> bool {
        self.0 != 0
    }

    pub fn contains(self, other: Taint) -> bool {
        self.0 & other.0 == other.0
    }
}

impl fmt::Debug for Taint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Taint({:#x})", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaintLabel(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Copy,
    Arith,
    Logic,
    /// Inputs: index taint, then loaded-cell taint.
    Load,
    Store,
}

/// Result taint of an operation. Every rule is the union of the inputs.
pub fn propagate(_op: OpKind, inputs: &[Taint]) -> Taint {
    inputs.iter().fold(Taint::NONE, |acc, t| acc.union(*t))
}

/// A value paired with its taint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tv<T> {
    pub v: T,
    pub t: Taint,
}

impl<T> Tv<T> {
    pub fn new(v: T, t: Taint) -> Self {
        Tv { v, t }
    }

    pub fn public(v: T) -> Self {
        Tv { v, t: Taint::NONE }
    }

    /// Applies `f` to the value; the result keeps the taint.
    pub fn map<U>(self, f: impl FnOnce(T) -> U) -> Tv<U> {
        Tv { v: f(self.v), t: self.t }
    }

    pub fn zip<U, R>(self, other: Tv<U>, f: impl FnOnce(T, U) -> R) -> Tv<R> {
        Tv { v: f(self.v, other.v), t: self.t.union(other.t) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Region { name: String, start: usize, end: usize },
    Site { label: String },
}

impl Target {
    pub fn name(&self) -> &str {
        match self {
            Target::Region { name, .. } => name,
            Target::Site { label } => label,
        }
    }

    pub fn is_site(&self) -> bool {
        matches!(self, Target::Site { .. })
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Region { name, .. } => write!(f, "{name}"),
            Target::Site { label } => write!(f, "@{label}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    TaintedBranch,
    TaintedIndexRead,
    TaintedIndexWrite,
    /// A secret-derived value was written to this region.
    TaintedValueStore,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuspectLocation {
    pub target: Target,
    pub reason: Reason,
    /// Digest of the first (secret, input) pair that triggered the location.
    pub witness_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuspectList {
    pub kernel: String,
    pub locations: Vec<SuspectLocation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum RawTarget {
    Region(RegionId),
    Site(SiteId),
}

/// Observer collecting tainted branches and secret-indexed accesses.
#[derive(Debug, Default)]
pub struct TaintCollector {
    seen: HashSet<(RawTarget, Reason)>,
    found: Vec<(RawTarget, Reason)>,
    secret_region: Option<RegionId>,
}

impl TaintCollector {
    pub fn new(secret_region: RegionId) -> Self {
        TaintCollector { secret_region: Some(secret_region), ..Default::default() }
    }

    fn add(&mut self, target: RawTarget, reason: Reason) {
        if self.seen.insert((target, reason)) {
            self.found.push((target, reason));
        }
    }

    fn resolve(&self, layout: &Layout) -> Vec<(Target, Reason)> {
        self.found
            .iter()
            .map(|(raw, reason)| {
                let target = match *raw {
                    RawTarget::Region(id) => {
                        let r = layout.region(id);
                        Target::Region { name: r.name.clone(), start: 0, end: r.size }
                    }
                    RawTarget::Site(id) => Target::Site { label: layout.site(id).label.clone() },
                };
                (target, *reason)
            })
            .collect()
    }
}

impl ExecutionObserver for TaintCollector {
    fn on_access(&mut self, e: &AccessEvent) {
        let region = RawTarget::Region(e.address.region);
        match e.kind {
            AccessKind::Read if e.index_taint.is_tainted() => self.add(region, Reason::TaintedIndexRead),
            AccessKind::Write if e.index_taint.is_tainted() => self.add(region, Reason::TaintedIndexWrite),
            AccessKind::Write if e.value_taint.is_tainted() && Some(e.address.region) != self.secret_region => {
                self.add(region, Reason::TaintedValueStore)
            }
            _ => {}
        }
    }

    fn on_branch(&mut self, e: &BranchEvent<'_>) {
        if e.condition.is_tainted() {
            self.add(RawTarget::Site(e.site), Reason::TaintedBranch);
            for arm in e.arms {
                self.add(RawTarget::Site(*arm), Reason::TaintedBranch);
            }
        }
    }
}

pub const SECRET_LABEL: &str = "key";

fn witness_digest(secret: &[u8], input: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update((secret.len() as u64).to_le_bytes());
    h.update(secret);
    h.update(input);
    hex::encode(&h.finalize()[..8])
}

/// Runs `kernel` on every (secret, input) pair with the secret region
/// tainted, and returns the union of suspect locations in discovery order.
pub fn list_secret_tainted_memory(
    kernel: &KernelVariant,
    sample_secrets: &[Vec<u8>],
    sample_inputs: &[Vec<u8>],
    line_size: usize,
) -> Result<Vec<SuspectLocation>, ExecError> {
    let spec = kernel.spec(line_size);
    let mut out: Vec<SuspectLocation> = Vec::new();
    let mut seen: BTreeSet<(Target, Reason)> = BTreeSet::new();
    let empty_input = [Vec::new()];
    let inputs = if sample_inputs.is_empty() { &empty_input[..] } else { sample_inputs };
    for secret in sample_secrets {
        for input in inputs {
            let mut space = build_address_space(&spec, line_size)?;
            let secret_region = space.secret_region();
            let size = space.layout.region(secret_region).size;
            space.set_taint(secret_region, 0..size, SECRET_LABEL)?;
            let mut collector = TaintCollector::new(secret_region);
            run_kernel(kernel, &mut space, secret, input, &mut [&mut collector])?;
            for (target, reason) in collector.resolve(&space.layout) {
                if seen.insert((target.clone(), reason)) {
                    out.push(SuspectLocation { target, reason, witness_digest: witness_digest(secret, input) });
                }
            }
        }
    }
    Ok(out)
}

/// Default sampling: `n_random` random secrets plus the kernel's degenerate
/// secrets (all-zero and all-one bytes unless the kernel overrides them).
pub fn default_taint_samples(kernel: &KernelVariant, n_random: usize, seed: u64) -> (Vec<Vec<u8>>, Vec<Vec<u8>>) {
    let mut rng = substream(seed, &[tag::TAINT]);
    let mut secrets: Vec<Vec<u8>> = (0..n_random).map(|_| kernel.random_secret(&mut rng)).collect();
    secrets.extend(kernel.degenerate_secrets());
    let mut input_rng = substream(seed, &[tag::INPUT]);
    let inputs = vec![kernel.sample_input(&mut input_rng as &mut dyn RngCore)];
    (secrets, inputs)
}

/// Union of targets, collapsing reasons.
pub fn distinct_targets(locations: &[SuspectLocation]) -> Vec<Target> {
    let mut seen = HashSet::new();
    locations.iter().filter(|l| seen.insert(l.target.clone())).map(|l| l.target.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn propagation_is_union() {
        let a = Taint::bit(0);
        let b = Taint::bit(1);
        assert_eq!(propagate(OpKind::Copy, &[a]), a);
        assert_eq!(propagate(OpKind::Logic, &[a, Taint::NONE]), a);
        assert_eq!(propagate(OpKind::Load, &[a, b]), a.union(b));
        assert_eq!(propagate(OpKind::Arith, &[]), Taint::NONE);
    }

    #[test]
    fn tv_combinators_keep_taint() {
        let k = Tv::new(7u8, Taint::bit(2));
        let p = Tv::public(3u8);
        let x = k.zip(p, |a, b| a ^ b);
        assert_eq!(x.v, 4);
        assert_eq!(x.t, Taint::bit(2));
        assert_eq!(p.map(|v| v + 1).t, Taint::NONE);
    }
}
