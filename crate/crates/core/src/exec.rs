//! Instrumented execution harness.
//!
//! An [`AddressSpace`] is a set of named data and code regions laid out at
//! deterministic global addresses. Kernels touch memory only through an
//! [`Exec`] context, which bounds-checks every access, propagates byte-level
//! taint, and forwards each event in program order to the attached
//! [`ExecutionObserver`]s.

use std::collections::{BTreeMap, HashSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::LineId;
use crate::kernels::KernelVariant;
use crate::taint::Taint;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("duplicate region name `{0}`")]
    DuplicateRegion(String),
    #[error("region `{0}` has size 0")]
    EmptyRegion(String),
    #[error("region `{region}`: base offset {offset} not below line size {line_size}")]
    BadBaseOffset { region: String, offset: usize, line_size: usize },
    #[error("line size {0} is not a power of two")]
    BadLineSize(usize),
    #[error("region `{0}` may only follow the region declared immediately before it")]
    InvalidFollows(String),
    #[error("unknown region `{0}`")]
    UnknownRegion(String),
    #[error("unknown site `{0}`")]
    UnknownSite(String),
    #[error("duplicate site label `{0}`")]
    DuplicateSite(String),
    #[error("site `{0}` must live in a code region")]
    SiteNotInCode(String),
    #[error("site `{0}` lies outside its region or is empty")]
    SiteOutOfBounds(String),
    #[error("sites `{0}` and `{1}` overlap")]
    OverlappingSites(String, String),
    #[error("secret region `{0}` missing, not a data region, or of the wrong size")]
    BadSecretRegion(String),
    #[error("out-of-bounds access to `{region}` at offset {offset} size {size}")]
    OutOfBounds { region: String, offset: usize, size: usize },
    #[error("{kind:?} access not allowed on region `{region}`")]
    WrongRegionKind { region: String, kind: AccessKind },
    #[error("secret is {got} bytes, kernel expects {expected}")]
    SecretLength { expected: usize, got: usize },
    #[error("invalid public input: {0}")]
    BadInput(String),
    #[error("invalid secret: {0}")]
    BadSecret(String),
    #[error("kernel parameter error: {0}")]
    BadParameter(String),
    #[error("too many taint labels")]
    TooManyLabels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RegionId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Data,
    Code,
}

/// Region declaration as it appears in a [`KernelSpec`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionDecl {
    pub name: String,
    pub kind: RegionKind,
    pub size: usize,
    /// Placement of the region start inside its first cache line.
    #[serde(default)]
    pub base_offset: usize,
    /// Place this region contiguously after the named region instead of at a
    /// fresh line. The effective base offset is then derived.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub follows: Option<String>,
}

impl RegionDecl {
    pub fn data(name: &str, size: usize) -> Self {
        RegionDecl { name: name.into(), kind: RegionKind::Data, size, base_offset: 0, follows: None }
    }

    pub fn code(name: &str, size: usize) -> Self {
        RegionDecl { name: name.into(), kind: RegionKind::Code, size, base_offset: 0, follows: None }
    }

    pub fn at_offset(mut self, base_offset: usize) -> Self {
        self.base_offset = base_offset;
        self
    }

    pub fn following(mut self, region: &str) -> Self {
        self.follows = Some(region.into());
        self
    }
}

/// A labeled routine or branch arm occupying a byte range of a code region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteDecl {
    pub label: String,
    pub region: String,
    pub offset: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretShape {
    pub bytes: usize,
    /// Name of the chunking scheme the analyzer applies to this secret.
    pub chunking: String,
}

/// Declarative description of a kernel's memory footprint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub name: String,
    pub regions: Vec<RegionDecl>,
    pub sites: Vec<SiteDecl>,
    pub parameters: BTreeMap<String, i64>,
    pub secret_shape: SecretShape,
    /// Data region holding the secret; taint analysis labels its bytes.
    pub secret_region: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub id: RegionId,
    pub name: String,
    pub kind: RegionKind,
    pub size: usize,
    pub base_offset: usize,
    /// Global byte address of the region start.
    pub global_base: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Site {
    pub id: SiteId,
    pub label: String,
    pub region: RegionId,
    pub offset: usize,
    pub size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Address {
    pub region: RegionId,
    pub offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    Read,
    Write,
    Fetch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessEvent {
    pub kind: AccessKind,
    pub address: Address,
    pub size: usize,
    /// Global byte address of the first byte.
    pub global: u64,
    /// Taint of the value used to compute the address.
    pub index_taint: Taint,
    /// Taint of the value read or written.
    pub value_taint: Taint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchEvent<'a> {
    pub site: SiteId,
    pub condition: Taint,
    /// Code sites whose execution is decided by this branch.
    pub arms: &'a [SiteId],
}

/// Program points kernels announce so probe schedules can wrap them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Marker {
    StepBegin,
    StepEnd,
    RoundEnd(u8),
}

pub trait ExecutionObserver {
    fn on_access(&mut self, _event: &AccessEvent) {}
    fn on_branch(&mut self, _event: &BranchEvent<'_>) {}
    fn on_marker(&mut self, _marker: Marker) {}
}

/// Immutable placement of regions and sites.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub line_size: usize,
    pub regions: Vec<Region>,
    pub sites: Vec<Site>,
}

impl Layout {
    pub fn region_id(&self, name: &str) -> Option<RegionId> {
        self.regions.iter().find(|r| r.name == name).map(|r| r.id)
    }

    pub fn site_id(&self, label: &str) -> Option<SiteId> {
        self.sites.iter().find(|s| s.label == label).map(|s| s.id)
    }

    pub fn region(&self, id: RegionId) -> &Region {
        &self.regions[id.0 as usize]
    }

    pub fn site(&self, id: SiteId) -> &Site {
        &self.sites[id.0 as usize]
    }

    pub fn global_address(&self, addr: Address) -> u64 {
        self.region(addr.region).global_base + addr.offset as u64
    }

    pub fn line_of(&self, addr: Address) -> LineId {
        let r = self.region(addr.region);
        LineId { region: addr.region, line_index: (r.base_offset + addr.offset) / self.line_size }
    }

    /// All lines touched by an access of `size` bytes at `addr`.
    pub fn lines_covered(&self, addr: Address, size: usize) -> Vec<LineId> {
        let first = self.line_of(addr).line_index;
        let last = self.line_of(Address { region: addr.region, offset: addr.offset + size.max(1) - 1 }).line_index;
        (first..=last).map(|line_index| LineId { region: addr.region, line_index }).collect()
    }

    pub fn line_count(&self, region: RegionId) -> usize {
        let r = self.region(region);
        (r.base_offset + r.size).div_ceil(self.line_size)
    }

    pub fn region_lines(&self, region: RegionId) -> Vec<LineId> {
        (0..self.line_count(region)).map(|line_index| LineId { region, line_index }).collect()
    }

    pub fn range_lines(&self, region: RegionId, range: Range<usize>) -> Vec<LineId> {
        if range.is_empty() {
            return Vec::new();
        }
        self.lines_covered(Address { region, offset: range.start }, range.len())
    }

    pub fn site_lines(&self, site: SiteId) -> Vec<LineId> {
        let s = self.site(site);
        self.lines_covered(Address { region: s.region, offset: s.offset }, s.size)
    }

    /// Global cache-line number. Lines of adjacent regions may coincide.
    pub fn global_line(&self, line: LineId) -> u64 {
        let r = self.region(line.region);
        (r.global_base - r.base_offset as u64) / self.line_size as u64 + line.line_index as u64
    }

    /// Every line of a region gets touched if and only if the region's global
    /// lines are touched, so line-touch sets are compared in this space.
    pub fn global_lines_of_region(&self, region: RegionId) -> Vec<u64> {
        self.region_lines(region).into_iter().map(|l| self.global_line(l)).collect()
    }
}

/// Regions, sites, and the per-byte taint shadow of one execution.
#[derive(Debug, Clone)]
pub struct AddressSpace {
    pub layout: Layout,
    shadow: Vec<Vec<Taint>>,
    labels: Vec<String>,
    secret_region: RegionId,
}

pub fn build_address_space(spec: &KernelSpec, line_size: usize) -> Result<AddressSpace, ExecError> {
    if line_size == 0 || !line_size.is_power_of_two() {
        return Err(ExecError::BadLineSize(line_size));
    }
    let mut regions: Vec<Region> = Vec::with_capacity(spec.regions.len());
    let mut names = HashSet::new();
    let mut next_free: u64 = 0;
    for (i, decl) in spec.regions.iter().enumerate() {
        if !names.insert(decl.name.clone()) {
            return Err(ExecError::DuplicateRegion(decl.name.clone()));
        }
        if decl.size == 0 {
            return Err(ExecError::EmptyRegion(decl.name.clone()));
        }
        let global_base = match &decl.follows {
            Some(prev) => {
                let last = regions.last().filter(|r| &r.name == prev);
                let last = last.ok_or_else(|| ExecError::InvalidFollows(decl.name.clone()))?;
                last.global_base + last.size as u64
            }
            None => {
                if decl.base_offset >= line_size {
                    return Err(ExecError::BadBaseOffset {
                        region: decl.name.clone(),
                        offset: decl.base_offset,
                        line_size,
                    });
                }
                next_free * line_size as u64 + decl.base_offset as u64
            }
        };
        let end = global_base + decl.size as u64;
        next_free = next_free.max(end.div_ceil(line_size as u64));
        regions.push(Region {
            id: RegionId(i as u32),
            name: decl.name.clone(),
            kind: decl.kind,
            size: decl.size,
            base_offset: (global_base % line_size as u64) as usize,
            global_base,
        });
    }

    let mut sites: Vec<Site> = Vec::with_capacity(spec.sites.len());
    for (i, decl) in spec.sites.iter().enumerate() {
        let region = regions
            .iter()
            .find(|r| r.name == decl.region)
            .ok_or_else(|| ExecError::UnknownRegion(decl.region.clone()))?;
        if region.kind != RegionKind::Code {
            return Err(ExecError::SiteNotInCode(decl.label.clone()));
        }
        if decl.size == 0 || decl.offset + decl.size > region.size {
            return Err(ExecError::SiteOutOfBounds(decl.label.clone()));
        }
        for other in &sites {
            if other.label == decl.label {
                return Err(ExecError::DuplicateSite(decl.label.clone()));
            }
            if other.region == region.id
                && decl.offset < other.offset + other.size
                && other.offset < decl.offset + decl.size
            {
                return Err(ExecError::OverlappingSites(other.label.clone(), decl.label.clone()));
            }
        }
        sites.push(Site {
            id: SiteId(i as u32),
            label: decl.label.clone(),
            region: region.id,
            offset: decl.offset,
            size: decl.size,
        });
    }

    let secret = regions
        .iter()
        .find(|r| r.name == spec.secret_region)
        .filter(|r| r.kind == RegionKind::Data && r.size == spec.secret_shape.bytes)
        .ok_or_else(|| ExecError::BadSecretRegion(spec.secret_region.clone()))?;
    let secret_region = secret.id;

    Ok(AddressSpace {
        shadow: vec![Vec::new(); regions.len()],
        layout: Layout { line_size, regions, sites },
        labels: Vec::new(),
        secret_region,
    })
}

impl AddressSpace {
    pub fn secret_region(&self) -> RegionId {
        self.secret_region
    }

    pub fn label_bit(&mut self, label: &str) -> Result<Taint, ExecError> {
        if let Some(i) = self.labels.iter().position(|l| l == label) {
            return Ok(Taint::bit(i));
        }
        if self.labels.len() >= Taint::MAX_LABELS {
            return Err(ExecError::TooManyLabels);
        }
        self.labels.push(label.to_string());
        Ok(Taint::bit(self.labels.len() - 1))
    }

    /// Names of the labels carried by `taint`.
    pub fn label_names(&self, taint: Taint) -> Vec<String> {
        self.labels.iter().enumerate().filter(|(i, _)| taint.contains(Taint::bit(*i))).map(|(_, l)| l.clone()).collect()
    }

    /// Marks bytes `range` of `region` with `label`. An empty range is a no-op.
    pub fn set_taint(&mut self, region: RegionId, range: Range<usize>, label: &str) -> Result<(), ExecError> {
        let r = self.layout.region(region);
        if range.end > r.size || range.start > range.end {
            return Err(ExecError::OutOfBounds { region: r.name.clone(), offset: range.start, size: range.len() });
        }
        if range.is_empty() {
            return Ok(());
        }
        let size = r.size;
        let bit = self.label_bit(label)?;
        let shadow = &mut self.shadow[region.0 as usize];
        if shadow.is_empty() {
            shadow.resize(size, Taint::NONE);
        }
        for cell in &mut shadow[range] {
            *cell = cell.union(bit);
        }
        Ok(())
    }

    pub fn taint_of(&self, region: RegionId, range: Range<usize>) -> Taint {
        let shadow = &self.shadow[region.0 as usize];
        if shadow.is_empty() {
            return Taint::NONE;
        }
        shadow[range].iter().fold(Taint::NONE, |acc, t| acc.union(*t))
    }

    fn check(&self, region: RegionId, offset: usize, size: usize, kind: AccessKind) -> Result<(), ExecError> {
        let r = self
            .layout
            .regions
            .get(region.0 as usize)
            .ok_or_else(|| ExecError::UnknownRegion(format!("#{}", region.0)))?;
        if size == 0 || offset.checked_add(size).is_none_or(|end| end > r.size) {
            return Err(ExecError::OutOfBounds { region: r.name.clone(), offset, size });
        }
        let code = r.kind == RegionKind::Code;
        if code != (kind == AccessKind::Fetch) {
            return Err(ExecError::WrongRegionKind { region: r.name.clone(), kind });
        }
        Ok(())
    }
}

/// Execution context handed to kernels.
pub struct Exec<'a, 'o> {
    space: &'a mut AddressSpace,
    observers: &'a mut [&'o mut dyn ExecutionObserver],
}

impl<'a, 'o> Exec<'a, 'o> {
    pub fn new(space: &'a mut AddressSpace, observers: &'a mut [&'o mut dyn ExecutionObserver]) -> Self {
        Exec { space, observers }
    }

    pub fn layout(&self) -> &Layout {
        &self.space.layout
    }

    pub fn region(&self, name: &str) -> Result<RegionId, ExecError> {
        self.space.layout.region_id(name).ok_or_else(|| ExecError::UnknownRegion(name.into()))
    }

    pub fn site(&self, label: &str) -> Result<SiteId, ExecError> {
        self.space.layout.site_id(label).ok_or_else(|| ExecError::UnknownSite(label.into()))
    }

    fn emit(&mut self, event: AccessEvent) {
        for obs in self.observers.iter_mut() {
            obs.on_access(&event);
        }
    }

    /// Reads `size` bytes. The result carries the index taint plus the
    /// shadow taint of the cells read.
    pub fn load(&mut self, region: RegionId, offset: usize, size: usize, index: Taint) -> Result<Taint, ExecError> {
        self.space.check(region, offset, size, AccessKind::Read)?;
        let cell = self.space.taint_of(region, offset..offset + size);
        let value_taint = index.union(cell);
        let global = self.space.layout.region(region).global_base + offset as u64;
        self.emit(AccessEvent {
            kind: AccessKind::Read,
            address: Address { region, offset },
            size,
            global,
            index_taint: index,
            value_taint,
        });
        Ok(value_taint)
    }

    /// Writes `size` bytes whose value carries `value` taint.
    pub fn store(
        &mut self,
        region: RegionId,
        offset: usize,
        size: usize,
        value: Taint,
        index: Taint,
    ) -> Result<(), ExecError> {
        self.space.check(region, offset, size, AccessKind::Write)?;
        let stored = value.union(index);
        let shadow = &mut self.space.shadow[region.0 as usize];
        if !stored.is_empty() && shadow.is_empty() {
            shadow.resize(self.space.layout.regions[region.0 as usize].size, Taint::NONE);
        }
        if !shadow.is_empty() {
            shadow[offset..offset + size].fill(stored);
        }
        let global = self.space.layout.region(region).global_base + offset as u64;
        self.emit(AccessEvent {
            kind: AccessKind::Write,
            address: Address { region, offset },
            size,
            global,
            index_taint: index,
            value_taint: value,
        });
        Ok(())
    }

    /// Executes the code of `site`.
    pub fn fetch(&mut self, site: SiteId) -> Result<(), ExecError> {
        let s = self
            .space
            .layout
            .sites
            .get(site.0 as usize)
            .ok_or_else(|| ExecError::UnknownSite(format!("#{}", site.0)))?;
        let (region, offset, size) = (s.region, s.offset, s.size);
        self.space.check(region, offset, size, AccessKind::Fetch)?;
        let global = self.space.layout.region(region).global_base + offset as u64;
        self.emit(AccessEvent {
            kind: AccessKind::Fetch,
            address: Address { region, offset },
            size,
            global,
            index_taint: Taint::NONE,
            value_taint: Taint::NONE,
        });
        Ok(())
    }

    /// Executes the branch instruction at `site`. The kernel fetches the
    /// chosen arm's code itself afterwards.
    pub fn branch(&mut self, site: SiteId, condition: Taint, arms: &[SiteId]) -> Result<(), ExecError> {
        self.fetch(site)?;
        let event = BranchEvent { site, condition, arms };
        for obs in self.observers.iter_mut() {
            obs.on_branch(&event);
        }
        Ok(())
    }

    pub fn marker(&mut self, marker: Marker) {
        for obs in self.observers.iter_mut() {
            obs.on_marker(marker);
        }
    }
}

/// Runs `kernel` on `secret` and `public_input` against `space`, delivering
/// every event to `observers` in program order.
pub fn run_kernel(
    kernel: &KernelVariant,
    space: &mut AddressSpace,
    secret: &[u8],
    public_input: &[u8],
    observers: &mut [&mut dyn ExecutionObserver],
) -> Result<Vec<u8>, ExecError> {
    let expected = kernel.secret_len();
    if secret.len() != expected {
        return Err(ExecError::SecretLength { expected, got: secret.len() });
    }
    let mut ctx = Exec::new(space, observers);
    kernel.execute(&mut ctx, secret, public_input)
}

/// Observer that keeps every event, for tests and completeness sweeps.
#[derive(Debug, Default, Clone)]
pub struct Recorder {
    pub accesses: Vec<AccessEvent>,
    pub branches: Vec<(SiteId, Taint, Vec<SiteId>)>,
    pub markers: Vec<Marker>,
}

impl ExecutionObserver for Recorder {
    fn on_access(&mut self, event: &AccessEvent) {
        self.accesses.push(*event);
    }

    fn on_branch(&mut self, event: &BranchEvent<'_>) {
        self.branches.push((event.site, event.condition, event.arms.to_vec()));
    }

    fn on_marker(&mut self, marker: Marker) {
        self.markers.push(marker);
    }
}

impl Recorder {
    pub fn fetch_count(&self, layout: &Layout, site: SiteId) -> usize {
        let s = layout.site(site);
        self.accesses
            .iter()
            .filter(|e| e.kind == AccessKind::Fetch && e.address.region == s.region && e.address.offset == s.offset)
            .count()
    }

    /// Global lines touched per region.
    pub fn touched_lines(&self, layout: &Layout) -> BTreeMap<RegionId, std::collections::BTreeSet<u64>> {
        let mut out: BTreeMap<RegionId, std::collections::BTreeSet<u64>> = BTreeMap::new();
        for e in &self.accesses {
            for line in layout.lines_covered(e.address, e.size) {
                out.entry(e.address.region).or_default().insert(layout.global_line(line));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(regions: Vec<RegionDecl>, sites: Vec<SiteDecl>) -> KernelSpec {
        let mut regions = regions;
        regions.insert(0, RegionDecl::data("key", 4));
        KernelSpec {
            name: "t".into(),
            regions,
            sites,
            parameters: BTreeMap::new(),
            secret_shape: SecretShape { bytes: 4, chunking: "bitwise".into() },
            secret_region: "key".into(),
        }
    }

    fn site(label: &str, offset: usize, size: usize) -> SiteDecl {
        SiteDecl { label: label.into(), region: "code".into(), offset, size }
    }

    #[test]
    fn rejects_degenerate_specs() {
        let zero = spec(vec![RegionDecl::data("t", 0)], vec![]);
        assert_eq!(build_address_space(&zero, 64).unwrap_err(), ExecError::EmptyRegion("t".into()));
        let dup = spec(vec![RegionDecl::data("t", 4), RegionDecl::data("t", 4)], vec![]);
        assert!(matches!(build_address_space(&dup, 64), Err(ExecError::DuplicateRegion(_))));
        let overlap = spec(vec![RegionDecl::code("code", 128)], vec![site("a", 0, 64), site("b", 32, 64)]);
        assert!(matches!(build_address_space(&overlap, 64), Err(ExecError::OverlappingSites(_, _))));
        let off = spec(vec![RegionDecl::data("t", 4).at_offset(64)], vec![]);
        assert!(matches!(build_address_space(&off, 64), Err(ExecError::BadBaseOffset { .. })));
    }

    #[test]
    fn line_mapping_follows_base_offset() {
        let s = spec(vec![RegionDecl::data("t", 256).at_offset(16)], vec![]);
        let space = build_address_space(&s, 64).unwrap();
        let t = space.layout.region_id("t").unwrap();
        let at = |offset| space.layout.line_of(Address { region: t, offset }).line_index;
        assert_eq!(at(0), 0);
        assert_eq!(at(47), 0);
        assert_eq!(at(48), 1);
        assert_eq!(space.layout.line_count(t), 5);
        let straddle = space.layout.lines_covered(Address { region: t, offset: 47 }, 4);
        assert_eq!(straddle.len(), 2);
    }

    #[test]
    fn following_regions_share_lines() {
        let s = spec(vec![RegionDecl::data("filler", 16), RegionDecl::data("r0", 64).following("filler")], vec![]);
        let space = build_address_space(&s, 64).unwrap();
        let l = &space.layout;
        let f = l.region_id("filler").unwrap();
        let r0 = l.region_id("r0").unwrap();
        assert_eq!(l.region(r0).base_offset, 16);
        assert_eq!(l.global_lines_of_region(f)[0], l.global_lines_of_region(r0)[0]);
        assert_eq!(l.line_count(r0), 2);
    }

    #[test]
    fn out_of_bounds_is_a_fault() {
        let s = spec(vec![RegionDecl::data("t", 8)], vec![]);
        let mut space = build_address_space(&s, 64).unwrap();
        let t = space.layout.region_id("t").unwrap();
        let mut obs: [&mut dyn ExecutionObserver; 0] = [];
        let mut ctx = Exec::new(&mut space, &mut obs);
        assert!(ctx.load(t, 6, 2, Taint::NONE).is_ok());
        assert!(matches!(ctx.load(t, 7, 2, Taint::NONE), Err(ExecError::OutOfBounds { .. })));
    }

    #[test]
    fn taint_flows_through_loads_and_stores() {
        let s = spec(vec![RegionDecl::data("t", 8)], vec![]);
        let mut space = build_address_space(&s, 64).unwrap();
        let key = space.secret_region();
        let t = space.layout.region_id("t").unwrap();
        space.set_taint(key, 0..2, "k1").unwrap();
        space.set_taint(key, 2..4, "k2").unwrap();
        space.set_taint(key, 0..0, "never").unwrap();
        let mut obs: [&mut dyn ExecutionObserver; 0] = [];
        let mut ctx = Exec::new(&mut space, &mut obs);
        let a = ctx.load(key, 0, 1, Taint::NONE).unwrap();
        let b = ctx.load(key, 3, 1, Taint::NONE).unwrap();
        ctx.store(t, 0, 1, a.union(b), Taint::NONE).unwrap();
        let c = ctx.load(t, 0, 1, Taint::NONE).unwrap();
        let untainted = ctx.load(t, 4, 1, Taint::NONE).unwrap();
        assert_eq!(space.label_names(c), vec!["k1".to_string(), "k2".to_string()]);
        assert!(untainted.is_empty());
        assert_eq!(space.label_names(Taint::ALL).len(), 2);
    }
}
