use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use leakscope::detector::{suspects, ExperimentConfig};
use leakscope::exec::{build_address_space, run_kernel, AccessKind, Recorder, RegionKind};
use leakscope::keysplit::{split_fixed_window, split_sliding_window, wnaf_recode};
use leakscope::mia::{entropy, Contingency};
use leakscope::registry;
use leakscope::rng::substream;
use leakscope::taint::{Reason, Target};
use num_bigint::{BigInt, BigUint};
use proptest::prelude::*;

fn key_strategy() -> impl Strategy<Value = BigUint> {
    proptest::collection::vec(any::<u8>(), 1..48).prop_map(|b| BigUint::from_bytes_be(&b))
}

fn table_strategy() -> impl Strategy<Value = Vec<Vec<u64>>> {
    (1usize..7, 2usize..7).prop_flat_map(|(nx, ny)| {
        proptest::collection::vec(proptest::collection::vec(0u64..30, ny), nx)
            .prop_filter("nonempty", |rows| rows.iter().flatten().any(|&c| c > 0))
    })
}

fn mi(rows: &[Vec<u64>]) -> f64 {
    Contingency::from_rows(rows).mutual_information().unwrap().mi_bits
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(256) })]

    #[test]
    fn wnaf_digits_reconstruct_and_are_spaced(key in key_strategy(), w in 2usize..8) {
        let s = wnaf_recode(&key, w).unwrap();
        prop_assert_eq!(s.reconstruct(), BigInt::from(key));
        let d = s.values();
        for &v in &d {
            prop_assert!(v == 0 || (v % 2 != 0 && v.abs() < 1 << (w - 1)));
        }
        for win in d.windows(w) {
            prop_assert!(win.iter().filter(|&&v| v != 0).count() <= 1);
        }
    }

    #[test]
    fn window_splits_reconstruct(key in key_strategy(), w in 1usize..7) {
        let width = 48 * 8;
        let fixed = split_fixed_window(&key, width, w).unwrap();
        prop_assert_eq!(fixed.reconstruct(), BigInt::from(key.clone()));
        let sliding = split_sliding_window(&key, width, w).unwrap();
        prop_assert_eq!(sliding.reconstruct(), BigInt::from(key));
        for c in &sliding.chunks {
            prop_assert!(c.value == 0 || (c.value % 2 == 1 && c.width as usize <= w));
        }
    }

    #[test]
    fn mi_is_symmetric_nonnegative_and_bounded(rows in table_strategy()) {
        let m = mi(&rows);
        let ny = rows[0].len();
        let t: Vec<Vec<u64>> = (0..ny).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
        prop_assert!(m >= 0.0);
        prop_assert!((m - mi(&t)).abs() < 1e-12);
        let hx = entropy(&rows.iter().map(|r| r.iter().sum()).collect::<Vec<u64>>()).unwrap();
        prop_assert!(m <= hx + 1e-12);
    }

    #[test]
    fn merging_probe_symbols_never_adds_information(rows in table_strategy(), split in 1usize..6) {
        let ny = rows[0].len();
        let split = split.min(ny - 1);
        let merged: Vec<Vec<u64>> =
            rows.iter().map(|r| vec![r[..split].iter().sum(), r[split..].iter().sum()]).collect();
        prop_assert!(mi(&merged) <= mi(&rows) + 1e-12);
    }
}

type Suspected = (BTreeSet<String>, bool);

/// Flagged region names and whether any branch was flagged, per kernel.
fn flagged() -> &'static BTreeMap<String, Suspected> {
    static CELL: OnceLock<BTreeMap<String, Suspected>> = OnceLock::new();
    CELL.get_or_init(|| {
        registry::entries()
            .into_iter()
            .map(|e| {
                let v = e.variant;
                let s = suspects(&v, &ExperimentConfig::for_kernel(&v)).unwrap();
                let regions = s
                    .iter()
                    .filter_map(|l| match &l.target {
                        Target::Region { name, .. } => Some(name.clone()),
                        Target::Site { .. } => None,
                    })
                    .collect();
                let branch = s.iter().any(|l| l.reason == Reason::TaintedBranch);
                (v.name.clone(), (regions, branch))
            })
            .collect()
    })
}

/// Per-region (kind, offset, size) sequence of one execution.
fn access_pattern(kernel: &str, secret: &[u8], input: &[u8]) -> BTreeMap<String, Vec<(AccessKind, usize, usize)>> {
    let v = registry::lookup(kernel).unwrap().variant;
    let mut space = build_address_space(&v.spec(64), 64).unwrap();
    let mut rec = Recorder::default();
    run_kernel(&v, &mut space, secret, input, &mut [&mut rec]).unwrap();
    let layout = &space.layout;
    let secret_region = space.secret_region();
    let mut out: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for e in rec.accesses.iter().filter(|e| e.address.region != secret_region) {
        let r = layout.region(e.address.region);
        let key = if r.kind == RegionKind::Code { "\0fetch".to_string() } else { r.name.clone() };
        out.entry(key).or_default().push((e.kind, e.address.offset, e.size));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(96) })]

    /// A region whose access pattern changes with the secret is flagged
    /// itself or sits behind a flagged branch, and a changed fetch sequence
    /// implies a flagged branch.
    #[test]
    fn taint_over_approximates_secret_dependence(kernel_ix in 0usize..64, a in any::<u64>(), b in any::<u64>(), i in any::<u64>()) {
        let names = registry::names();
        let name = &names[kernel_ix % names.len()];
        let v = registry::lookup(name).unwrap().variant;
        let sa = v.random_secret(&mut substream(a, &[1]));
        let sb = v.random_secret(&mut substream(b, &[1]));
        let input = v.sample_input(&mut substream(i, &[2]));
        let pa = access_pattern(name, &sa, &input);
        let pb = access_pattern(name, &sb, &input);
        let (regions, branch) = &flagged()[name];
        for (region, seq) in &pa {
            if pb.get(region) == Some(seq) {
                continue;
            }
            if region == "\0fetch" {
                prop_assert!(*branch, "{}: fetches vary but no branch flagged", name);
            } else {
                prop_assert!(regions.contains(region) || *branch, "{}: {} varies but is not flagged", name, region);
            }
        }
    }
}
