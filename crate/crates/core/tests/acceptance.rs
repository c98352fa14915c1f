//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! straight to stdout, so the lines survive output capture.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use leakscope::cache::{CacheConfig, CacheState, ProbeOutcome};
use leakscope::detector::{
    does_it_leak, group_mi, hello_trace, probe_steps, suspects, ExperimentConfig, LeakReport, LocationReport, Verdict,
};
use leakscope::kernels::{ecc, hello, modexp, toy, KernelVariant};
use leakscope::keysplit::wnaf_recode;
use leakscope::mia::{calibrate_threshold, CalibrationParams, Contingency, Threshold};
use leakscope::registry;
use leakscope::rng::substream;
use leakscope::taint::distinct_targets;
use num_bigint::{BigInt, BigUint};
use rand::{Rng, RngCore};

struct Check {
    ok: bool,
    notes: Vec<String>,
}

impl Check {
    fn new() -> Self {
        Check { ok: true, notes: Vec::new() }
    }

    fn require(&mut self, cond: bool, note: impl Into<String>) {
        let note = note.into();
        if cond {
            self.notes.push(note);
        } else {
            self.ok = false;
            self.notes.push(format!("FAILED {note}"));
        }
    }
}

struct Ctx {
    threshold: Threshold,
    reports: BTreeMap<String, LeakReport>,
}

impl Ctx {
    fn variant(name: &str) -> KernelVariant {
        registry::lookup(name).unwrap_or_else(|| panic!("kernel {name}")).variant
    }

    /// Default-config report, computed once per kernel.
    fn report(&mut self, name: &str) -> &LeakReport {
        if !self.reports.contains_key(name) {
            let v = Self::variant(name);
            let r = does_it_leak(&v, &ExperimentConfig::for_kernel(&v), &self.threshold).expect("analysis runs");
            self.reports.insert(name.to_string(), r);
        }
        &self.reports[name]
    }
}

fn loc<'a>(r: &'a LeakReport, name: &str) -> &'a LocationReport {
    r.location(name).unwrap_or_else(|| panic!("{} has no location {name}", r.kernel))
}

fn mi_of(rows: &[Vec<u64>]) -> f64 {
    Contingency::from_rows(rows).mutual_information().unwrap().mi_bits
}

fn hello_example(_: &mut Ctx) -> Check {
    let mut c = Check::new();
    let t0 = Instant::now();
    for (name, want) in [("hello", 1.0), ("hello-same-line", 0.0)] {
        let v = Ctx::variant(name);
        let mut config = ExperimentConfig::for_kernel(&v);
        config.cache.hit_false_negative_rate = 0.0;
        config.traces_per_key = 1000;
        let rows = hello_trace(&v, &config).unwrap();
        let mut table = vec![vec![0u64; 2]; 2];
        for r in &rows {
            table[(r.gender == hello::FEMALE) as usize][r.b1_hit as usize] += 1;
        }
        let mi = mi_of(&table);
        c.require(mi == want, format!("{name}: MI(gender; B1) = {mi} over {} invocations", rows.len()));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    c.require(elapsed < 1.0, format!("{elapsed:.2}s"));
    c
}

fn brute_force_mi(counts: &[Vec<u64>]) -> f64 {
    let n: f64 = counts.iter().flatten().sum::<u64>() as f64;
    let h = |ps: Vec<f64>| -> f64 { ps.into_iter().filter(|&p| p > 0.0).map(|p| -p * p.log2()).sum() };
    let px: Vec<f64> = counts.iter().map(|r| r.iter().sum::<u64>() as f64 / n).collect();
    let py: Vec<f64> = (0..counts[0].len()).map(|j| counts.iter().map(|r| r[j]).sum::<u64>() as f64 / n).collect();
    let pxy: Vec<f64> = counts.iter().flatten().map(|&v| v as f64 / n).collect();
    h(px) + h(py) - h(pxy)
}

fn estimator_oracle(_: &mut Ctx) -> Check {
    let mut c = Check::new();
    let mut rng = substream(2, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..25 {
        let nx = rng.gen_range(1..=8);
        let ny = rng.gen_range(1..=8);
        let mut rows: Vec<Vec<u64>> = (0..nx).map(|_| (0..ny).map(|_| rng.gen_range(0..50)).collect()).collect();
        rows[0][0] += 1;
        let got = mi_of(&rows);
        worst = worst.max((got - brute_force_mi(&rows)).abs());
    }
    c.require(worst <= 1e-9, format!("max |plug-in - H(X)+H(Y)-H(X,Y)| = {worst:.2e} over 25 tables"));
    c
}

fn calibration(ctx: &mut Ctx) -> Check {
    let mut c = Check::new();
    let t = &ctx.threshold;
    c.require(
        t.value > 0.0 && t.value < 0.01,
        format!("threshold {:.6} bits (mu {:.6}, sigma {:.6})", t.value, t.mu, t.sigma),
    );
    let again = calibrate_threshold(&t.params).unwrap();
    c.require(again.to_json() == t.to_json(), "rerun at the same seed is bit-identical");
    let own = t.fraction_below();
    c.require(own >= 0.99, format!("{:.0}/100 calibration rounds below threshold", own * 100.0));
    let fresh = calibrate_threshold(&CalibrationParams { seed: 1, ..t.params.clone() }).unwrap();
    let below = fresh.round_mis.iter().filter(|&&m| m < t.value).count();
    c.require(below >= 99, format!("{below}/100 fresh-seed rounds below threshold"));
    c
}

fn aes(ctx: &mut Ctx) -> Check {
    let mut c = Check::new();
    for name in ["aes-ttable", "aes-ttable-reused", "aes-sbox"] {
        let r = ctx.report(name);
        c.require(r.verdict == Verdict::Leaks, format!("{name} leaks at 10^5 ({:?})", r.leaking()));
    }
    let last = |r: &LeakReport| {
        r.locations
            .iter()
            .flat_map(|l| l.segments.iter().filter(|s| s.name == "last_round").map(|s| s.avg_mi))
            .fold(0.0, f64::max)
    };
    let distinct = last(ctx.report("aes-ttable"));
    let reused = last(ctx.report("aes-ttable-reused"));
    c.require(distinct > reused, format!("last-round MI distinct {distinct:.4} > reused {reused:.4}"));
    let r = ctx.report("aes-sbox-prefetch");
    c.require(r.verdict == Verdict::NoLeak, "aes-sbox-prefetch below threshold at 10^5");

    for name in ["aes-sbox", "aes-sbox-prefetch"] {
        let t0 = Instant::now();
        let v = Ctx::variant(name);
        let config = ExperimentConfig { traces_per_key: 1_000_000, ..ExperimentConfig::for_kernel(&v) };
        let r = does_it_leak(&v, &config, &ctx.threshold).unwrap();
        let l = loc(&r, "sbox");
        let want = if name == "aes-sbox" { Verdict::Leaks } else { Verdict::NoLeak };
        c.require(
            r.verdict == want,
            format!(
                "{name} at 10^6: {} (MI {:.5}, threshold {:.5}, {:.0}s)",
                r.verdict,
                l.avg_mi,
                l.threshold,
                t0.elapsed().as_secs_f64()
            ),
        );
    }
    c
}

fn rsa_ladder(ctx: &mut Ctx) -> Check {
    let mut c = Check::new();
    let r = ctx.report("modexp-ladder").clone();
    let reg = loc(&r, modexp::R0);
    let mut aligned = 0;
    let mut bad = Vec::new();
    for (k, (o, (&mi, &th))) in r.offsets.iter().zip(reg.per_key_mi.iter().zip(&reg.per_key_threshold)).enumerate() {
        let ok = if o[modexp::R0] == 0 {
            aligned += 1;
            mi > 0.9
        } else {
            mi < th
        };
        if !ok {
            bad.push(k);
        }
    }
    c.require(
        aligned > 0 && bad.is_empty(),
        format!("{aligned}/100 aligned keys above 0.9 bits, others below; mismatched keys {bad:?}"),
    );
    let sites: Vec<&LocationReport> = r.locations.iter().filter(|l| l.target.is_site()).collect();
    let above: usize =
        sites.iter().map(|l| l.per_key_mi.iter().zip(&l.per_key_threshold).filter(|(m, t)| m > t).count()).sum();
    c.require(
        !sites.is_empty() && above == 0,
        format!("{} instruction sites, {above} key/site pairs above threshold", sites.len()),
    );
    c
}

fn sliding_window(ctx: &mut Ctx) -> Check {
    let mut c = Check::new();
    let r = ctx.report("modexp-sliding");
    for name in ["@mul_routine", modexp::TABLE] {
        let l = loc(r, name);
        c.require(l.verdict == Verdict::Leaks, format!("modexp-sliding {name}: {:.4} > {:.4}", l.avg_mi, l.threshold));
    }
    for name in ["ecc-fixed-uniform", "modexp-fixed-scatter"] {
        let r = ctx.report(name);
        c.require(r.verdict == Verdict::NoLeak, format!("{name}: {}", r.verdict));
    }
    c
}

/// Window-equals-3 indicator against the first table line, over balanced
/// secrets at zero noise.
fn misalignment_mi(offset: usize) -> f64 {
    let v = Ctx::variant("modexp-fixed-scatter-misaligned").with_offset(modexp::TABLE, offset);
    let cache = CacheConfig { hit_false_negative_rate: 0.0, ..CacheConfig::default() };
    let mut rng = substream(7, &[offset as u64]);
    let mut table = vec![vec![0u64; 2]; 2];
    for _ in 0..100 {
        let secret: Vec<u8> = (0..v.secret_len())
            .map(|_| {
                (0..4).fold(0u8, |b, i| b | ((if rng.gen_bool(0.5) { 3 } else { rng.gen_range(0..3) }) << (2 * i)))
            })
            .collect();
        let input = v.sample_input(&mut rng);
        let tr = probe_steps(&v, &cache, &secret, &input, &[modexp::TABLE], &mut rng).unwrap();
        for (chunk, hits) in tr.chunks.iter().zip(&tr.hits) {
            table[(*chunk == 3) as usize][(hits[0] & 1) as usize] += 1;
        }
    }
    mi_of(&table)
}

fn scatter_misalignment(_: &mut Ctx) -> Check {
    let mut c = Check::new();
    let off = misalignment_mi(16);
    c.require(off > 0.9, format!("offset 16: MI {off:.4} bits"));
    let aligned = misalignment_mi(0);
    c.require(aligned == 0.0, format!("offset 0: MI {aligned} bits"));
    c
}

fn ecc_kernels(ctx: &mut Ctx) -> Check {
    let mut c = Check::new();
    let r = ctx.report("ecc-ladder").clone();
    let regs = [loc(&r, ecc::R0), loc(&r, ecc::R1)];
    let leaking_keys =
        (0..r.offsets.len()).filter(|&k| regs.iter().any(|l| l.per_key_mi[k] > l.per_key_threshold[k])).count();
    c.require(
        leaking_keys == r.offsets.len(),
        format!("ecc-ladder registers leak for {leaking_keys}/{} keys", r.offsets.len()),
    );
    c.require(ctx.report("ecc-ladder-ct").verdict == Verdict::NoLeak, "ecc-ladder-ct below threshold");
    let r = ctx.report("ecc-sliding");
    for name in ["@add_routine", ecc::TABLE] {
        c.require(loc(r, name).verdict == Verdict::Leaks, format!("ecc-sliding {name} leaks"));
    }
    c.require(ctx.report("ecc-fixed-uniform").verdict == Verdict::NoLeak, "ecc-fixed-uniform below threshold");

    let v = Ctx::variant("ecc-wnaf");
    let groups: [(&str, &[&str]); 3] = [
        ("add", &[ecc::ADD]),
        ("add+table", &[ecc::ADD, ecc::TABLE]),
        ("add+table+sign", &[ecc::ADD, ecc::TABLE, ecc::SIGN]),
    ];
    let levels = group_mi(&v, &ExperimentConfig::for_kernel(&v), &ctx.threshold, &groups).unwrap();
    let summary: Vec<String> =
        levels.iter().map(|l| format!("{} {:.4}/{:.4}", l.name, l.avg_mi, l.threshold)).collect();
    let nested =
        levels.windows(2).all(|w| w[1].avg_mi > w[0].avg_mi) && levels.iter().all(|l| l.verdict == Verdict::Leaks);
    c.require(nested, format!("wNAF levels {summary:?}"));
    c
}

fn verdict_matrix(ctx: &mut Ctx) -> Check {
    let mut c = Check::new();
    let mut wrong = Vec::new();
    for e in registry::suite() {
        let r = ctx.report(&e.variant.name);
        if r.verdict != e.expected {
            wrong.push(format!("{}: {} (expected {})", e.variant.name, r.verdict, e.expected));
        }
    }
    c.require(wrong.is_empty(), format!("{} suite kernels, mismatches {wrong:?}", registry::suite().len()));
    let rows = registry::library_table();
    let leaking = rows.iter().filter(|row| ctx.report(&row.kernel).verdict == Verdict::Leaks).count();
    c.require((11..=13).contains(&leaking), format!("{leaking}/{} library rows leak", rows.len()));
    c
}

fn target_names(name: &str) -> BTreeSet<String> {
    let v = Ctx::variant(name);
    let s = suspects(&v, &ExperimentConfig::for_kernel(&v)).unwrap();
    distinct_targets(&s).iter().map(|t| t.name().to_string()).collect()
}

fn taint_engine(ctx: &mut Ctx) -> Check {
    let mut c = Check::new();
    let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
    let toy_targets = target_names("taint-toy");
    c.require(toy_targets == set(&[toy::KEY_BRANCH, toy::INDEX, toy::TABLE_A]), format!("taint-toy {toy_targets:?}"));
    let hello_targets = target_names("hello");
    c.require(hello_targets == set(&[hello::GENDER_BRANCH, hello::B1, hello::B2]), format!("hello {hello_targets:?}"));
    let flagged = target_names("ecc-fixed-uniform").contains(ecc::TABLE);
    let r = ctx.report("ecc-fixed-uniform");
    c.require(
        flagged && loc(r, ecc::TABLE).verdict == Verdict::NoLeak,
        format!("ecc-fixed-uniform table flagged {flagged}, verdict {}", r.verdict),
    );
    c
}

/// Timestamp-based LRU, one map per set.
struct ReferenceLru {
    ways: usize,
    n_sets: u64,
    clock: u64,
    sets: Vec<BTreeMap<u64, u64>>,
}

impl ReferenceLru {
    fn touch(&mut self, line: u64) {
        self.clock += 1;
        let set = &mut self.sets[(line % self.n_sets) as usize];
        if !set.contains_key(&line) && set.len() == self.ways {
            let oldest = *set.iter().min_by_key(|(_, &t)| t).unwrap().0;
            set.remove(&oldest);
        }
        set.insert(line, self.clock);
    }
}

fn property_suites(ctx: &mut Ctx) -> Check {
    let mut c = Check::new();
    let mut rng = substream(11, &[]);

    let mut wnaf_ok = 0;
    for i in 0..1000 {
        let w = 2 + i % 5;
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        let key = BigUint::from_bytes_be(&bytes);
        let s = wnaf_recode(&key, w).unwrap();
        let digits = s.values();
        let bound = 1i64 << (w - 1);
        let digits_ok = digits.iter().all(|&d| d == 0 || (d % 2 != 0 && d.abs() < bound));
        let spaced = digits.windows(w).all(|win| win.iter().filter(|&&d| d != 0).count() <= 1);
        if s.reconstruct() == BigInt::from(key) && digits_ok && spaced {
            wnaf_ok += 1;
        }
    }
    c.require(wnaf_ok == 1000, format!("wNAF {wnaf_ok}/1000 keys reconstruct with valid spacing"));

    let mut lru_mismatch = 0;
    for stream in 0..4 {
        let config =
            CacheConfig { n_sets: 4, ways: 1 + stream, hit_false_negative_rate: 0.0, ..CacheConfig::default() };
        let mut cache = CacheState::new(&config).unwrap();
        let mut reference = ReferenceLru { ways: config.ways, n_sets: 4, clock: 0, sets: vec![BTreeMap::new(); 4] };
        for _ in 0..10_000 {
            let line = rng.gen_range(0..40u64);
            match rng.gen_range(0..3) {
                0 => {
                    cache.touch_line(line);
                    reference.touch(line);
                }
                1 => {
                    cache.evict_line(line);
                    reference.sets[(line % 4) as usize].remove(&line);
                }
                _ => {
                    let want = reference.sets[(line % 4) as usize].contains_key(&line);
                    let got = cache.probe_line(line, &mut rng) == ProbeOutcome::Hit;
                    reference.touch(line);
                    lru_mismatch += (want != got) as usize;
                }
            }
            lru_mismatch +=
                (0..40).filter(|&l| cache.is_resident(l) != reference.sets[(l % 4) as usize].contains_key(&l)).count();
        }
    }
    c.require(lru_mismatch == 0, format!("LRU vs reference on 4 x 10^4 events: {lru_mismatch} mismatches"));

    let mut mi_bad = 0;
    for _ in 0..200 {
        let nx = rng.gen_range(1..=6);
        let ny = rng.gen_range(2..=6);
        let rows: Vec<Vec<u64>> = (0..nx).map(|_| (0..ny).map(|_| rng.gen_range(0..20)).collect()).collect();
        if rows.iter().flatten().sum::<u64>() == 0 {
            continue;
        }
        let mi = mi_of(&rows);
        let transposed: Vec<Vec<u64>> = (0..ny).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
        let merged: Vec<Vec<u64>> = rows.iter().map(|r| vec![r[0] + r[1], r[2..].iter().sum()]).collect();
        if mi < 0.0 || (mi - mi_of(&transposed)).abs() > 1e-12 || mi_of(&merged) > mi + 1e-12 {
            mi_bad += 1;
        }
    }
    c.require(mi_bad == 0, format!("MI symmetry, nonnegativity, data processing: {mi_bad}/200 violations"));

    let v = Ctx::variant("modexp-ladder");
    let run = |jobs| {
        let config = ExperimentConfig { jobs, ..ExperimentConfig::for_kernel(&v) };
        does_it_leak(&v, &config, &ctx.threshold).unwrap()
    };
    c.require(run(1) == run(8), "modexp-ladder report identical with 1 and 8 workers");
    c
}

type Criterion = fn(&mut Ctx) -> Check;

#[test]
fn acceptance() {
    let criteria: [(&str, Criterion); 11] = [
        ("greeting example", hello_example),
        ("MI estimator oracle", estimator_oracle),
        ("threshold calibration", calibration),
        ("AES variants", aes),
        ("RSA Montgomery ladder", rsa_ladder),
        ("sliding window modexp", sliding_window),
        ("scatter-gather misalignment", scatter_misalignment),
        ("ECC variants", ecc_kernels),
        ("suite verdict matrix", verdict_matrix),
        ("taint engine", taint_engine),
        ("property suites", property_suites),
    ];
    let threshold = calibrate_threshold(&CalibrationParams::default()).unwrap();
    let mut ctx = Ctx { threshold, reports: BTreeMap::new() };
    let mut failed = Vec::new();
    let mut out = std::io::stdout();
    for (i, (title, f)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let check = catch_unwind(AssertUnwindSafe(|| f(&mut ctx))).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Check { ok: false, notes: vec![format!("panicked: {}", msg.unwrap_or_default())] }
        });
        let line = format!(
            "acceptance {:>2} {:<28} {} [{:.1}s] {}\n",
            i + 1,
            title,
            if check.ok { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64(),
            check.notes.join("; ")
        );
        out.write_all(line.as_bytes()).unwrap();
        out.flush().unwrap();
        if !check.ok {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria {failed:?}");
}
