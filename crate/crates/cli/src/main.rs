//! `leakscope` command-line front end.
//!
//! Exit codes: 0 no leak, 2 leak found, 1 usage or runtime error.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use leakscope::detector::{
    does_it_leak, mi_vs_samples_report, per_key_report, suspects, ExperimentConfig, LeakReport, ProbeSchedule, Verdict,
};
use leakscope::kernels::KernelVariant;
use leakscope::mia::{calibrate_threshold, CalibrationParams, Threshold, ThresholdRule};
use leakscope::registry::{self, Entry};
use leakscope::taint::SuspectList;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "leakscope", version, about = "Cache leakage detection for cryptographic kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Measure the noise threshold on an always-cached variable.
    Calibrate(CalibrateArgs),
    /// List secret-dependent branches and memory accesses of a kernel.
    Taint(TaintArgs),
    /// Run the full leakage analysis on one kernel.
    Analyze(AnalyzeArgs),
    /// Analyze every registered suite kernel and print the verdict matrix.
    Suite(SuiteArgs),
    /// Registered kernels.
    Kernels {
        #[command(subcommand)]
        action: KernelsAction,
    },
}

#[derive(Subcommand, Debug)]
enum KernelsAction {
    List {
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment seed.
    #[arg(long, env = "LEAKSCOPE_SEED", default_value_t = 0)]
    seed: u64,
    /// Probability that a cached line probes as a miss.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value_t = 64)]
    line_size: usize,
    /// Worker threads, 0 for all cores.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 100)]
    rounds: usize,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// `sigma:K` or `quantile:Q`.
    #[arg(long, default_value = "sigma:3")]
    rule: String,
    #[arg(long, default_value = "calibration.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TaintArgs {
    kernel: String,
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct Experiment {
    #[command(flatten)]
    common: Common,
    /// Calibration file; optional when `--noise 0`.
    #[arg(long, default_value = "calibration.json")]
    calibration: PathBuf,
    #[arg(long)]
    keys: Option<usize>,
    /// Executions per key.
    #[arg(long)]
    traces: Option<usize>,
    #[arg(long)]
    schedule: Option<ProbeSchedule>,
    /// Pin a region offset, `REGION=BYTES`. Repeatable.
    #[arg(long = "offset", value_parser = parse_offset)]
    offsets: Vec<(String, usize)>,
    /// Keep placement knobs at their declared values.
    #[arg(long)]
    no_randomize_offsets: bool,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    kernel: String,
    #[command(flatten)]
    exp: Experiment,
    /// Report destination; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the per-key table here.
    #[arg(long)]
    per_key_csv: Option<PathBuf>,
    /// Comma-separated executions-per-key checkpoints for the MI curve.
    #[arg(long, value_delimiter = ',')]
    checkpoints: Vec<usize>,
    #[arg(long, default_value = "mi_vs_samples.csv")]
    curve_out: PathBuf,
}

#[derive(Args, Debug)]
struct SuiteArgs {
    #[command(flatten)]
    exp: Experiment,
    /// Directory for per-kernel reports.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Matrix destination; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Only kernels whose name contains this string.
    #[arg(long)]
    only: Option<String>,
}

fn parse_offset(s: &str) -> Result<(String, usize), String> {
    let (r, b) = s.split_once('=').ok_or_else(|| format!("expected REGION=BYTES, got `{s}`"))?;
    let b = b.trim().parse::<usize>().map_err(|e| format!("offset `{b}`: {e}"))?;
    Ok((r.trim().to_string(), b))
}

fn parse_rule(s: &str) -> Result<ThresholdRule> {
    let (kind, v) = s.split_once(':').ok_or_else(|| anyhow!("rule must be sigma:K or quantile:Q"))?;
    let v: f64 = v.parse().with_context(|| format!("rule parameter `{v}`"))?;
    let rule = match kind {
        "sigma" => ThresholdRule::Sigma { k: v },
        "quantile" => ThresholdRule::Quantile { q: v },
        _ => bail!("unknown rule `{kind}`, expected sigma or quantile"),
    };
    rule.validate()?;
    Ok(rule)
}

fn kernel_entry(name: &str) -> Result<Entry> {
    registry::lookup(name)
        .ok_or_else(|| anyhow!("unknown kernel `{name}`; `leakscope kernels list` shows the registered names"))
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| anyhow!("{e}"))?)?)
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

/// Loads the calibration, or builds the zero threshold for `--noise 0`.
fn load_threshold(exp: &Experiment) -> Result<Threshold> {
    if exp.common.noise == Some(0.0) && !exp.calibration.exists() {
        return Ok(Threshold::zero(CalibrationParams { seed: exp.common.seed, ..Default::default() }));
    }
    let t = Threshold::load(&exp.calibration).map_err(|e| {
        anyhow!(
            "cannot read calibration `{}`: {e}\nrun `leakscope calibrate --out {}` first, or pass --noise 0",
            exp.calibration.display(),
            exp.calibration.display()
        )
    })?;
    if let Some(n) = exp.common.noise {
        if (n - t.params.epsilon).abs() > 1e-12 {
            bail!(
                "calibration `{}` was measured at noise {}, not {n}; recalibrate with --noise {n}",
                exp.calibration.display(),
                t.params.epsilon
            );
        }
    }
    Ok(t)
}

fn experiment_config(exp: &Experiment, kernel: &KernelVariant, threshold: &Threshold) -> ExperimentConfig {
    let mut c = ExperimentConfig::for_kernel(kernel);
    c.seed = exp.common.seed;
    c.jobs = exp.common.jobs;
    c.cache.line_size = exp.common.line_size;
    c.cache.hit_false_negative_rate = threshold.params.epsilon;
    if let Some(k) = exp.keys {
        c.n_keys = k;
    }
    if let Some(t) = exp.traces {
        c.traces_per_key = t;
    }
    c.schedule = exp.schedule;
    c.fixed_offsets = exp.offsets.iter().cloned().collect::<BTreeMap<_, _>>();
    if exp.no_randomize_offsets {
        c.randomize_base_offsets = false;
    }
    c
}

fn exit_for(verdict: Verdict) -> ExitCode {
    match verdict {
        Verdict::Leaks => ExitCode::from(2),
        Verdict::NoLeak => ExitCode::SUCCESS,
    }
}

fn summary(report: &LeakReport) -> String {
    let mut s = format!("{}: {}\n", report.kernel, report.verdict);
    if report.no_suspects {
        s.push_str("  no secret-dependent locations found\n");
    }
    for l in &report.locations {
        s.push_str(&format!("  {:<20} avg MI {:.6}  threshold {:.6}  {}\n", l.name, l.avg_mi, l.threshold, l.verdict));
    }
    s
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<ExitCode> {
    let params = CalibrationParams {
        rounds: a.rounds,
        samples_per_round: a.samples,
        epsilon: a.common.noise.unwrap_or(0.01),
        seed: a.common.seed,
        x_alphabet: 256,
        rule: parse_rule(&a.rule)?,
    };
    let t = calibrate_threshold(&params)?;
    t.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("mu {:.6e}  sigma {:.6e}  threshold {:.6e}", t.mu, t.sigma, t.value);
    Ok(ExitCode::SUCCESS)
}

fn cmd_taint(a: &TaintArgs) -> Result<ExitCode> {
    let kernel = kernel_entry(&a.kernel)?.variant;
    let mut config = ExperimentConfig::for_kernel(&kernel);
    config.seed = a.common.seed;
    config.cache.line_size = a.common.line_size;
    let locations = suspects(&kernel, &config)?;
    let text = match a.common.format {
        Format::Json => json(&SuspectList { kernel: kernel.name.clone(), locations }),
        Format::Csv => {
            #[derive(Serialize)]
            struct Row {
                target: String,
                reason: String,
                witness_digest: String,
            }
            let rows: Vec<Row> = locations
                .iter()
                .map(|l| Row {
                    target: l.target.to_string(),
                    reason: serde_json::to_value(l.reason).unwrap().as_str().unwrap_or_default().to_string(),
                    witness_digest: l.witness_digest.clone(),
                })
                .collect();
            to_csv(&rows)?
        }
    };
    write_output(a.out.as_deref(), &text)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<ExitCode> {
    let kernel = kernel_entry(&a.kernel)?.variant;
    let threshold = load_threshold(&a.exp)?;
    let config = experiment_config(&a.exp, &kernel, &threshold);
    let report = does_it_leak(&kernel, &config, &threshold)?;
    let text = match a.exp.common.format {
        Format::Json => json(&report),
        Format::Csv => to_csv(&per_key_report(&report))?,
    };
    write_output(a.out.as_deref(), &text)?;
    if let Some(p) = &a.per_key_csv {
        fs::write(p, to_csv(&per_key_report(&report))?).with_context(|| format!("writing {}", p.display()))?;
    }
    if !a.checkpoints.is_empty() {
        let curve = mi_vs_samples_report(&kernel, &config, &threshold, &a.checkpoints)?;
        fs::write(&a.curve_out, to_csv(&curve)?).with_context(|| format!("writing {}", a.curve_out.display()))?;
    }
    if a.out.is_some() {
        print!("{}", summary(&report));
    }
    Ok(exit_for(report.verdict))
}

#[derive(Serialize)]
struct SuiteRow {
    kernel: String,
    expected: Verdict,
    verdict: Option<Verdict>,
    max_avg_mi: Option<f64>,
    leaking: String,
    error: Option<String>,
}

#[derive(Serialize)]
struct LibraryVerdict {
    primitive: String,
    library: String,
    kernel: String,
    verdict: Option<Verdict>,
}

#[derive(Serialize)]
struct SuiteReport {
    seed: u64,
    noise: f64,
    threshold: f64,
    rows: Vec<SuiteRow>,
    libraries: Vec<LibraryVerdict>,
    /// Leaking share of the library rows.
    leaking_fraction: f64,
}

fn cmd_suite(a: &SuiteArgs) -> Result<ExitCode> {
    let entries: Vec<Entry> = registry::suite()
        .into_iter()
        .filter(|e| a.only.as_deref().is_none_or(|o| e.variant.name.contains(o)))
        .collect();
    if entries.is_empty() {
        bail!("no kernels selected");
    }
    let threshold = load_threshold(&a.exp)?;
    if let Some(d) = &a.out_dir {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let mut rows = Vec::new();
    for e in &entries {
        let config = experiment_config(&a.exp, &e.variant, &threshold);
        let row = match does_it_leak(&e.variant, &config, &threshold) {
            Ok(r) => {
                if let Some(d) = &a.out_dir {
                    let p = d.join(format!("{}.json", e.variant.name));
                    fs::write(&p, json(&r)).with_context(|| format!("writing {}", p.display()))?;
                }
                SuiteRow {
                    kernel: e.variant.name.clone(),
                    expected: e.expected,
                    verdict: Some(r.verdict),
                    max_avg_mi: Some(r.locations.iter().map(|l| l.avg_mi).fold(0.0, f64::max)),
                    leaking: r.leaking().join(";"),
                    error: None,
                }
            }
            Err(err) => SuiteRow {
                kernel: e.variant.name.clone(),
                expected: e.expected,
                verdict: None,
                max_avg_mi: None,
                leaking: String::new(),
                error: Some(err.to_string()),
            },
        };
        eprintln!(
            "{:<34} {:<8} (expected {})",
            row.kernel,
            row.verdict.map_or("error".to_string(), |v| v.to_string()),
            row.expected
        );
        rows.push(row);
    }
    let verdict_of = |k: &str| rows.iter().find(|r| r.kernel == k).and_then(|r| r.verdict);
    let libraries: Vec<LibraryVerdict> = registry::library_table()
        .into_iter()
        .filter(|l| entries.iter().any(|e| e.variant.name == l.kernel))
        .map(|l| LibraryVerdict {
            verdict: verdict_of(&l.kernel),
            primitive: l.primitive,
            library: l.library,
            kernel: l.kernel,
        })
        .collect();
    let leaking = libraries.iter().filter(|l| l.verdict == Some(Verdict::Leaks)).count();
    let report = SuiteReport {
        seed: a.exp.common.seed,
        noise: threshold.params.epsilon,
        threshold: threshold.value,
        leaking_fraction: if libraries.is_empty() { 0.0 } else { leaking as f64 / libraries.len() as f64 },
        rows,
        libraries,
    };
    let text = match a.exp.common.format {
        Format::Json => json(&report),
        Format::Csv => to_csv(&report.rows)?,
    };
    write_output(a.out.as_deref(), &text)?;
    let any_leak = report.rows.iter().any(|r| r.verdict == Some(Verdict::Leaks));
    let any_error = report.rows.iter().any(|r| r.error.is_some());
    Ok(if any_leak {
        ExitCode::from(2)
    } else if any_error {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

#[derive(Serialize)]
struct KernelRow {
    name: String,
    family: String,
    schedule: ProbeSchedule,
    in_suite: bool,
    expected: Verdict,
    description: String,
}

fn cmd_kernels_list(format: Format) -> Result<ExitCode> {
    let rows: Vec<KernelRow> = registry::entries()
        .into_iter()
        .map(|e| KernelRow {
            name: e.variant.name.clone(),
            family: e.variant.family().to_string(),
            schedule: e.variant.schedule(),
            in_suite: e.in_suite,
            expected: e.expected,
            description: e.description,
        })
        .collect();
    let text = match format {
        Format::Json => json(&rows),
        Format::Csv => to_csv(&rows)?,
    };
    write_output(None, &text)?;
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Taint(a) => cmd_taint(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Suite(a) => cmd_suite(a),
        Command::Kernels { action: KernelsAction::List { format } } => cmd_kernels_list(*format),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
