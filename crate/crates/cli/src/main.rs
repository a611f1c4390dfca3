use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dislock::bench::{self, BenchConfig, BenchError, CsvRow, LockKind};
use dislock::checker::{self, Report};
use dislock::fabric::{TraceSink, NS_PER_US};
use dislock::hier::Fairness;

const EXIT_VIOLATION: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser)]
#[command(name = "dislock", version, about = "Simulated disaggregated-memory lock benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one benchmark configuration.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_lock)]
        lock: Option<LockKind>,
        #[arg(long, value_parser = parse_fairness)]
        fairness: Option<Fairness>,
        #[arg(long, value_parser = parse_on_off)]
        hierarchy: Option<bool>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the JSONL event trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Exit 2 on a safety, liveness or reset-verification failure.
        #[arg(long)]
        strict: bool,
    },
    /// Check a recorded trace.
    Check {
        trace: PathBuf,
        #[arg(long, value_parser = parse_fairness)]
        policy: Fairness,
        /// Liveness horizon in µs.
        #[arg(long)]
        horizon: f64,
    },
    /// Run the cartesian product of a parameter matrix.
    Sweep {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn parse_lock(s: &str) -> Result<LockKind, String> {
    LockKind::parse(s).ok_or_else(|| format!("unknown lock {s:?} (cql, caslock, ticket)"))
}

fn parse_fairness(s: &str) -> Result<Fairness, String> {
    Fairness::parse(s).ok_or_else(|| format!("unknown policy {s:?} (tf, pf)"))
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(format!("expected on or off, got {s:?}")),
    }
}

/// Exit-code-carrying failure.
struct Fail(u8, String);

impl From<BenchError> for Fail {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Config(_) => Fail(EXIT_CONFIG, e.to_string()),
            other => Fail(1, other.to_string()),
        }
    }
}

fn read_file(p: &Path) -> Result<String, Fail> {
    std::fs::read_to_string(p).map_err(|e| Fail(EXIT_CONFIG, format!("{}: {e}", p.display())))
}

fn create(p: &Path) -> Result<BufWriter<File>, Fail> {
    File::create(p)
        .map(BufWriter::new)
        .map_err(|e| Fail(1, format!("{}: {e}", p.display())))
}

fn write_rows(p: &Path, rows: &[CsvRow]) -> Result<(), Fail> {
    bench::write_csv(create(p)?, rows).map_err(|e| Fail(1, format!("{}: {e}", p.display())))
}

fn print_report(r: &Report) {
    println!(
        "grants={} mutex_violations={} stuck={} overtakes={} cross_cn_overtakes={} local_overtakes={} phase_violations={}",
        r.grants,
        r.mutex_violations,
        r.stuck,
        r.overtakes,
        r.cross_cn.overtakes,
        r.cross_cn.local_overtakes,
        r.phase_violations
    );
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    config: &Path,
    lock: Option<LockKind>,
    fairness: Option<Fairness>,
    hierarchy: Option<bool>,
    seed: Option<u64>,
    trace: Option<&Path>,
    csv: Option<&Path>,
    strict: bool,
) -> Result<(), Fail> {
    let mut cfg = BenchConfig::from_toml(&read_file(config)?)?;
    if let Some(k) = lock {
        cfg.lock.kind = k;
    }
    if let Some(f) = fairness {
        cfg.lock.fairness = f;
    }
    if let Some(h) = hierarchy {
        cfg.lock.hierarchy = h;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let sink = match trace {
        Some(p) => TraceSink::Writer(Box::new(create(p)?)),
        None => TraceSink::Off,
    };
    let out = bench::run(&cfg, sink)?;
    let m = &out.metrics;
    println!(
        "lock={} fairness={} hierarchy={} seed={}",
        cfg.lock.kind.name(),
        cfg.lock.fairness.short(),
        cfg.lock.hierarchy,
        cfg.seed
    );
    println!(
        "throughput={:.0} ops/s median={:.2}us p99={:.2}us mn_ops_per_acq={:.3} nic_util={:.3} reset_fraction={:.6}",
        m.throughput, m.latency_median_us, m.latency_p99_us, m.mn_ops_per_acq, m.nic_utilization, m.reset_fraction
    );
    println!(
        "ops={} acquisitions={} resets={} aborts={} timeouts={} elapsed={:.1}us{}",
        m.ops_completed,
        m.acquisitions,
        m.resets,
        m.aborts,
        m.timeouts,
        m.elapsed_us,
        if m.horizon_exceeded { " (horizon exceeded)" } else { "" }
    );
    print_report(&out.report);
    if let Some(p) = csv {
        write_rows(p, &[CsvRow::new(&cfg, m)])?;
    }
    if strict && (out.report.has_violation() || m.reset_verify_failures > 0) {
        return Err(Fail(EXIT_VIOLATION, "checker violation".into()));
    }
    Ok(())
}

fn cmd_check(path: &Path, policy: Fairness, horizon_us: f64) -> Result<(), Fail> {
    if horizon_us.is_nan() || horizon_us <= 0.0 {
        return Err(Fail(EXIT_CONFIG, "horizon must be > 0".into()));
    }
    let file = File::open(path).map_err(|e| Fail(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
    let t = checker::parse_trace(BufReader::new(file)).map_err(|e| Fail(EXIT_CONFIG, e.to_string()))?;
    let horizon = (horizon_us * NS_PER_US as f64) as u64;
    let skew = t.skew.unwrap_or(0);
    let r = checker::full_report(&t.grants, &t.pending, &t.failures, t.end, horizon, skew);
    println!("policy={} resets={}", policy.short(), t.resets.len());
    print_report(&r);
    // The policy picks which fairness count is the headline one.
    match policy {
        Fairness::TaskFair => println!("fairness: {} overtakes", r.overtakes),
        Fairness::PhaseFair => println!("fairness: {} phase violations", r.phase_violations),
    }
    if r.has_violation() {
        return Err(Fail(EXIT_VIOLATION, "checker violation".into()));
    }
    Ok(())
}

fn cmd_sweep(matrix: &Path, csv: Option<&Path>) -> Result<(), Fail> {
    let points = bench::expand_matrix(&read_file(matrix)?).map_err(|e| Fail(EXIT_CONFIG, e.to_string()))?;
    let results = bench::run_matrix(&points);
    let mut rows = Vec::with_capacity(results.len());
    let mut bad = false;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(row) => {
                bad |= row.mutex_violations > 0 || row.stuck > 0;
                rows.push(row);
            }
            Err(e) => return Err(Fail(1, format!("point {i}: {e}"))),
        }
    }
    match csv {
        Some(p) => write_rows(p, &rows)?,
        None => bench::write_csv(std::io::stdout().lock(), &rows).map_err(|e| Fail(1, e.to_string()))?,
    }
    if bad {
        return Err(Fail(EXIT_VIOLATION, "checker violation in sweep".into()));
    }
    Ok(())
}

fn main() -> ExitCode {
    // Usage errors map to the config exit code; clap's own 2 means a
    // violation here.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let r = match &cli.cmd {
        Cmd::Bench {
            config,
            lock,
            fairness,
            hierarchy,
            seed,
            trace,
            csv,
            strict,
        } => cmd_bench(
            config,
            *lock,
            *fairness,
            *hierarchy,
            *seed,
            trace.as_deref(),
            csv.as_deref(),
            *strict,
        ),
        Cmd::Check { trace, policy, horizon } => cmd_check(trace, *policy, *horizon),
        Cmd::Sweep { matrix, csv } => cmd_sweep(matrix, csv.as_deref()),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail(code, msg)) => {
            eprintln!("dislock: {msg}");
            ExitCode::from(code)
        }
    }
}
