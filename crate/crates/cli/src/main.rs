use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use lhraft::bench::{self, CryptoPhase};
use lhraft::ids::Layer;
use lhraft::scenario::ScenarioConfig;
use lhraft::sim::runner::{Protocol, RunMetrics};

/// Exit status for configuration, usage and I/O failures. Failed checks
/// (violations, missing series, crypto trends) exit with 1.
const EXIT_BAD_INPUT: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "lhraft", version, about = "LH-Raft and classical Raft simulation benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run a scenario and write one metrics row per (protocol, n, seed).
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Which::Both)]
        protocol: Which,
        /// Inclusive seed range `a..b`, or a single seed; overrides the scenario's list.
        #[arg(long, value_parser = parse_seeds)]
        seeds: Option<Seeds>,
    },
    /// Derive the figure CSVs from the metrics files in a directory.
    Figures {
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Time key generation, signing and threshold verification.
    CryptoBench {
        #[arg(long, value_delimiter = ',', default_value = "4,8,12,16,20")]
        nodes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Write the timing CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Which {
    Lhraft,
    Raft,
    Both,
}

impl Which {
    fn protocols(self) -> &'static [Protocol] {
        match self {
            Which::Lhraft => &[Protocol::LhRaft],
            Which::Raft => &[Protocol::Raft],
            Which::Both => &[Protocol::LhRaft, Protocol::Raft],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Seeds(Vec<u64>);

fn parse_seeds(s: &str) -> Result<Seeds, String> {
    let num = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("bad seed {t:?}: {e}"));
    match s.split_once("..") {
        Some((a, b)) => {
            let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
            if a > b {
                return Err(format!("empty seed range {s}"));
            }
            Ok(Seeds((a..=b).collect()))
        }
        None => Ok(Seeds(vec![num(s)?])),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LHRAFT_LOG", "off")).init();
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Run { config, out, protocol, seeds } => cmd_run(&config, &out, protocol, seeds),
        Cmd::Figures { metrics } => cmd_figures(&metrics),
        Cmd::CryptoBench { nodes, reps, out } => cmd_crypto_bench(&nodes, reps, out.as_deref()),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {}", chain(&e));
            ExitCode::from(EXIT_BAD_INPUT)
        }
    }
}

/// The error and its causes, skipping causes the outer message already quotes.
fn chain(e: &anyhow::Error) -> String {
    let mut text = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !text.contains(&c) {
            text.push_str(": ");
            text.push_str(&c);
        }
    }
    text
}

/// `Ok(false)` when any run reported a safety violation.
fn cmd_run(config: &Path, out: &Path, which: Which, seeds: Option<Seeds>) -> Result<bool> {
    let mut cfg = ScenarioConfig::load(config)?;
    if let Some(Seeds(s)) = seeds {
        cfg.seeds = s;
    }
    let rows = bench::sweep(&cfg, which.protocols())?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let stem = output_stem(config, which, &cfg.seeds);
    let csv = out.join(format!("{stem}.csv"));
    bench::write_csv(&csv, &rows)?;
    let text = summary(&cfg.name, &rows);
    fs::write(out.join(format!("{stem}.summary.txt")), &text).context("cannot write summary")?;
    print!("{text}");
    log::info!("wrote {} rows to {}", rows.len(), csv.display());
    if !clean(&rows) {
        let violations: usize = rows.iter().map(|r| r.violations).sum();
        eprintln!("{violations} safety violation(s) across {} runs", rows.len());
    }
    Ok(clean(&rows))
}

fn clean(rows: &[RunMetrics]) -> bool {
    rows.iter().all(|r| r.violations == 0)
}

/// `<config stem>[.<protocol>][.seeds-a-b]`, so partial sweeps of one
/// scenario land in distinct files.
fn output_stem(config: &Path, which: Which, seeds: &[u64]) -> String {
    let mut stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    if which != Which::Both {
        stem.push('.');
        stem.push_str(which.protocols()[0].as_str());
    }
    if let (Some(a), Some(b)) = (seeds.iter().min(), seeds.iter().max()) {
        stem.push_str(&format!(".seeds-{a}-{b}"));
    }
    stem
}

fn summary(name: &str, rows: &[RunMetrics]) -> String {
    let mut groups: BTreeMap<(Protocol, usize), Vec<&RunMetrics>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.protocol, r.n)).or_default().push(r);
    }
    let mut s = format!("scenario {name}: {} runs\n", rows.len());
    let _ = writeln!(
        s,
        "{:<8} {:>5} {:>5} {:>10} {:>14} {:>9} {:>9} {:>9} {:>10}",
        "protocol", "n", "runs", "committed", "bytes/tx", "lat_leaf", "lat_mid", "lat_top", "violations"
    );
    for ((p, n), rs) in &groups {
        let committed: u64 = rs.iter().map(|r| r.committed_tx).sum();
        let violations: usize = rs.iter().map(|r| r.violations).sum();
        let bytes = mean(rs.iter().filter_map(|r| r.bytes_per_tx));
        let lat = |l: Layer| mean(rs.iter().filter_map(|r| r.election_latency(l)));
        let _ = writeln!(
            s,
            "{:<8} {:>5} {:>5} {:>10} {:>14} {:>9} {:>9} {:>9} {:>10}",
            p.as_str(),
            n,
            rs.len(),
            committed,
            fmt_opt(bytes, 0),
            fmt_opt(lat(Layer::Leaf), 1),
            fmt_opt(lat(Layer::Middle), 1),
            fmt_opt(lat(Layer::Top), 1),
            violations
        );
    }
    s
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, k) = xs.fold((0.0, 0usize), |(s, k), x| (s + x, k + 1));
    (k > 0).then(|| sum / k as f64)
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.digits$}"))
}

/// `Ok(false)` when some series had no rows; the others are still written.
fn cmd_figures(metrics: &Path) -> Result<bool> {
    if !metrics.is_dir() {
        bail!("{} is not a directory", metrics.display());
    }
    let report = bench::figures(metrics)?;
    for p in &report.written {
        println!("wrote {}", p.display());
    }
    if !report.missing.is_empty() {
        eprintln!("missing series: {}", report.missing.join(", "));
    }
    Ok(report.missing.is_empty())
}

/// `Ok(false)` when a timing trend check fails.
fn cmd_crypto_bench(nodes: &[usize], reps: usize, out: Option<&Path>) -> Result<bool> {
    if nodes.is_empty() || nodes.contains(&0) {
        bail!("--nodes needs positive node counts");
    }
    let b = bench::crypto_bench(nodes, reps)?;
    match out {
        Some(path) => bench::write_csv(path, &b.rows)?,
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for r in &b.rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    let mut ok = true;
    for phase in CryptoPhase::ALL {
        let r2 = b.r_squared[&phase];
        let pass = r2 >= 0.95;
        ok &= pass;
        eprintln!("{phase:?} linear fit R²={r2:.4} {}", verdict(pass));
    }
    for r in &b.by_length {
        let pass = r.verify_ms > r.sign_ms;
        ok &= pass;
        eprintln!(
            "{} B message: sign {:.3} ms, verify {:.3} ms {}",
            r.message_bytes,
            r.sign_ms,
            r.verify_ms,
            verdict(pass)
        );
    }
    let spread = b.length_spread();
    ok &= spread < 0.2;
    eprintln!("message-length spread {:.1}% {}", spread * 100.0, verdict(spread < 0.2));
    Ok(ok)
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "ok"
    } else {
        "FAILED"
    }
}
