//! Seed sweeps, the per-run metrics CSV, the derived figure series, and the
//! signature micro-benchmark.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::crypto::{
    sign, verify_single, verify_threshold, CryptoError, KeyPair, OneTimeSignature, SystemParams, ThresholdPolicy,
    VerifyKey,
};
use crate::ids::{Layer, NodeId};
use crate::scenario::{ConfigError, ScenarioConfig};
use crate::sim::runner::{run, Protocol, RunHooks, RunMetrics};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("missing series: {}", .0.join(", "))]
    MissingSeries(Vec<&'static str>),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io { path: path.display().to_string(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> BenchError + '_ {
    move |source| BenchError::Csv { path: path.display().to_string(), source }
}

/// Runs every `(protocol, n, seed)` of the scenario. Workers share nothing;
/// rows come back ordered by protocol, then `n`, then seed.
pub fn sweep(cfg: &ScenarioConfig, protocols: &[Protocol]) -> Result<Vec<RunMetrics>, ConfigError> {
    cfg.validate()?;
    let jobs: Vec<(Protocol, usize, u64)> = protocols
        .iter()
        .flat_map(|&p| cfg.node_counts().into_iter().flat_map(move |n| cfg.seeds.iter().map(move |&s| (p, n, s))))
        .collect();
    let mut rows = jobs
        .par_iter()
        .map(|&(p, n, seed)| run(cfg, p, n, seed, &RunHooks::default()).map(|o| o.metrics))
        .collect::<Result<Vec<_>, _>>()?;
    rows.sort_by(|a, b| (a.protocol, a.n, a.seed).cmp(&(b.protocol, b.n, b.seed)));
    Ok(rows)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), BenchError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_metrics(path: &Path) -> Result<Vec<RunMetrics>, BenchError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<Result<Vec<RunMetrics>, _>>().map_err(csv_err(path))
}

/// Every top-level `*.csv` in `dir`, in file-name order.
pub fn read_metrics_dir(dir: &Path) -> Result<Vec<RunMetrics>, BenchError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    let mut rows = Vec::new();
    for p in &paths {
        rows.extend(read_metrics(p)?);
    }
    Ok(rows)
}

// ---- figure series ----

/// Scenario names that feed each derived CSV; the output file is
/// `<name>.csv`.
pub const FIG5: &str = "fig5_commcost";
pub const FIG7: &str = "fig7_messages";
pub const FIG8_10: &str = "fig8_10_latency";
pub const FIG11: &str = "fig11_sensitivity";
pub const SERIES: [&str; 4] = [FIG5, FIG7, FIG8_10, FIG11];

#[derive(Debug, Default, Clone, Copy)]
struct Mean {
    sum: f64,
    count: usize,
}

impl Mean {
    fn add(&mut self, v: Option<f64>) {
        if let Some(v) = v.filter(|v| v.is_finite()) {
            self.sum += v;
            self.count += 1;
        }
    }

    fn get(self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

fn ratio(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        _ => None,
    }
}

fn single_layer(topology: &str) -> Option<Layer> {
    Layer::ALL.into_iter().find(|l| topology == format!("single-{l}"))
}

/// Mean per-transaction consensus bytes per `n`; ratios are LH-Raft over
/// classical Raft at the same `n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig5Row {
    pub n: usize,
    pub raft_bytes: Option<f64>,
    pub leaf_bytes: Option<f64>,
    pub middle_bytes: Option<f64>,
    pub top_bytes: Option<f64>,
    pub leaf_ratio: Option<f64>,
    pub middle_ratio: Option<f64>,
    pub top_ratio: Option<f64>,
    /// Runs that never committed and so have no per-transaction cost.
    pub uncommitted_runs: usize,
}

pub fn fig5(rows: &[RunMetrics]) -> Vec<Fig5Row> {
    let mut by_n: BTreeMap<usize, ([Mean; 3], Mean, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.scenario == FIG5) {
        let e = by_n.entry(r.n).or_default();
        if r.bytes_per_tx.is_none() {
            e.2 += 1;
        }
        match (r.protocol, single_layer(&r.topology)) {
            (Protocol::Raft, _) => e.1.add(r.bytes_per_tx),
            (Protocol::LhRaft, Some(l)) => e.0[l as usize].add(r.bytes_per_tx),
            (Protocol::LhRaft, None) => {}
        }
    }
    by_n.into_iter()
        .map(|(n, (lh, raft, uncommitted_runs))| {
            let raft_bytes = raft.get();
            let [leaf, middle, top] = lh.map(Mean::get);
            Fig5Row {
                n,
                raft_bytes,
                leaf_bytes: leaf,
                middle_bytes: middle,
                top_bytes: top,
                leaf_ratio: ratio(leaf, raft_bytes),
                middle_ratio: ratio(middle, raft_bytes),
                top_ratio: ratio(top, raft_bytes),
                uncommitted_runs,
            }
        })
        .collect()
}

/// Mean LH-Raft message count per phase and `n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig7Row {
    pub n: usize,
    pub candidate_selection: f64,
    pub candidate_notification: f64,
    pub leader_selection: f64,
    pub leader_notification: f64,
}

pub fn fig7(rows: &[RunMetrics]) -> Vec<Fig7Row> {
    let mut by_n: BTreeMap<usize, [Mean; 4]> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.scenario == FIG7 && r.protocol == Protocol::LhRaft) {
        let e = by_n.entry(r.n).or_default();
        let counts = [
            r.candidate_selection_msgs,
            r.candidate_notification_msgs,
            r.leader_selection_msgs,
            r.leader_notification_msgs,
        ];
        for (m, c) in e.iter_mut().zip(counts) {
            m.add(Some(c as f64));
        }
    }
    by_n.into_iter()
        .map(|(n, m)| {
            let [cs, cn, ls, ln] = m.map(|m| m.get().unwrap_or(0.0));
            Fig7Row {
                n,
                candidate_selection: cs,
                candidate_notification: cn,
                leader_selection: ls,
                leader_notification: ln,
            }
        })
        .collect()
}

/// Mean election latency in ticks per `n`: classical Raft and each LH-Raft
/// layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig8Row {
    pub n: usize,
    pub raft: Option<f64>,
    pub leaf: Option<f64>,
    pub middle: Option<f64>,
    pub top: Option<f64>,
}

pub fn fig8_10(rows: &[RunMetrics]) -> Vec<Fig8Row> {
    let mut by_n: BTreeMap<usize, (Mean, [Mean; 3])> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.scenario == FIG8_10) {
        let e = by_n.entry(r.n).or_default();
        match r.protocol {
            Protocol::Raft => e.0.add(r.leaf_election_latency),
            Protocol::LhRaft => {
                for l in Layer::ALL {
                    e.1[l as usize].add(r.election_latency(l));
                }
            }
        }
    }
    by_n.into_iter()
        .map(|(n, (raft, lh))| {
            let [leaf, middle, top] = lh.map(Mean::get);
            Fig8Row { n, raft: raft.get(), leaf, middle, top }
        })
        .collect()
}

/// Mean primary-layer election latency per candidate ratio and protocol.
/// The ratio uses the LH-Raft group size at that `n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig11Row {
    pub c_over_n: String,
    pub n: usize,
    pub c: usize,
    pub protocol: Protocol,
    pub latency: Option<f64>,
}

fn ratio_label(c: usize, n: usize) -> String {
    if c > 0 && n % c == 0 {
        format!("1/{}", n / c)
    } else {
        format!("{c}/{n}")
    }
}

pub fn fig11(rows: &[RunMetrics]) -> Vec<Fig11Row> {
    let mut by_key: BTreeMap<(usize, Protocol), Mean> = BTreeMap::new();
    let mut group: BTreeMap<usize, usize> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.scenario == FIG11) {
        let layer = match r.protocol {
            Protocol::Raft => Layer::Leaf,
            Protocol::LhRaft => {
                group.insert(r.n, r.c);
                single_layer(&r.topology).unwrap_or(Layer::Leaf)
            }
        };
        by_key.entry((r.n, r.protocol)).or_default().add(r.election_latency(layer));
    }
    let mut out: Vec<Fig11Row> = by_key
        .into_iter()
        .map(|((n, protocol), m)| {
            let c = group.get(&n).copied().unwrap_or(n);
            Fig11Row { c_over_n: ratio_label(c, n), n, c, protocol, latency: m.get() }
        })
        .collect();
    out.sort_by_key(|r| (r.protocol, r.n));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiguresReport {
    pub written: Vec<PathBuf>,
    pub missing: Vec<&'static str>,
}

/// Derives the four figure CSVs from the metrics in `metrics_dir` into
/// `metrics_dir/figures`. Series with no rows are reported missing; the
/// others are still written.
pub fn figures(metrics_dir: &Path) -> Result<FiguresReport, BenchError> {
    let rows = read_metrics_dir(metrics_dir)?;
    let out = metrics_dir.join("figures");
    let mut report = FiguresReport { written: Vec::new(), missing: Vec::new() };
    for name in SERIES {
        let path = out.join(format!("{name}.csv"));
        let wrote = match name {
            FIG5 => emit(&path, &fig5(&rows))?,
            FIG7 => emit(&path, &fig7(&rows))?,
            FIG8_10 => emit(&path, &fig8_10(&rows))?,
            _ => emit(&path, &fig11(&rows))?,
        };
        if wrote {
            report.written.push(path);
        } else {
            report.missing.push(name);
        }
    }
    Ok(report)
}

fn emit<T: Serialize>(path: &Path, rows: &[T]) -> Result<bool, BenchError> {
    if rows.is_empty() {
        return Ok(false);
    }
    write_csv(path, rows)?;
    Ok(true)
}

// ---- signature benchmark ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CryptoPhase {
    Keygen,
    Sign,
    Verify,
}

impl CryptoPhase {
    pub const ALL: [CryptoPhase; 3] = [CryptoPhase::Keygen, CryptoPhase::Sign, CryptoPhase::Verify];
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CryptoRow {
    pub nodes: usize,
    pub phase: CryptoPhase,
    /// Fastest of the repetitions, for all `nodes` together.
    pub total_ms: f64,
    pub per_node_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CryptoBench {
    pub rows: Vec<CryptoRow>,
    /// Linear-fit R² of `total_ms` against node count, per phase.
    pub r_squared: BTreeMap<CryptoPhase, f64>,
    /// Per-signature sign and verify time for a short and a long message.
    pub by_length: Vec<LengthRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthRow {
    pub message_bytes: usize,
    pub sign_ms: f64,
    pub verify_ms: f64,
}

impl CryptoBench {
    pub fn linear(&self, min_r2: f64) -> bool {
        self.r_squared.values().all(|&r| r >= min_r2)
    }

    /// Largest relative sign or verify time difference across message lengths.
    pub fn length_spread(&self) -> f64 {
        let spread = |f: fn(&LengthRow) -> f64| {
            let (lo, hi) = self.by_length.iter().map(f).fold((f64::MAX, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if lo > 0.0 {
                (hi - lo) / lo
            } else {
                0.0
            }
        };
        spread(|r| r.sign_ms).max(spread(|r| r.verify_ms))
    }
}

fn elapsed_ms(f: impl FnOnce()) -> f64 {
    let t = Instant::now();
    f();
    t.elapsed().as_secs_f64() * 1e3
}

fn fastest_ms(reps: usize, mut f: impl FnMut()) -> f64 {
    (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .fold(f64::MAX, f64::min)
}

fn bench_message(node: NodeId, len: usize) -> Vec<u8> {
    let mut m = vec![0u8; len];
    for (i, b) in m.iter_mut().enumerate() {
        *b = (i as u32 ^ node.0) as u8;
    }
    m
}

/// Times key generation, one signature per node, and a `⌈2n/3⌉`-of-`n`
/// threshold verification for each node count, plus sign and verify at
/// 8 B and 4096 B messages.
pub fn crypto_bench(nodes: &[usize], reps: usize) -> Result<CryptoBench, BenchError> {
    let params = SystemParams::setup(7)?;
    struct Setup {
        ids: Vec<NodeId>,
        pairs: Vec<KeyPair>,
        msgs: Vec<Vec<u8>>,
        sigs: Vec<OneTimeSignature>,
        keys: BTreeMap<NodeId, VerifyKey>,
        policy: ThresholdPolicy,
    }
    let mut setups = Vec::with_capacity(nodes.len());
    for &n in nodes {
        let ids: Vec<NodeId> = (0..n as u32).map(NodeId).collect();
        let pairs: Vec<KeyPair> = ids.iter().map(|&id| KeyPair::generate(&params, id, 1)).collect();
        let msgs: Vec<Vec<u8>> = ids.iter().map(|&id| bench_message(id, 32)).collect();
        let sigs = pairs.iter().zip(&msgs).map(|(kp, m)| sign(&params, kp, m)).collect::<Result<Vec<_>, _>>()?;
        let keys = pairs.iter().map(|kp| (kp.node, kp.verify_key)).collect();
        let policy = ThresholdPolicy::two_thirds(n)?;
        setups.push(Setup { ids, pairs, msgs, sigs, keys, policy });
    }
    // Repetitions sweep every node count in turn, so a burst of outside load
    // lands on one repetition of each point instead of every repetition of one.
    let mut best = vec![[f64::MAX; 3]; nodes.len()];
    for _ in 0..reps.max(1) {
        for (s, b) in setups.iter().zip(&mut best) {
            let keygen = elapsed_ms(|| {
                for &id in &s.ids {
                    std::hint::black_box(KeyPair::generate(&params, id, 1));
                }
            });
            let signing = elapsed_ms(|| {
                for (kp, m) in s.pairs.iter().zip(&s.msgs) {
                    std::hint::black_box(sign(&params, kp, m).ok());
                }
            });
            let verify = elapsed_ms(|| {
                std::hint::black_box(verify_threshold(&params, &s.sigs, &s.keys, s.policy).ok());
            });
            for (slot, t) in b.iter_mut().zip([keygen, signing, verify]) {
                *slot = slot.min(t);
            }
        }
    }
    let mut rows = Vec::new();
    for (&n, b) in nodes.iter().zip(&best) {
        for (phase, &total_ms) in CryptoPhase::ALL.into_iter().zip(b) {
            rows.push(CryptoRow { nodes: n, phase, total_ms, per_node_ms: total_ms / n.max(1) as f64 });
        }
    }
    let r_squared = CryptoPhase::ALL
        .into_iter()
        .map(|phase| {
            let pts: Vec<(f64, f64)> =
                rows.iter().filter(|r| r.phase == phase).map(|r| (r.nodes as f64, r.total_ms)).collect();
            (phase, r_squared(&pts))
        })
        .collect();
    let kp = KeyPair::generate(&params, NodeId(0), 1);
    let by_length = [8usize, 4096]
        .into_iter()
        .map(|len| {
            let m = bench_message(kp.node, len);
            let sig = sign(&params, &kp, &m)?;
            let batch = 8;
            let sign_ms = fastest_ms(reps, || {
                for _ in 0..batch {
                    std::hint::black_box(sign(&params, &kp, &m).ok());
                }
            }) / batch as f64;
            let verify_ms = fastest_ms(reps, || {
                for _ in 0..batch {
                    std::hint::black_box(verify_single(&params, &sig, &kp.verify_key));
                }
            }) / batch as f64;
            Ok(LengthRow { message_bytes: len, sign_ms, verify_ms })
        })
        .collect::<Result<Vec<_>, BenchError>>()?;
    Ok(CryptoBench { rows, r_squared, by_length })
}

/// Coefficient of determination of the least-squares line through `pts`.
pub fn r_squared(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return 1.0;
    }
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}
