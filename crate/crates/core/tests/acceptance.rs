//! Exit-gate checks, one PASS/FAIL line per criterion. Lines go straight to
//! stderr so they show up without `--nocapture`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lhraft::bench::{self, FIG11, FIG5, FIG7, FIG8_10};
use lhraft::cgf::{brute_force_cgf, cgf_runtime_probe, solve_cgf};
use lhraft::crypto::{
    sign, verify_threshold, KeyPair, MessageDigest, OneTimeSignature, SystemParams, ThresholdPolicy, VerifyKey,
};
use lhraft::ids::NodeId;
use lhraft::reputation::NodeScore;
use lhraft::scenario::ScenarioConfig;
use lhraft::sim::runner::{run, Protocol, RunHooks, RunMetrics};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn say(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn load(name: &str) -> ScenarioConfig {
    ScenarioConfig::load(&scenarios().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

// ---- 1: safety suite ----

fn fault_json(kind: usize, n: usize, layer: &str) -> String {
    match kind {
        0 => String::new(),
        1 => format!(r#"{{"kind": "crash_leader", "at": 150, "layer": "{layer}", "restart_after": 200}}"#),
        2 => format!(r#"{{"kind": "crash_leader", "at": 150, "layer": "{layer}"}}"#),
        _ => {
            let minority: Vec<String> = (0..(n - 1) / 2).map(|i| i.to_string()).collect();
            format!(r#"{{"kind": "partition", "nodes": [{}], "from": 120, "to": 700}}"#, minority.join(", "))
        }
    }
}

fn safety_config(topology: &str, layer: &str, n: usize, drop: f64, fault: usize) -> ScenarioConfig {
    let mut faults = vec![format!(r#"{{"kind": "drop_rate", "probability": {drop}}}"#)];
    let f = fault_json(fault, n, layer);
    if !f.is_empty() {
        faults.push(f);
    }
    ScenarioConfig::from_json(&format!(
        r#"{{"nodes": {n}, "topology": {topology}, "workload": {{"count": 8, "interval": 25}},
            "faults": [{}], "horizon": 6000}}"#,
        faults.join(", ")
    ))
    .expect("safety scenario is valid")
}

fn criterion_1() -> Verdict {
    let drops = [0.0, 0.05, 0.2];
    let flat = [(Protocol::LhRaft, "leaf"), (Protocol::LhRaft, "top"), (Protocol::Raft, "leaf")];
    let sizes = [5, 7, 9, 12];
    let mut runs = 0usize;
    let mut violations: BTreeMap<String, usize> = BTreeMap::new();
    let mut incomplete = 0usize;
    let mut tally = |out: lhraft::sim::runner::RunOutput, want: u64| {
        runs += 1;
        if out.metrics.committed_tx < want {
            incomplete += 1;
        }
        for v in &out.violations {
            *violations.entry(v.kind.as_str().to_owned()).or_default() += 1;
        }
    };
    for &drop in &drops {
        for fault in 0..4 {
            for &(protocol, layer) in &flat {
                for seed in 1..=28u64 {
                    let n = sizes[seed as usize % sizes.len()];
                    let topology = format!(r#"{{"kind": "single", "layer": "{layer}"}}"#);
                    let cfg = safety_config(&topology, layer, n, drop, fault);
                    tally(run(&cfg, protocol, n, seed, &RunHooks::default()).unwrap(), 8);
                }
            }
        }
        for seed in 1..=3u64 {
            let topology = r#"{"kind": "hierarchy", "leaf_regions": 4, "middle_groups": 2}"#;
            let cfg = safety_config(topology, "leaf", 40, drop, (seed as usize) % 4);
            tally(run(&cfg, Protocol::LhRaft, 40, seed, &RunHooks::default()).unwrap(), 8);
        }
    }

    // A node that grants every vote must be caught once elections contend.
    let canary_cases = [
        (Protocol::Raft, 5, r#"{"nodes": 5, "faults": [{"kind": "drop_rate", "probability": 0.2}]}"#),
        (
            Protocol::LhRaft,
            8,
            r#"{"nodes": 8, "workload": {"count": 20, "interval": 20},
                "faults": [{"kind": "crash_leader", "at": 100, "restart_after": 100}]}"#,
        ),
    ];
    let mut canary_runs = 0;
    let mut canary_flagged = 0;
    for (protocol, n, json) in canary_cases {
        let cfg = ScenarioConfig::from_json(json).unwrap();
        let hooks = RunHooks { canary: (0..n as u32).map(NodeId).collect(), trace: false };
        for seed in 1..=10 {
            canary_runs += 1;
            if !run(&cfg, protocol, n, seed, &hooks).unwrap().violations.is_empty() {
                canary_flagged += 1;
            }
        }
    }

    let pass = runs >= 1000 && violations.is_empty() && canary_flagged > 0;
    verdict(
        pass,
        format!(
            "{runs} runs, violations {violations:?}, {incomplete} runs left transactions uncommitted; \
             canary flagged {canary_flagged}/{canary_runs}"
        ),
    )
}

// ---- 2: CGF optimality ----

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cases = 0;
    let mut mismatches = Vec::new();
    for n in 1..=12usize {
        for m in 1..=n {
            for _ in 0..50 {
                let scores: Vec<NodeScore> =
                    (0..n).map(|i| NodeScore::from_cgf(NodeId(i as u32), rng.gen::<f64>())).collect();
                let fast: BTreeSet<NodeId> = solve_cgf(&scores, m).unwrap().members.into_iter().collect();
                let exact: BTreeSet<NodeId> = brute_force_cgf(&scores, m).unwrap().members.into_iter().collect();
                cases += 1;
                if fast != exact {
                    mismatches.push((n, m));
                }
            }
        }
    }
    verdict(mismatches.is_empty(), format!("{cases} instances, {} set mismatches {mismatches:?}", mismatches.len()))
}

// ---- 3: CGF scaling ----

fn criterion_3() -> Verdict {
    let small = cgf_runtime_probe(2000, 20, 101, 3).unwrap();
    let large = cgf_runtime_probe(10_000, 20, 101, 3).unwrap();
    let ratio = large.as_secs_f64() / small.as_secs_f64();
    verdict(ratio <= 7.0, format!("median {small:?} at n=2000, {large:?} at n=10000, ratio {ratio:.2} (limit 7)"))
}

// ---- 4: threshold truth table and soundness ----

fn keys_for(pairs: &[KeyPair]) -> BTreeMap<NodeId, VerifyKey> {
    pairs.iter().map(|kp| (kp.node, kp.verify_key)).collect()
}

/// A signature claiming `digest_of` that was produced over `other`.
fn forged(params: &SystemParams, kp: &KeyPair, digest_of: &[u8], other: &[u8]) -> OneTimeSignature {
    let mut s = sign(params, kp, other).unwrap();
    s.message_digest = MessageDigest::of(digest_of);
    s
}

fn criterion_4() -> Verdict {
    let params = SystemParams::setup(4).unwrap();
    let pairs: Vec<KeyPair> = (0..5).map(|i| KeyPair::generate(&params, NodeId(i), 4)).collect();
    let keys = keys_for(&pairs);
    let msg = b"leader 3 of leaf-0 at term 9";
    let valid: Vec<OneTimeSignature> = pairs.iter().map(|kp| sign(&params, kp, msg).unwrap()).collect();
    let invalid: Vec<OneTimeSignature> = pairs.iter().map(|kp| forged(&params, kp, msg, b"something else")).collect();

    let mut table_errors = Vec::new();
    for pattern in 0u32..32 {
        let sigs: Vec<OneTimeSignature> =
            (0..5).map(|i| if pattern & (1 << i) != 0 { valid[i] } else { invalid[i] }).collect();
        let good = pattern.count_ones() as usize;
        for t in 1..=5 {
            let out = verify_threshold(&params, &sigs, &keys, ThresholdPolicy::new(t, 5).unwrap()).unwrap();
            if out.accepted != (good >= t) || out.k != good {
                table_errors.push((pattern, t));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let single = ThresholdPolicy::new(1, 5).unwrap();
    let mut accepted = 0;
    for _ in 0..1000 {
        let i = rng.gen_range(0..5usize);
        let kp = &pairs[i];
        let good = valid[i];
        let tampered = match rng.gen_range(0..5) {
            0 => Some(forged(&params, kp, msg, &rng.gen::<[u8; 16]>())),
            // Another node's valid signature presented under this node's id.
            1 => Some(OneTimeSignature { node: kp.node, ..valid[(i + rng.gen_range(1..5)) % 5] }),
            2 => {
                let mut d = good.message_digest;
                d.0[rng.gen_range(0..32)] ^= 1 << rng.gen_range(0..8);
                Some(OneTimeSignature { message_digest: d, ..good })
            }
            // A flipped σ byte that no longer decodes is rejected before verification.
            3 => {
                let mut bytes = good.sigma_bytes();
                bytes[rng.gen_range(1..48)] ^= 1 << rng.gen_range(0..8);
                OneTimeSignature::from_parts(kp.node, &bytes, good.message_digest)
            }
            _ => Some(OneTimeSignature { node: kp.node, ..sign(&params, &pairs[(i + 1) % 5], msg).unwrap() }),
        };
        if tampered.is_some_and(|sig| verify_threshold(&params, &[sig], &keys, single).unwrap().accepted) {
            accepted += 1;
        }
    }
    verdict(
        table_errors.is_empty() && accepted == 0,
        format!("160 truth-table cells, {} wrong; 1000 tamperings, {accepted} accepted", table_errors.len()),
    )
}

// ---- 5 to 8: figure series ----

struct Figures {
    fig5: Vec<HashMap<String, String>>,
    fig7: Vec<HashMap<String, String>>,
    fig8: Vec<HashMap<String, String>>,
    fig11: Vec<HashMap<String, String>>,
    _dir: tempfile::TempDir,
}

fn read_rows(path: &Path) -> Vec<HashMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| headers.iter().zip(rec.unwrap().iter()).map(|(h, v)| (h.to_owned(), v.to_owned())).collect())
        .collect()
}

fn num(row: &HashMap<String, String>, col: &str) -> Option<f64> {
    row.get(col).and_then(|v| v.parse().ok())
}

/// Which protocols each scenario file is swept with. Classical rows come
/// from one file per figure so they are not averaged in twice.
const FIGURE_SWEEPS: [(&str, &[Protocol]); 8] = [
    ("fig5_leaf.json", &[Protocol::LhRaft, Protocol::Raft]),
    ("fig5_middle.json", &[Protocol::LhRaft]),
    ("fig5_top.json", &[Protocol::LhRaft]),
    ("fig7_messages.json", &[Protocol::LhRaft]),
    ("fig8_10_leaf.json", &[Protocol::LhRaft, Protocol::Raft]),
    ("fig8_10_middle.json", &[Protocol::LhRaft]),
    ("fig8_10_top.json", &[Protocol::LhRaft]),
    ("fig11_sensitivity.json", &[Protocol::LhRaft, Protocol::Raft]),
];

fn build_figures() -> Figures {
    let dir = tempfile::tempdir().unwrap();
    for (file, protocols) in FIGURE_SWEEPS {
        let t = Instant::now();
        let rows = bench::sweep(&load(file), protocols).unwrap();
        let stem = file.trim_end_matches(".json");
        bench::write_csv(&dir.path().join(format!("{stem}.csv")), &rows).unwrap();
        say(&format!("  swept {file}: {} runs in {:.1?}", rows.len(), t.elapsed()));
    }
    let report = bench::figures(dir.path()).unwrap();
    assert!(report.missing.is_empty(), "missing series {:?}", report.missing);
    let fig = |name: &str| read_rows(&dir.path().join("figures").join(format!("{name}.csv")));
    Figures { fig5: fig(FIG5), fig7: fig(FIG7), fig8: fig(FIG8_10), fig11: fig(FIG11), _dir: dir }
}

fn spread(xs: &[f64]) -> f64 {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (hi - lo) / lo
}

fn strictly_increasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] > w[0])
}

fn criterion_5(f: &Figures) -> Verdict {
    let at = |n: usize| f.fig5.iter().find(|r| num(r, "n") == Some(n as f64)).expect("n present");
    let r100 = at(100);
    let (leaf_ratio, top_ratio) = (num(r100, "leaf_ratio").unwrap(), num(r100, "top_ratio").unwrap());
    let plateau_rows: Vec<_> = f.fig5.iter().filter(|r| num(r, "n").is_some_and(|n| n >= 80.0)).collect();
    let spreads: Vec<(&str, f64)> = ["leaf_bytes", "middle_bytes", "top_bytes"]
        .into_iter()
        .map(|col| (col, spread(&plateau_rows.iter().map(|r| num(r, col).unwrap()).collect::<Vec<_>>())))
        .collect();
    let raft: Vec<f64> = f.fig5.iter().map(|r| num(r, "raft_bytes").unwrap()).collect();
    let uncommitted: f64 = f.fig5.iter().filter_map(|r| num(r, "uncommitted_runs")).sum();
    let pass = leaf_ratio <= 0.10
        && top_ratio <= 0.30
        && spreads.iter().all(|&(_, s)| s < 0.05)
        && strictly_increasing(&raft)
        && uncommitted == 0.0;
    let spread_text: Vec<String> = spreads.iter().map(|(c, s)| format!("{c} {:.1}%", s * 100.0)).collect();
    verdict(
        pass,
        format!(
            "n=100 leaf {:.2}% (limit 10%), top {:.2}% (limit 30%); plateau n>=80: {}; classical increasing: {}; \
             uncommitted runs {uncommitted}",
            leaf_ratio * 100.0,
            top_ratio * 100.0,
            spread_text.join(", "),
            strictly_increasing(&raft)
        ),
    )
}

fn criterion_6(f: &Figures) -> Verdict {
    let leaf_cap = 20.0;
    let above: Vec<_> = f.fig7.iter().filter(|r| num(r, "n").unwrap() > leaf_cap).collect();
    let ordering = above.iter().all(|r| num(r, "leader_notification") < num(r, "candidate_notification"));
    let col =
        |c: &str| -> (f64, f64) { (num(f.fig7.first().unwrap(), c).unwrap(), num(f.fig7.last().unwrap(), c).unwrap()) };
    let (cs0, cs1) = col("candidate_selection");
    let (ls0, ls1) = col("leader_selection");
    let (cs_growth, ls_growth) = (cs1 / cs0, ls1 / ls0);
    let slower = cs_growth < ls_growth;
    verdict(
        ordering && slower,
        format!(
            "leader notification < candidate notification for n>c: {ordering}; across n=20..100 candidate selection \
             grows {cs_growth:.2}x ({cs0:.0} to {cs1:.0}), leader selection {ls_growth:.2}x ({ls0:.0} to {ls1:.0})"
        ),
    )
}

fn criterion_7(f: &Figures) -> Verdict {
    let caps = [("leaf", 20.0), ("middle", 40.0), ("top", 80.0)];
    let mut flat = true;
    let mut notes = Vec::new();
    for (col, cap) in caps {
        let xs: Vec<f64> = f.fig8.iter().filter(|r| num(r, "n").unwrap() > cap).filter_map(|r| num(r, col)).collect();
        if xs.len() >= 2 {
            let s = spread(&xs);
            flat &= s <= 0.10;
            notes.push(format!("{col} spread {:.1}%", s * 100.0));
        }
    }
    let raft: Vec<f64> = f.fig8.iter().map(|r| num(r, "raft").unwrap()).collect();
    let increasing = strictly_increasing(&raft);
    let at = |n: f64, col: &str| f.fig8.iter().find(|r| num(r, "n") == Some(n)).and_then(|r| num(r, col)).unwrap();
    // Leaf cap 20 against a classical group of cr = 2c = 40 candidates.
    let ratio = at(40.0, "raft") / at(20.0, "leaf");
    verdict(
        flat && increasing && ratio >= 1.5,
        format!(
            "LH flat above cap (10% band): {} ; classical {:?} increasing: {increasing}; classical(n=40)/LH(n=20) = {ratio:.2} (limit 1.5)",
            notes.join(", "),
            raft.iter().map(|x| (x * 10.0).round() / 10.0).collect::<Vec<_>>()
        ),
    )
}

fn criterion_8(f: &Figures) -> Verdict {
    let mut by_n: BTreeMap<u64, (String, Option<f64>, Option<f64>)> = BTreeMap::new();
    for r in &f.fig11 {
        let e = by_n.entry(num(r, "n").unwrap() as u64).or_default();
        e.0 = r["c_over_n"].clone();
        match r["protocol"].as_str() {
            "raft" => e.1 = num(r, "latency"),
            _ => e.2 = num(r, "latency"),
        }
    }
    let ratios: Vec<(String, f64)> =
        by_n.into_values().map(|(label, raft, lh)| (label, raft.unwrap() / lh.unwrap())).collect();
    let labels: Vec<&str> = ratios.iter().map(|(l, _)| l.as_str()).collect();
    let expected = ["1/2", "1/4", "1/8", "1/16", "1/32", "1/64"];
    let values: Vec<f64> = ratios.iter().map(|&(_, r)| r).collect();
    let text: Vec<String> = ratios.iter().map(|(l, r)| format!("{l}: {r:.2}")).collect();
    verdict(labels == expected && strictly_increasing(&values), format!("classical/LH ratio {}", text.join(", ")))
}

// ---- 9: signature benchmark ----

fn criterion_9() -> Verdict {
    let b = bench::crypto_bench(&[4, 8, 12, 16, 20], 5).unwrap();
    let r2: Vec<String> = b.r_squared.iter().map(|(p, r)| format!("{p:?} {r:.4}")).collect();
    let verify_slower = b.by_length.iter().all(|r| r.verify_ms > r.sign_ms);
    let lengths: Vec<String> = b
        .by_length
        .iter()
        .map(|r| format!("{} B sign {:.3} ms verify {:.3} ms", r.message_bytes, r.sign_ms, r.verify_ms))
        .collect();
    let spread = b.length_spread();
    verdict(
        b.linear(0.95) && verify_slower && spread < 0.2,
        format!("R² {}; {}; length spread {:.1}% (limit 20%)", r2.join(", "), lengths.join(", "), spread * 100.0),
    )
}

// ---- 10: determinism ----

fn metrics_bytes(rows: &[RunMetrics], dir: &Path, name: &str) -> Vec<u8> {
    let path = dir.join(format!("{name}.csv"));
    bench::write_csv(&path, rows).unwrap();
    std::fs::read(path).unwrap()
}

fn criterion_10() -> Verdict {
    let mut hierarchy = load("hierarchy.json");
    hierarchy.seeds = vec![1, 2];
    let faulty = ScenarioConfig::from_json(
        r#"{"name": "faulty", "nodes": [12, 30], "topology": {"kind": "single", "layer": "top"},
            "workload": {"count": 10, "interval": 20}, "seeds": [1, 2, 3],
            "faults": [{"kind": "drop_rate", "probability": 0.05}, {"kind": "tamper_signature", "node": 3},
                       {"kind": "crash_leader", "at": 300, "layer": "top", "restart_after": 200}]}"#,
    )
    .unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut identical = true;
    let mut compared = 0;
    for (name, cfg) in [("hierarchy", &hierarchy), ("faulty", &faulty)] {
        let both = [Protocol::LhRaft, Protocol::Raft];
        let first = metrics_bytes(&bench::sweep(cfg, &both).unwrap(), a.path(), name);
        let second = metrics_bytes(&bench::sweep(cfg, &both).unwrap(), b.path(), name);
        identical &= first == second;
        compared += first.len();
    }
    verdict(identical, format!("two sweeps of 2 scenarios, {compared} CSV bytes, identical: {identical}"))
}

#[test]
fn acceptance_criteria() {
    let mut failed = Vec::new();
    let mut report = |id: u8, name: &str, v: Verdict, started: Instant| {
        let status = if v.pass { "PASS" } else { "FAIL" };
        say(&format!("criterion {id} ({name}): {status} [{:.1?}] {}", started.elapsed(), v.detail));
        if !v.pass {
            failed.push(id);
        }
    };
    let t = Instant::now();
    report(1, "safety suite", criterion_1(), t);
    let t = Instant::now();
    report(2, "cgf optimality", criterion_2(), t);
    let t = Instant::now();
    report(3, "cgf scaling", criterion_3(), t);
    let t = Instant::now();
    report(4, "threshold truth table", criterion_4(), t);
    let figures = build_figures();
    let t = Instant::now();
    report(5, "communication cost", criterion_5(&figures), t);
    report(6, "message phases", criterion_6(&figures), t);
    report(7, "latency trend", criterion_7(&figures), t);
    report(8, "sensitivity", criterion_8(&figures), t);
    let t = Instant::now();
    report(9, "crypto bench", criterion_9(), t);
    let t = Instant::now();
    report(10, "determinism", criterion_10(), t);
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
