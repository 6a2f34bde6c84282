use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lhraft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lhraft")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn run_writes_one_row_per_protocol_size_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "sweep.json",
        r#"{"name": "sweep", "nodes": {"from": 20, "to": 100, "step": 20}, "seeds": [1, 2]}"#,
    );
    let out = tmp.path().join("nested/out");
    let o = lhraft(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--protocol", "both"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep.seeds-1-2.csv")).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("scenario,protocol,topology,n,c,seed,"));
    assert_eq!(lines.count(), 2 * 5 * 2);
    assert!(out.join("sweep.seeds-1-2.summary.txt").exists());
}

#[test]
fn seed_override_and_single_protocol() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "one.json", r#"{"nodes": 10}"#);
    let out = tmp.path().join("out");
    let o = lhraft(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--protocol", "raft", "--seeds", "4..6"]);
    assert!(o.status.success());
    let csv = fs::read_to_string(out.join("one.raft.seeds-4-6.csv")).unwrap();
    let seeds: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(5).unwrap()).collect();
    assert_eq!(seeds, ["4", "5", "6"]);
}

#[test]
fn bad_config_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.json", r#"{"nodes": 10, "weights": {"alpha": -1.0, "beta": 0.5}}"#);
    let o = lhraft(&["run", "--config", &cfg, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("weights"), "{err}");

    let cfg = write(tmp.path(), "typo.json", r#"{"nodez": 10}"#);
    let o = lhraft(&["run", "--config", &cfg, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nodez"));
}

#[test]
fn figures_on_empty_dir_lists_every_series() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lhraft(&["figures", "--metrics", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    for s in ["fig5_commcost", "fig7_messages", "fig8_10_latency", "fig11_sensitivity"] {
        assert!(err.contains(s), "{err}");
    }
}

#[test]
fn figures_write_partial_output_idempotently() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "msgs.json", r#"{"name": "fig7_messages", "nodes": [20, 40], "seeds": [1]}"#);
    let metrics = tmp.path().join("metrics");
    let m = metrics.to_str().unwrap();
    assert!(lhraft(&["run", "--config", &cfg, "--out", m, "--protocol", "lhraft"]).status.success());
    let o = lhraft(&["figures", "--metrics", m]);
    assert_eq!(o.status.code(), Some(1));
    let fig = metrics.join("figures/fig7_messages.csv");
    let first = fs::read(&fig).unwrap();
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 3);
    lhraft(&["figures", "--metrics", m]);
    assert_eq!(fs::read(&fig).unwrap(), first);
}

#[test]
fn crypto_bench_emits_three_phases_per_node_count() {
    let o = Command::new(env!("CARGO_BIN_EXE_lhraft"))
        .args(["crypto-bench", "--nodes", "2,4", "--reps", "1"])
        .env("LHRAFT_LOG", "trace")
        .output()
        .unwrap();
    assert_ne!(o.status.code(), Some(2));
    let out = String::from_utf8_lossy(&o.stdout);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("nodes,phase,total_ms,per_node_ms"));
    let phases: Vec<&str> = lines.map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(phases, ["keygen", "sign", "verify", "keygen", "sign", "verify"]);
}
