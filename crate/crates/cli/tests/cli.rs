use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn censusdp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_censusdp"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn censusdp")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Schema, tree, a 600-record population and a 2-way query set.
fn fixture() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(
        p.join("schema.json"),
        r#"[{"name":"sex","domain_size":2},{"name":"age","domain_size":4},{"name":"tenure","domain_size":3}]"#,
    )
    .unwrap();
    fs::write(p.join("tree.json"), r#"{"balanced":{"root":"US","branching":[3,2]}}"#).unwrap();
    ok(&censusdp(
        &["genpop", "--seed", "4", "--n", "600", "--schema", "schema.json", "--tree", "tree.json", "--out", "pop.csv"],
        p,
    ));
    ok(&censusdp(
        &["queries", "--schema", "schema.json", "--k", "2", "--in", "6", "--out", "4", "--seed", "1",
          "--out-in", "qin.json", "--out-out", "qout.json"],
        p,
    ));
    dir
}

const DATA: [&str; 6] = ["--population", "pop.csv", "--schema", "schema.json", "--tree", "tree.json"];

fn with_data<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(DATA.iter()).chain(tail).copied().collect()
}

#[test]
fn genpop_writes_header_and_rows() {
    let dir = fixture();
    let text = fs::read_to_string(dir.path().join("pop.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "sex,age,tenure,region");
    assert_eq!(lines.count(), 600);
}

#[test]
fn genpop_is_deterministic() {
    let dir = fixture();
    let p = dir.path();
    ok(&censusdp(
        &["genpop", "--seed", "4", "--n", "600", "--schema", "schema.json", "--tree", "tree.json", "--out", "again.csv"],
        p,
    ));
    assert_eq!(fs::read(p.join("pop.csv")).unwrap(), fs::read(p.join("again.csv")).unwrap());
}

#[test]
fn query_sets_are_disjoint() {
    let dir = fixture();
    let qin: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("qin.json")).unwrap()).unwrap();
    let qout: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("qout.json")).unwrap()).unwrap();
    let (qin, qout) = (qin.as_array().unwrap(), qout.as_array().unwrap());
    assert_eq!((qin.len(), qout.len()), (6, 4));
    assert!(qin.iter().all(|q| !qout.contains(q)));
}

#[test]
fn topdown_release_passes_validation() {
    let dir = fixture();
    let p = dir.path();
    let out = censusdp(
        &with_data(&["topdown"], &["--queries", "qin.json", "--epsilon", "0.5", "--seed", "3", "--out", "td.csv", "--constraint-report"]),
        p,
    );
    ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["consistency", "validity", "faithfulness", "root_invariant"] {
        assert_eq!(report[key], 0, "{key} in {report}");
    }
    ok(&censusdp(&with_data(&["evaluate"], &["--queries", "qin.json", "--out", "truth.csv"]), p));
    ok(&censusdp(&["validate", "--table", "td.csv", "--tree", "tree.json", "--truth", "truth.csv"], p));
}

#[test]
fn validate_flags_inconsistent_tables() {
    let dir = fixture();
    let p = dir.path();
    ok(&censusdp(&with_data(&["evaluate"], &["--queries", "qin.json", "--out", "truth.csv"]), p));
    let text = fs::read_to_string(p.join("truth.csv")).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    // Bump one leaf count so its parent no longer sums.
    let last = lines.last_mut().unwrap();
    let (head, value) = last.rsplit_once(',').unwrap();
    *last = format!("{head},{}", value.parse::<f64>().unwrap() + 1.0);
    fs::write(p.join("bad.csv"), lines.join("\n") + "\n").unwrap();
    let out = censusdp(&["validate", "--table", "bad.csv", "--tree", "tree.json"], p);
    assert_eq!(out.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["consistency"].as_u64().unwrap() >= 1, "{report}");
}

#[test]
fn synthesizers_write_populations() {
    let dir = fixture();
    let p = dir.path();
    ok(&censusdp(&with_data(&["synth"], &["--algorithm", "mst", "--epsilon", "1", "--seed", "2", "--out", "mst.csv", "--model", "mst.json"]), p));
    ok(&censusdp(
        &with_data(
            &["synth"],
            &["--algorithm", "hpd-fixed", "--epsilon", "1", "--seed", "2", "--queries", "qin.json", "--out", "hpd.csv",
              "--measurements", "log.csv"],
        ),
        p,
    ));
    for f in ["mst.csv", "hpd.csv"] {
        let text = fs::read_to_string(p.join(f)).unwrap();
        assert_eq!(text.lines().next().unwrap(), "sex,age,tenure,region");
        assert_eq!(text.lines().count(), 601, "{f}");
    }
    let log = fs::read_to_string(p.join("log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "round,query_id,region_id,noisy_answer,epsilon_spent,delta_spent");
    assert!(p.join("mst.json").exists());
}

#[test]
fn hpd_without_queries_is_an_error() {
    let dir = fixture();
    let out = censusdp(&with_data(&["synth"], &["--algorithm", "hpd-fixed", "--epsilon", "1", "--seed", "2", "--out", "x.csv"]), dir.path());
    assert_eq!(out.status.code(), Some(2));
}

const SMALL_CONFIG: &str = r#"{
  "dataset": {"generate": {"seed": 5, "n": 500,
    "schema": [{"name":"a","domain_size":2},{"name":"b","domain_size":3},{"name":"c","domain_size":2}],
    "tree": {"balanced": {"root": "R", "branching": [2, 2]}}}},
  "algorithms": ["topdown", "mst", "hpd-fixed"],
  "epsilons": [0.5, 2.0],
  "k_values": [1, 2],
  "query_counts": {"1": {"in": 3, "out": 3}, "2": {"in": 5, "out": 5}},
  "repetitions": 2,
  "base_seed": 9,
  "output_dir": "out",
  "hpd": {"rounds": 5, "components": 4}
}"#;

#[test]
fn run_writes_outputs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("config.json"), SMALL_CONFIG).unwrap();
    let first = censusdp(&["run", "--config", "config.json"], p);
    ok(&first);
    let stdout = String::from_utf8_lossy(&first.stdout);
    assert!(stdout.starts_with("24 runs, 0 failed, 0 constraint violations"), "{stdout}");
    let results = fs::read(p.join("out/results.csv")).unwrap();
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(p.join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["failures"].as_array().unwrap().len(), 0);
    assert!(p.join("out/cdf/topdown_eps0.5_k2_in.csv").exists());

    ok(&censusdp(&["run", "--config", "config.json"], p));
    assert_eq!(results, fs::read(p.join("out/results.csv")).unwrap());
}

#[test]
fn run_rejects_unknown_config_fields() {
    let dir = tempfile::tempdir().unwrap();
    let bad = SMALL_CONFIG.replacen("\"repetitions\"", "\"repetition_count\"", 1);
    fs::write(dir.path().join("config.json"), bad).unwrap();
    let out = censusdp(&["run", "--config", "config.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
