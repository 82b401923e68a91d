use std::path::Path;
use std::process::{Command, Output};

use dimsum::imputers::{BridgeImputer, Imputer, LinearImputer};
use dimsum::ingest::{gen_mcar, gen_synthetic, SyntheticSpec};
use dimsum::{RunSeed, SeriesWindow};

const DIMSUM: &str = env!("CARGO_BIN_EXE_dimsum");
const BRIDGE: &str = env!("CARGO_BIN_EXE_dimsum-bridge-builtin");

fn dimsum(args: &[&str], cwd: &Path) -> Output {
    Command::new(DIMSUM)
        .args(args)
        .current_dir(cwd)
        .env_remove("DIMSUM_THREADS")
        .output()
        .expect("spawn dimsum")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn bridge_cmd(spec: &str) -> String {
    format!("'{BRIDGE}' {spec}")
}

fn seeded_windows(n: usize, w: usize, seed: u64) -> Vec<SeriesWindow> {
    let corpus = gen_synthetic(&SyntheticSpec::three_patterns(n, w), RunSeed(seed)).unwrap();
    gen_mcar(&corpus.windows, 0.3, RunSeed(seed + 1)).unwrap()
}

#[test]
fn bridged_linear_matches_builtin() {
    let train = seeded_windows(20, 96, 1);
    let windows = seeded_windows(100, 96, 2);
    let mut local = LinearImputer::new();
    local.fit(&train, RunSeed(0)).unwrap();
    let mut remote = BridgeImputer::new(bridge_cmd("linear"), 16);
    remote.fit(&train, RunSeed(0)).unwrap();
    let a = local.impute_batch(&windows).unwrap();
    let b = remote.impute_batch(&windows).unwrap();
    assert_eq!(a.len(), 100);
    for (x, y) in a.iter().zip(&b) {
        let xb: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u64> = y.iter().map(|v| v.to_bits()).collect();
        assert_eq!(xb, yb);
    }
}

#[test]
fn bridge_reports_not_fitted() {
    let remote = BridgeImputer::new(bridge_cmd("mean"), 4);
    let err = remote.impute(&seeded_windows(1, 8, 3)[0]).unwrap_err();
    assert!(err.to_string().contains("before fit"), "{err}");
}

#[test]
fn unknown_bridge_spec_exits_2() {
    let out = Command::new(BRIDGE).arg("nope").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

fn synth(dir: &Path, n: &str, w: &str) {
    ok(&dimsum(
        &[
            "synth",
            "--output",
            "data.csv",
            "--n-series",
            n,
            "--w",
            w,
            "--seed",
            "4",
        ],
        dir,
    ));
}

#[test]
fn full_chain_through_bridge() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "600", "32");
    let imputer = format!("bridge:{}", bridge_cmd("linear"));
    let out = dimsum(
        &[
            "run",
            "--input",
            "data.csv",
            "--w",
            "32",
            "--k-max",
            "5",
            "--out",
            "out",
            "--imputer",
            &imputer,
        ],
        dir.path(),
    );
    ok(&out);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/report.json")).unwrap())
            .unwrap();
    assert!(report["data"]["imputer"]
        .as_str()
        .unwrap()
        .starts_with("bridge:"));
    assert!(report["data"]["training_windows"].as_u64().unwrap() > 0);
}

#[test]
fn empty_input_dir_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("empty")).unwrap();
    let out = dimsum(
        &["preprocess", "--input", "empty", "--out", "out"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no series"));
}

#[test]
fn missing_upstream_names_command() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "50", "16");
    let out = dimsum(
        &[
            "cluster", "--input", "data.csv", "--w", "16", "--out", "out",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimsum preprocess"));
}

#[test]
fn bad_flag_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dimsum(&["cluster", "--no-such-flag"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stages_resume_from_recorded_config() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "400", "24");
    ok(&dimsum(
        &[
            "preprocess",
            "--input",
            "data.csv",
            "--w",
            "24",
            "--k-max",
            "4",
            "--imputer",
            "mean",
            "--out",
            "o",
        ],
        dir.path(),
    ));
    for stage in ["cluster", "assign", "train", "validate", "report"] {
        ok(&dimsum(&[stage, "--out", "o"], dir.path()));
    }
    assert!(dir.path().join("o/report.csv").exists());
    // A different seed no longer matches the recorded artifacts.
    let out = dimsum(&["train", "--out", "o", "--seed", "99"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rerun"));
}

#[test]
fn reruns_and_thread_counts_agree() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "500", "32");
    let run = |out: &str, threads: &str| {
        ok(&dimsum(
            &[
                "--threads",
                threads,
                "run",
                "--input",
                "data.csv",
                "--w",
                "32",
                "--k-max",
                "5",
                "--imputer",
                "ridge",
                "--out",
                out,
            ],
            dir.path(),
        ));
    };
    run("a", "1");
    run("b", "4");
    run("c", "1");
    for name in [
        "windows.jsonl",
        "clusters.json",
        "assignment.json",
        "train.json",
        "pac.json",
        "report.json",
        "report.csv",
    ] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        assert_eq!(
            a,
            std::fs::read(dir.path().join("b").join(name)).unwrap(),
            "{name}"
        );
        assert_eq!(
            a,
            std::fs::read(dir.path().join("c").join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn csv_preprocess_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    // 10 series of 100 readings: 1000 rows.
    ok(&dimsum(
        &[
            "synth",
            "--output",
            "wd.csv",
            "--n-series",
            "10",
            "--windows-per-series",
            "1",
            "--w",
            "100",
            "--seed",
            "2",
        ],
        dir.path(),
    ));
    let rows = std::fs::read_to_string(dir.path().join("wd.csv"))
        .unwrap()
        .lines()
        .count()
        - 1;
    assert_eq!(rows, 1000);
    ok(&dimsum(
        &[
            "preprocess",
            "--input",
            "wd.csv",
            "--w",
            "50",
            "--out",
            "p1",
        ],
        dir.path(),
    ));
    ok(&dimsum(
        &[
            "preprocess",
            "--input",
            "wd.csv",
            "--w",
            "50",
            "--out",
            "p2",
        ],
        dir.path(),
    ));
    for name in ["windows.jsonl", "corpus_stats.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("p1").join(name)).unwrap(),
            std::fs::read(dir.path().join("p2").join(name)).unwrap()
        );
    }
}

#[test]
fn mask_injects_gaps() {
    let dir = tempfile::tempdir().unwrap();
    ok(&dimsum(
        &[
            "synth",
            "--output",
            "c.csv",
            "--n-series",
            "20",
            "--w",
            "96",
            "--missing",
            "none",
        ],
        dir.path(),
    ));
    ok(&dimsum(
        &[
            "mask", "--input", "c.csv", "--output", "m.csv", "--kind", "mcar", "--rate", "0.2",
            "--seed", "1",
        ],
        dir.path(),
    ));
    let text = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    let gaps = rows.iter().filter(|r| r.ends_with(',')).count();
    assert_eq!(rows.len(), 20 * 96);
    let rate = gaps as f64 / rows.len() as f64;
    assert!((rate - 0.2).abs() < 0.05, "{rate}");
    ok(&dimsum(
        &[
            "mask",
            "--input",
            "m.csv",
            "--output",
            "t.csv",
            "--kind",
            "mnar-burst",
            "--rate",
            "0.1",
        ],
        dir.path(),
    ));
}

#[test]
fn documented_session_is_byte_exact() {
    use std::io::Write;
    let doc = include_str!("../../../docs/bridge_protocol.md");
    let lines: Vec<&str> = doc
        .lines()
        .filter(|l| {
            l.strip_prefix("{\"id\":")
                .is_some_and(|r| r.starts_with(|c: char| c.is_ascii_digit()))
        })
        .collect();
    let (requests, responses) = lines.split_at(lines.len() / 2);
    let mut child = Command::new(BRIDGE)
        .arg("linear")
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    for r in requests {
        writeln!(stdin, "{r}").unwrap();
    }
    drop(stdin);
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let got = String::from_utf8(out.stdout).unwrap();
    assert_eq!(got.lines().collect::<Vec<_>>(), responses);
}
