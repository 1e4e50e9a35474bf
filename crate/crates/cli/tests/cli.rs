use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chrono::Duration;
use ideaforest_cli::analyze::{CDF_HEADER, CORRELATIONS_HEADER, DIVERSITY_HEADER, METRICS_HEADER, TIME_HEADER};
use ideaforest_cli::manifest::RunManifest;
use ideaforest_core::model::{ExecStatus, ExecutionOutcome, NodeId, Operator, SolutionNode, SolutionTree};
use ideaforest_core::search::logical_epoch;
use ideaforest_core::taskenv::{synthetic_task_pack, write_task_definitions};
use ideaforest_core::trajectory::TrajectoryWriter;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ideaforest"))
}

fn demo_script() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/scripts/demo.json")
}

fn demo_config(dir: &Path, tasks: &[&str], extra: &str) -> PathBuf {
    let ids: Vec<String> = tasks.iter().map(|t| format!("\"{t}\"")).collect();
    let text = format!(
        r#"agent = "demo"
seeds = [0, 1]

[scaffold]
kind = "greedy"

[backend]
kind = "scripted"
script = "{}"

[budget]
max_nodes = 8
per_node_exec_limit_s = 30

[tasks]
ids = [{}]
{extra}"#,
        demo_script().display(),
        ids.join(", ")
    );
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn exec(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn run_writes_one_log_per_unit_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = demo_config(dir.path(), &["linear-fit", "separable-points"], "");
    let out = dir.path().join("out");
    let o = exec(bin().arg("run").arg(&cfg).arg("--out").arg(&out).args(["--workers", "2"]));
    assert_eq!(o.status.code(), Some(0));
    let manifest = RunManifest::load(&out).unwrap().unwrap();
    assert_eq!(manifest.units.len(), 4);
    assert!(manifest.finished_at.is_some());
    for unit in manifest.units.values() {
        assert!(out.join(&unit.trajectory).is_file());
    }
    let logs: Vec<_> = walk(&out.join("logs"));
    assert_eq!(logs.len(), 4);
    let before = read(out.join(&manifest.units["linear-fit@0"].trajectory));

    let o = exec(bin().arg("run").arg(&cfg).arg("--out").arg(&out));
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 executed, 4 already complete"));
    assert_eq!(read(out.join(&manifest.units["linear-fit@0"].trajectory)), before);
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn changed_config_is_refused_in_the_same_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = demo_config(dir.path(), &["linear-fit"], "");
    let out = dir.path().join("out");
    assert_eq!(exec(bin().arg("run").arg(&cfg).arg("--out").arg(&out)).status.code(), Some(0));
    let cfg = demo_config(dir.path(), &["linear-fit"], "n_teams = 50\n");
    let o = exec(bin().arg("run").arg(&cfg).arg("--out").arg(&out));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("different configuration"));
}

#[test]
fn malformed_config_exits_1_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "agent = \"x\"\n\n[scaffold]\nkind = \"beam\"\n").unwrap();
    let o = exec(bin().arg("run").arg(&cfg).arg("--out").arg(dir.path().join("o")));
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.toml:4:"), "{err}");

    let cfg = demo_config(dir.path(), &["no-such-task"], "");
    let o = exec(bin().arg("run").arg(&cfg).arg("--out").arg(dir.path().join("o")));
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("exp.toml:16:") && err.contains("no-such-task"), "{err}");
}

#[test]
fn unreachable_backend_exits_2() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("remote.toml");
    std::fs::write(
        &cfg,
        format!(
            r#"agent = "remote"
[scaffold]
kind = "greedy"
[backend]
kind = "remote"
model = "m"
url = "http://127.0.0.1:{port}/v1"
retry_base_delay_s = 0.01
[tasks]
ids = ["linear-fit"]
"#
        ),
    )
    .unwrap();
    let o = exec(bin().arg("run").arg(&cfg).arg("--out").arg(dir.path().join("o")));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn partially_aborted_run_exits_3_and_keeps_the_rest() {
    let dir = tempfile::tempdir().unwrap();
    // the demo script has no responses for poly-fit
    let cfg = demo_config(dir.path(), &["linear-fit", "poly-fit"], "");
    let out = dir.path().join("out");
    let o = exec(bin().arg("run").arg(&cfg).arg("--out").arg(&out));
    assert_eq!(o.status.code(), Some(3));
    let m = RunManifest::load(&out).unwrap().unwrap();
    assert!(m.is_completed("linear-fit", 0) && m.is_completed("linear-fit", 1));
    assert!(!m.is_completed("poly-fit", 0));
    assert!(m.units["poly-fit@0"].error.as_deref().unwrap().contains("scripted"));
}

fn node(id: u32, parent: Option<u32>, op: Operator, draft: Option<u8>, plan: &str, score: Option<f64>) -> SolutionNode {
    SolutionNode {
        node_id: NodeId(id),
        parent_id: parent.map(NodeId),
        operator: op,
        draft_index: draft,
        plan: plan.into(),
        code: "print(1)".into(),
        exec: ExecutionOutcome {
            status: if score.is_some() { ExecStatus::Success } else { ExecStatus::Buggy },
            wall_time_s: 10.0,
            log_excerpt: String::new(),
        },
        score,
        created_at: logical_epoch() + Duration::seconds(i64::from(id) * 70),
        finished_at: Some(logical_epoch() + Duration::seconds(i64::from(id) * 70 + 70)),
    }
}

/// Drafts labelled GBDT, GBDT, CNN, Linear: entropy of {2, 1, 1}.
fn fixture_tree(task: &str, best: f64) -> SolutionTree {
    let mut t = SolutionTree::new(task);
    let plans = [
        "Fit a LightGBM regressor on x.",
        "Tune a LightGBM model with more leaves.",
        "A small ResNet over binned features.",
        "Ridge regression on polynomial features.",
    ];
    for (i, p) in plans.iter().enumerate() {
        let score = (i != 2).then_some(best + i as f64);
        t.add_node(node(i as u32, None, Operator::Draft, Some(i as u8 + 1), p, score)).unwrap();
    }
    t.add_node(node(4, Some(2), Operator::Debug, None, "Fix the ResNet input shape.", None))
        .unwrap();
    t
}

fn write_fixture(dir: &Path, runs: &[(&str, u64, f64)]) {
    write_task_definitions(&synthetic_task_pack(), &dir.join("tasks")).unwrap();
    for (agent, seed, best) in runs {
        let w = TrajectoryWriter::create(&dir.join(format!("logs/{agent}-{seed}.jsonl"))).unwrap();
        w.write_tree(&format!("{agent}.s{seed}"), &fixture_tree("linear-fit", *best)).unwrap();
    }
}

#[test]
fn analyze_reports_known_entropy_and_stable_headers() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), &[("solo", 0, 0.01)]);
    let out = dir.path().join("report");
    let o = exec(bin().arg("analyze").arg(dir.path()).arg("--out").arg(&out).args(["--resamples", "200"]));
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("at least 3 agents"));

    let diversity = read(out.join("diversity.csv"));
    let row: Vec<&str> = diversity.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "solo");
    let h: f64 = row[2].parse().unwrap();
    assert!((h - 1.5).abs() < 1e-12, "{h}");
    assert_eq!(row[4], "3");

    for (file, header) in [
        ("diversity.csv", DIVERSITY_HEADER),
        ("metrics.csv", METRICS_HEADER),
        ("correlations.csv", CORRELATIONS_HEADER),
        ("time_accounting.csv", TIME_HEADER),
        ("cdf.csv", CDF_HEADER),
    ] {
        assert_eq!(read(out.join(file)).lines().next(), Some(header), "{file}");
    }
    assert_eq!(read(out.join("correlations.csv")).lines().count(), 1);
    let time = read(out.join("time_accounting.csv"));
    // three successes at 10 s out of five nodes at 10 s
    assert!(time.lines().nth(1).unwrap().ends_with(",10,0.6"), "{time}");
    assert!(read(out.join("diversity_vs_medal_rate.svg")).contains("<circle"));
}

#[test]
fn analyze_is_a_pure_function_of_the_directory() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), &[("a", 0, 0.01), ("b", 0, 0.3), ("c", 0, 2.0), ("a", 1, 0.02)]);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = exec(bin().arg("analyze").arg(dir.path()).arg("--out").arg(&out).args(["--resamples", "300"]));
        assert_eq!(o.status.code(), Some(0));
        out
    };
    let (x, y) = (run("x"), run("y"));
    for f in ["diversity.csv", "metrics.csv", "correlations.csv", "time_accounting.csv", "cdf.csv"] {
        assert_eq!(read(x.join(f)), read(y.join(f)), "{f}");
    }
}

#[test]
fn analyze_without_logs_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = exec(bin().arg("analyze").arg(dir.path()));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no trajectory logs"));
}

#[test]
fn elo_ranks_the_dominant_agent_first() {
    let dir = tempfile::tempdir().unwrap();
    // lower RMSE wins on linear-fit
    write_fixture(dir.path(), &[("strong", 0, 0.01), ("weak", 0, 0.5), ("strong", 1, 0.02), ("weak", 1, 0.6)]);
    let o = exec(bin().arg("elo").arg(dir.path()).arg("--out").arg(dir.path()));
    assert_eq!(o.status.code(), Some(0));
    let csv = read(dir.path().join("elo.csv"));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("agent,rating,n_matches"));
    let rows: Vec<(String, f64)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap())
        })
        .collect();
    let rating = |a: &str| rows.iter().find(|r| r.0 == a).unwrap().1;
    assert!(rating("strong") > rating("weak"));
}

#[test]
fn elo_with_one_agent_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), &[("solo", 0, 0.1), ("solo", 1, 0.2)]);
    let o = exec(bin().arg("elo").arg(dir.path()).arg("--out").arg(dir.path()));
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = exec(
            bin()
                .arg("simulate")
                .arg("--out")
                .arg(&out)
                .args(["--seeds", "20", "--resamples", "200"]),
        );
        assert_eq!(o.status.code(), Some(0));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["metrics.csv", "cdf.csv", "logs/baseline.jsonl", "logs/ablated.jsonl", "scenario.toml"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    let o = exec(bin().arg("simulate").arg("nope.toml").arg("--out").arg(dir.path().join("c")));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn simulated_logs_analyze_to_the_simulator_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let o = exec(
        bin()
            .arg("simulate")
            .arg("--out")
            .arg(&out)
            .args(["--seeds", "30", "--resamples", "300"]),
    );
    assert_eq!(o.status.code(), Some(0));
    let o = exec(bin().arg("analyze").arg(&out).args(["--resamples", "300"]));
    assert_eq!(o.status.code(), Some(0));
    let sorted = |text: String| {
        let mut l: Vec<String> = text.lines().map(String::from).collect();
        l.sort();
        l
    };
    assert_eq!(
        sorted(read(out.join("metrics.csv"))),
        sorted(read(out.join("analysis/metrics.csv")))
    );
}
