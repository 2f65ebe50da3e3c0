use std::process::{Command, Output};

fn rarebench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rarebench"))
        .args(args)
        .env_remove("RAREBENCH_WORKERS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn oracle_prints_expected_return() {
    let o = rarebench(&["oracle", "--x", "10", "--threshold", "10", "--p", "1.0"]);
    assert_eq!(o.status.code(), Some(0));
    let v: f64 = stdout(&o).trim().parse().unwrap();
    assert!((v - 48.05).abs() < 0.01, "{v}");
}

#[test]
fn zero_budget_run_writes_an_empty_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = rarebench(&[
        "run",
        "--set",
        "algorithm=CMAES",
        "--set",
        "episode_budget=0",
        "--set",
        "reeval_episodes=5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let curve = std::fs::read_to_string(out.join("curve.csv")).unwrap();
    assert_eq!(curve.trim(), "episode_index,mean_return,env_steps");
    // the echoed config carries the drawn seed
    assert!(stdout(&o).contains("\"seed\""));
}

#[test]
fn printed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        r#"{"schema_version": 1, "algorithm": "PPO-MLP", "p": 0.5, "episode_budget": 150, "seed": 9, "reeval_episodes": 20}"#,
    )
    .unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = rarebench(&["run", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(
        std::fs::read(a.join("policy.bin")).unwrap(),
        std::fs::read(b.join("policy.bin")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("reeval.csv")).unwrap(),
        std::fs::read(b.join("reeval.csv")).unwrap()
    );
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"algorithm\": \"CMAES\",\n  \"p\": 1.0,,\n}").unwrap();
    let o = rarebench(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));

    let o = rarebench(&["run", "--set", "ppo.no_such_key=1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = rarebench(&["run", "--set", "p=0"]);
    assert_eq!(o.status.code(), Some(1));
    let o = rarebench(&["grid", "--set", "algorithms=[\"PPO-XL\"]"]);
    assert_eq!(o.status.code(), Some(1));
    let o = rarebench(&["no-such-subcommand"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_with_two() {
    let o = rarebench(&["reeval", "--policy", "/nonexistent/policy.bin", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn grid_then_stats_curves_probe_and_reeval() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let tables = dir.path().join("tables");
    let o = rarebench(&[
        "grid",
        "--set",
        "algorithms=[\"CMAES\",\"PPO-MLP\"]",
        "--set",
        "p_values=[1.0]",
        "--set",
        "runs_per_cell=2",
        "--set",
        "episode_budget=1000",
        "--set",
        "reeval_episodes=10",
        "--seed",
        "3",
        "--workers",
        "2",
        "--out",
        runs.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("4 runs finished"));

    for sub in ["stats", "curves"] {
        let o = rarebench(&[sub, "--runs", runs.to_str().unwrap(), "--seed", "1", "--out", tables.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{sub}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let summary = std::fs::read_to_string(tables.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(tables.join("utest.csv").exists());
    assert!(tables.join("curves").join("CMAES_p1.csv").exists());

    let o = rarebench(&["probe", "--policy", runs.to_str().unwrap(), "--seed", "2", "--out", tables.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let acc = std::fs::read_to_string(tables.join("probe_acceptance.csv")).unwrap();
    assert_eq!(acc.lines().count(), 1 + 4 * 31);

    let run_dir = std::fs::read_dir(&runs).unwrap().next().unwrap().unwrap().path();
    let o = rarebench(&["reeval", "--policy", run_dir.to_str().unwrap(), "--episodes", "30", "--seed", "4", "--out", tables.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let re = std::fs::read_to_string(tables.join("reeval.csv")).unwrap();
    assert_eq!(re.lines().count(), 31);
}

#[test]
fn timing_reports_steps() {
    let o = rarebench(&["timing", "--algorithm", "CMAES", "--p", "1.0", "--seconds", "0.2", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("ms/step"));
}
