use std::path::Path;
use std::process::{Command, Output};

fn lazyflow(args: &[&str], dir: &Path, env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lazyflow"));
    cmd.args(args).current_dir(dir).env_remove("LAZYFLOW_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn print_config_round_trips_through_config_flag() {
    let dir = tempfile::tempdir().unwrap();
    let first = lazyflow(&["sweep", "--print-config", "--seed", "5"], dir.path(), &[]);
    assert_eq!(first.status.code(), Some(0));
    let text = String::from_utf8(first.stdout).unwrap();
    assert!(text.contains("seed = 5"), "{text}");
    let cfg = write_config(dir.path(), &text);
    let second = lazyflow(&["sweep", "--print-config", "--config", &cfg], dir.path(), &[]);
    assert_eq!(String::from_utf8(second.stdout).unwrap(), text);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "no_such_key = 1\n");
    assert_eq!(lazyflow(&["verify", "--config", &unknown], dir.path(), &[]).status.code(), Some(2));
    let negative = write_config(dir.path(), "alpha = -1.0\n");
    assert_eq!(lazyflow(&["train", "--config", &negative], dir.path(), &[]).status.code(), Some(2));
    assert_eq!(lazyflow(&["verify", "--config", "missing.toml"], dir.path(), &[]).status.code(), Some(2));
    assert_eq!(lazyflow(&["bogus"], dir.path(), &[]).status.code(), Some(2));
    let ok = write_config(dir.path(), "suite_size = 2\n");
    let out = lazyflow(&["verify", "--config", &ok], dir.path(), &[("LAZYFLOW_THREADS", "zero")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_report_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "alpha = [5.0, 20.0]\nT = [0.5, 1.0]\ngrid_points = 33\n");
    let out = lazyflow(&["train", "--config", &cfg, "--out", "res"], dir.path(), &[("LAZYFLOW_THREADS", "2")]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("res/train.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    let ids: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids, ["0", "1", "2", "3"]);
    assert!(lines[1].starts_with("0,5.0,0.5,"), "{}", lines[1]);
}

#[test]
fn slope_outside_range_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "slope_min = -0.5\nslope_max = 0.0\ngrid_points = 33\n");
    let out = lazyflow(&["sweep", "--config", &cfg, "--out", "."], dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("slope"));
    assert!(dir.path().join("sweep.csv").exists());
}

#[test]
fn integrator_breakdown_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "alpha = 10.0\nmax_steps = 2\n");
    let out = lazyflow(&["train", "--config", &cfg, "--out", "."], dir.path(), &[]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn converse_and_verify_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "suite_size = 20\n");
    for command in ["verify", "converse"] {
        let mut files = Vec::new();
        for (i, threads) in ["1", "3"].iter().enumerate() {
            let out_dir = format!("run{i}");
            let out = lazyflow(&[command, "--config", &cfg, "--seed", "9", "--out", &out_dir], dir.path(), &[("LAZYFLOW_THREADS", threads)]);
            assert_eq!(out.status.code(), Some(0), "{command}: {}", String::from_utf8_lossy(&out.stderr));
            files.push(std::fs::read(dir.path().join(out_dir).join(format!("{command}.csv"))).unwrap());
        }
        assert_eq!(files[0], files[1], "{command}");
    }
}
