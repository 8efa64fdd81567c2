use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn til(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_til"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Header and all rows of a CSV file, checking every row has the header's width.
fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rd = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
    let rows: Vec<Vec<String>> = rd
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect::<Vec<_>>())
        .collect();
    for r in &rows {
        assert_eq!(r.len(), header.len());
    }
    (header, rows)
}

#[test]
fn run_writes_log_and_indices() {
    let dir = TempDir::new().unwrap();
    let o = til(&["run", "--scenario", "nominal", "--controller", "mpc"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("J_lambda_pct="), "{stdout}");

    let (header, rows) = read_csv(&dir.path().join("indices-nominal-mpc.csv"));
    assert_eq!(
        header,
        ["scenario", "controller", "seed", "config_hash", "J_lambda_pct", "J_u_Nmps", "J_time_s"]
    );
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "nominal");
    assert_eq!(rows[0][3].len(), 16);
    for v in &rows[0][4..] {
        assert!(v.parse::<f64>().unwrap() > 0.0);
    }

    let (header, rows) = read_csv(&dir.path().join("run-nominal-mpc.csv"));
    assert_eq!(header[0], "time_s");
    assert!(rows.len() > 1000);
}

#[test]
fn scenario_file_and_overrides() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("short.cfg");
    std::fs::write(&cfg, "preset = masses\nscenario.initial_speed = 20\n").unwrap();
    let o = til(
        &["run", "--scenario", cfg.to_str().unwrap(), "--override", "scenario.name=short"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, rows) = read_csv(&dir.path().join("indices-short-til.csv"));
    assert!(rows[0][6].parse::<f64>().unwrap() < 3.0);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let cases: [&[&str]; 5] = [
        &["run", "--controller", "pid"],
        &["run", "--scenario", "no-such-preset"],
        &["run", "--override", "vehicle.total_mass=-3"],
        &["tune", "--budget", "4"],
        &["frobnicate"],
    ];
    for args in cases {
        let o = til(args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn parse_error_reports_line() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "# header\npreset = noisy\nvehicle.total_mass = heavy\n").unwrap();
    let o = til(&["run", "--scenario", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn incomplete_run_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    let o = til(&["run", "--override", "scenario.duration_cap=2"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    // the log is still written for inspection
    assert!(dir.path().join("run-nominal-til.csv").is_file());
    assert!(!dir.path().join("indices-nominal-til.csv").exists());
}

#[test]
fn compare_is_deterministic_and_uses_overlays() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    assert!(til(&["compare", "--scenario", "noisy"], a.path()).status.success());
    assert!(til(&["compare", "--scenario", "noisy"], b.path()).status.success());
    let read = |d: &TempDir| std::fs::read(d.path().join("compare-noisy.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    let (_, rows) = read_csv(&a.path().join("compare-noisy.csv"));
    assert_eq!(rows.iter().map(|r| r[1].as_str()).collect::<Vec<_>>(), ["til", "mpc"]);
    let (header, _) = read_csv(&a.path().join("compare-noisy-runtime.csv"));
    assert_eq!(header[0], "controller");

    // a hand-written overlay changes the TiL row only
    std::fs::write(
        b.path().join("tune-til-noisy.cfg"),
        "compensator.kp_front = 100\ncompensator.kp_rear = 100\n",
    )
    .unwrap();
    assert!(til(&["compare", "--scenario", "noisy"], b.path()).status.success());
    let (_, tuned) = read_csv(&b.path().join("compare-noisy.csv"));
    assert_ne!(tuned[0][4], rows[0][4]);
    assert_eq!(tuned[1][4], rows[1][4]);
}

#[test]
fn tune_writes_overlay_and_history() {
    let dir = TempDir::new().unwrap();
    let o = til(&["tune", "--scenario", "masses", "--target", "til", "--budget", "10"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let overlay = std::fs::read_to_string(dir.path().join("tune-til-masses.cfg")).unwrap();
    for key in ["compensator.kp_front", "compensator.ti_front", "compensator.kp_rear", "compensator.ti_rear"] {
        assert!(overlay.contains(key), "{overlay}");
    }
    let (header, rows) = read_csv(&dir.path().join("tune-til-masses-history.csv"));
    assert_eq!(header.first().unwrap(), "iteration");
    assert_eq!(header.last().unwrap(), "incumbent");
    assert_eq!(rows.len(), 10);
}

#[test]
fn bench_schema() {
    let dir = TempDir::new().unwrap();
    let o = til(&["bench", "--repetitions", "1"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&dir.path().join("bench-nominal.csv"));
    assert_eq!(
        header,
        ["block", "cycle_s", "samples", "mean_s", "p95_s", "max_s", "mean_pct", "p95_pct", "max_pct"]
    );
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["controller", "twin"]);
    for r in &rows {
        let mean: f64 = r[3].parse().unwrap();
        let p95: f64 = r[4].parse().unwrap();
        let max: f64 = r[5].parse().unwrap();
        assert!(r[2].parse::<usize>().unwrap() > 100);
        assert!(mean > 0.0 && p95 <= max);
    }
}
