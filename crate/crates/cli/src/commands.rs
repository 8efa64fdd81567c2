use std::fmt;
use std::path::{Path, PathBuf};

use log::warn;
use til_core::config::RunConfig;
use til_core::indices::{performance_indices, training_snr, PerformanceIndices};
use til_core::scenario::Scenario;
use til_core::sensors::calibrate_noise;
use til_core::sim::{run_experiment, Controller, RunLog, SIM_DT, STEPS_PER_TICK};
use til_core::tuner::{tune as bo_tune, BoOptions, TuneTarget};

use crate::output::{csv_bytes, write_atomic, TimingStats};
use crate::Common;

/// Command failure with its exit code class.
pub struct CliError {
    usage: bool,
    inner: anyhow::Error,
}

impl CliError {
    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        Self {
            usage: true,
            inner: e.into(),
        }
    }

    pub fn runtime(e: impl Into<anyhow::Error>) -> Self {
        Self {
            usage: false,
            inner: e.into(),
        }
    }

    /// 2 for usage and configuration errors, 1 for runtime failures.
    pub fn exit_code(&self) -> u8 {
        if self.usage {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.inner)
    }
}

impl From<til_core::Error> for CliError {
    fn from(e: til_core::Error) -> Self {
        use til_core::Error as E;
        let usage = matches!(
            e,
            E::Config(_) | E::Parse { .. } | E::InvalidParameter { .. } | E::CogOutsideWheelbase { .. } | E::UnsupportedDriverInput(_)
        );
        Self {
            usage,
            inner: e.into(),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        Self::runtime(e)
    }
}

type CmdResult = Result<(), CliError>;

/// Scenario argument: an existing file, otherwise a preset name.
fn load_config(common: &Common, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let path = Path::new(&common.scenario);
    let mut cfg = if path.is_file() {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(anyhow::anyhow!("reading {}: {e}", path.display())))?;
        RunConfig::parse(&text).map_err(|e| CliError::usage(anyhow::anyhow!("{}: {e}", path.display())))?
    } else if Scenario::preset(&common.scenario).is_some() {
        RunConfig::from_preset(&common.scenario)?
    } else {
        return Err(CliError::usage(anyhow::anyhow!(
            "`{}` is neither a file nor a scenario preset",
            common.scenario
        )));
    };
    cfg.apply_overrides(&common.overrides)?;
    if let Some(s) = seed {
        cfg.scenario.seed = s;
    }
    Ok(cfg)
}

fn parse_controller(name: &str) -> Result<Controller, CliError> {
    Controller::parse(name).ok_or_else(|| CliError::usage(anyhow::anyhow!("unknown controller `{name}` (til or mpc)")))
}

fn log_bytes(log: &RunLog) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    log.write_csv(&mut buf).map_err(CliError::runtime)?;
    Ok(buf)
}

pub const INDICES_HEADER: [&str; 7] = [
    "scenario",
    "controller",
    "seed",
    "config_hash",
    "J_lambda_pct",
    "J_u_Nmps",
    "J_time_s",
];

fn indices_row(cfg: &RunConfig, controller: Controller, idx: &PerformanceIndices) -> Vec<String> {
    vec![
        cfg.scenario.name.clone(),
        controller.name().to_string(),
        cfg.scenario.seed.to_string(),
        format!("{:016x}", cfg.hash()),
        idx.slip_cost_percent.to_string(),
        idx.effort.to_string(),
        idx.braking_time.to_string(),
    ]
}

fn finished_indices(log: &RunLog) -> Result<PerformanceIndices, CliError> {
    if let Some(f) = &log.failure {
        return Err(CliError::runtime(anyhow::anyhow!("run failed: {f}")));
    }
    if !log.completed {
        return Err(CliError::runtime(anyhow::anyhow!(
            "run did not reach 10 km/h before the duration cap"
        )));
    }
    Ok(performance_indices(log)?)
}

pub fn run(common: &Common, controller: &str, seed: Option<u64>) -> CmdResult {
    let controller = parse_controller(controller)?;
    let cfg = load_config(common, seed)?;
    let log = run_experiment(&cfg, controller)?;
    let stem = format!("{}-{}", cfg.scenario.name, controller.name());
    write_atomic(&common.out.join(format!("run-{stem}.csv")), &log_bytes(&log)?)?;
    let idx = finished_indices(&log)?;
    let rows = vec![indices_row(&cfg, controller, &idx)];
    write_atomic(
        &common.out.join(format!("indices-{stem}.csv")),
        &csv_bytes(&INDICES_HEADER, &rows)?,
    )?;
    println!(
        "scenario={} controller={} J_lambda_pct={:.4} J_u_Nmps={:.1} J_time_s={:.3}",
        cfg.scenario.name,
        controller.name(),
        idx.slip_cost_percent,
        idx.effort,
        idx.braking_time
    );
    Ok(())
}

pub fn overlay_path(dir: &Path, target: TuneTarget, scenario: &str) -> PathBuf {
    dir.join(format!("tune-{}-{}.cfg", target.name(), scenario))
}

pub fn compare(common: &Common, seed: Option<u64>, tuning_dir: Option<PathBuf>) -> CmdResult {
    let mut cfg = load_config(common, seed)?;
    let dir = tuning_dir.unwrap_or_else(|| common.out.clone());
    let name = cfg.scenario.name.clone();
    for target in [TuneTarget::Til, TuneTarget::MpcEol] {
        let path = overlay_path(&dir, target, &name);
        match std::fs::read_to_string(&path) {
            Ok(text) => cfg
                .apply_text(&text)
                .map_err(|e| CliError::usage(anyhow::anyhow!("{}: {e}", path.display())))?,
            Err(_) => warn!("no tuning overlay at {}; using defaults for {}", path.display(), target.name()),
        }
    }
    let (til, mpc) = rayon::join(
        || run_experiment(&cfg, Controller::Til),
        || run_experiment(&cfg, Controller::Mpc),
    );
    let logs = [(Controller::Til, til?), (Controller::Mpc, mpc?)];
    let mut rows = Vec::new();
    let mut timing_rows = Vec::new();
    for (c, log) in &logs {
        write_atomic(&common.out.join(format!("run-{name}-{}.csv", c.name())), &log_bytes(log)?)?;
        let idx = finished_indices(log)?;
        rows.push(indices_row(&cfg, *c, &idx));
        let t = TimingStats::from_samples(&log.controller_times);
        timing_rows.push(vec![
            c.name().to_string(),
            t.samples.to_string(),
            t.mean.to_string(),
            t.p95.to_string(),
            t.max.to_string(),
        ]);
    }
    write_atomic(&common.out.join(format!("compare-{name}.csv")), &csv_bytes(&INDICES_HEADER, &rows)?)?;
    write_atomic(
        &common.out.join(format!("compare-{name}-runtime.csv")),
        &csv_bytes(
            &["controller", "samples", "step_mean_s", "step_p95_s", "step_max_s"],
            &timing_rows,
        )?,
    )?;
    println!("scenario {name}, seed {}, config {:016x}", cfg.scenario.seed, cfg.hash());
    println!("{:<12}{:>14}{:>14}{:>12}", "controller", "J_lambda [%]", "J_u [N·m/s]", "J_time [s]");
    for r in &rows {
        let f = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);
        println!("{:<12}{:>14.3}{:>14.1}{:>12.3}", r[1], f(&r[4]), f(&r[5]), f(&r[6]));
    }
    Ok(())
}

pub fn calibrate(common: &Common, target: f64, seeds: u64) -> CmdResult {
    if target.is_nan() || target <= 0.0 || seeds == 0 {
        return Err(CliError::usage(anyhow::anyhow!("need --snr > 0 and --seeds >= 1")));
    }
    let cfg = load_config(common, None)?;
    let seed_list: Vec<u64> = (1..=seeds).collect();
    let (noise, snr) = calibrate_noise(&cfg.noise, target, 0.1, |candidate| {
        let mut c = cfg.clone();
        c.noise = candidate.clone();
        training_snr(&c, &seed_list)
    })?;
    let mut c = cfg.clone();
    c.noise = noise;
    let text: String = c
        .to_text()
        .lines()
        .filter(|l| l.starts_with("sensors."))
        .map(|l| format!("{l}\n"))
        .collect();
    let body = format!("# slip SNR {snr} on the training maneuver, {seeds} seeds\n{text}");
    write_atomic(&common.out.join("calibrate-noise.cfg"), body.as_bytes())?;
    println!("slip SNR {snr:.3}");
    print!("{text}");
    Ok(())
}

pub fn tune(common: &Common, target: &str, budget: usize, seed: u64) -> CmdResult {
    let target = TuneTarget::parse(target)
        .ok_or_else(|| CliError::usage(anyhow::anyhow!("unknown tuning target `{target}` (til or mpc-eol)")))?;
    let options = BoOptions {
        budget,
        seed,
        ..BoOptions::default()
    };
    if budget < options.initial_design {
        return Err(CliError::usage(anyhow::anyhow!(
            "--budget {budget} is below the initial design size {}",
            options.initial_design
        )));
    }
    let cfg = load_config(common, None)?;
    let result = bo_tune(&cfg, target, &options)?;
    let name = &cfg.scenario.name;
    write_atomic(&overlay_path(&common.out, target, name), result.overlay().as_bytes())?;
    let mut history = Vec::new();
    result.write_history(&mut history)?;
    write_atomic(
        &common.out.join(format!("tune-{}-{name}-history.csv", target.name())),
        &history,
    )?;
    print!("{}", result.overlay());
    Ok(())
}

pub fn bench(common: &Common, repetitions: usize) -> CmdResult {
    if repetitions == 0 {
        return Err(CliError::usage(anyhow::anyhow!("--repetitions must be at least 1")));
    }
    if cfg!(debug_assertions) {
        warn!("debug build: timings are not representative, use --release");
    }
    let cfg = load_config(common, None)?;
    let mut controller = Vec::new();
    let mut twin = Vec::new();
    for _ in 0..repetitions {
        let log = run_experiment(&cfg, Controller::Til)?;
        controller.extend_from_slice(&log.controller_times);
        twin.extend_from_slice(&log.twin_times);
    }
    let mut rows = Vec::new();
    for (block, cycle, samples) in [
        ("controller", SIM_DT * STEPS_PER_TICK as f64, &controller),
        ("twin", SIM_DT, &twin),
    ] {
        let s = TimingStats::from_samples(samples);
        let pct = |x: f64| 100.0 * x / cycle;
        rows.push(vec![
            block.to_string(),
            cycle.to_string(),
            s.samples.to_string(),
            s.mean.to_string(),
            s.p95.to_string(),
            s.max.to_string(),
            pct(s.mean).to_string(),
            pct(s.p95).to_string(),
            pct(s.max).to_string(),
        ]);
        println!(
            "{block:<11} mean {:>9.2} us  p95 {:>9.2} us  max {:>9.2} us  p95 {:>6.2} % of {:.0} ms",
            s.mean * 1e6,
            s.p95 * 1e6,
            s.max * 1e6,
            pct(s.p95),
            cycle * 1e3
        );
    }
    write_atomic(
        &common.out.join(format!("bench-{}.csv", cfg.scenario.name)),
        &csv_bytes(&BENCH_HEADER, &rows)?,
    )?;
    Ok(())
}

pub const BENCH_HEADER: [&str; 9] = [
    "block",
    "cycle_s",
    "samples",
    "mean_s",
    "p95_s",
    "max_s",
    "mean_pct",
    "p95_pct",
    "max_pct",
];
