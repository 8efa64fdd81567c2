//! Performance indices computed from run logs.

use nalgebra::DVector;

use crate::compensator::DEACTIVATION_SPEED;
use crate::error::{Error, Result};
use crate::mpc::{linearize_slip_model, predict, to_velocity_form, WheelModel};
use crate::sensors::calibrate_snr;
use crate::config::RunConfig;
use crate::sim::{run_experiment, Controller, RunLog, STEPS_PER_TICK};
use crate::vehicle::WHEELS;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerformanceIndices {
    /// RMS slip tracking error, percent.
    pub slip_cost_percent: f64,
    /// RMS actuated torque rate, N·m/s.
    pub effort: f64,
    /// Activation to 10 km/h, s.
    pub braking_time: f64,
}

/// RMS over wheels and samples of a per-wheel error.
pub fn rms_wheel_error<F>(rows: &[usize], mut error: F) -> Result<f64>
where
    F: FnMut(usize, usize) -> f64,
{
    if rows.is_empty() {
        return Err(Error::UndefinedCost("empty active window".into()));
    }
    let mut sum = 0.0;
    for &k in rows {
        for i in 0..WHEELS {
            let e = error(k, i);
            sum += e * e;
        }
    }
    Ok((sum / (WHEELS * rows.len()) as f64).sqrt())
}

fn active(log: &RunLog) -> Vec<usize> {
    log.active_rows().collect()
}

/// Tracking error of the true plant slip against the scenario reference, as
/// a fraction (multiply by 100 for percent).
pub fn cost_slip(log: &RunLog) -> Result<f64> {
    rms_wheel_error(&active(log), |k, i| log.reference[k][i] - log.plant_slip[k][i])
}

/// Mismatch between twin slip and measured plant slip: the compensator
/// tuning objective. Rows after the twin finished are excluded.
pub fn cost_slip_twin(log: &RunLog) -> Result<f64> {
    let rows: Vec<usize> = log.active_rows().filter(|&k| !log.twin_slip[k][0].is_nan()).collect();
    let done = log.twin_done_time.unwrap_or(f64::INFINITY);
    let rows: Vec<usize> = rows.into_iter().filter(|&k| log.time[k] < done).collect();
    rms_wheel_error(&rows, |k, i| log.twin_slip[k][i] - log.measured_slip[k][i])
}

/// RMS of the actuated torque rate from 1 ms first differences.
pub fn cost_effort(log: &RunLog) -> Result<f64> {
    let rows: Vec<usize> = active(log).into_iter().filter(|&k| k > 0).collect();
    let dt = log.dt;
    rms_wheel_error(&rows, |k, i| (log.actuated_torque[k][i] - log.actuated_torque[k - 1][i]) / dt)
}

/// Time from activation to the first sample below 10 km/h.
pub fn braking_time(log: &RunLog) -> Result<f64> {
    let start = log
        .activation_time
        .ok_or_else(|| Error::UndefinedCost("braking never activated".into()))?;
    for k in 0..log.len() {
        if log.time[k] + 1e-12 >= start && log.plant_speed[k] < DEACTIVATION_SPEED {
            return Ok(log.time[k] - start);
        }
    }
    Err(Error::UndefinedCost("speed never dropped below 10 km/h".into()))
}

pub fn performance_indices(log: &RunLog) -> Result<PerformanceIndices> {
    Ok(PerformanceIndices {
        slip_cost_percent: 100.0 * cost_slip(log)?,
        effort: cost_effort(log)?,
        braking_time: braking_time(log)?,
    })
}

/// Slip SNR of a log: true plant slip power over measurement error power,
/// all wheels, active rows only.
pub fn slip_snr(log: &RunLog) -> Result<f64> {
    let mut truth = Vec::new();
    let mut measured = Vec::new();
    for k in log.active_rows() {
        truth.extend_from_slice(&log.plant_slip[k]);
        measured.extend_from_slice(&log.measured_slip[k]);
    }
    calibrate_snr(&truth, &measured)
}

/// SNR of the measured slip on the training maneuver built from `cfg`
/// with noise enabled, pooled over `seeds` (signal and noise powers summed
/// before the ratio). Runs TiL with the configured gains.
pub fn training_snr(cfg: &RunConfig, seeds: &[u64]) -> Result<f64> {
    let mut training = cfg.clone();
    training.scenario = cfg.scenario.as_training();
    training.scenario.noise = true;
    let mut signal = 0.0;
    let mut noise = 0.0;
    for &seed in seeds {
        training.scenario.seed = seed;
        let log = run_experiment(&training, Controller::Til)?;
        for k in log.active_rows() {
            for i in 0..WHEELS {
                signal += log.plant_slip[k][i].powi(2);
                noise += (log.measured_slip[k][i] - log.plant_slip[k][i]).powi(2);
            }
        }
    }
    if signal == 0.0 {
        return Err(Error::UndefinedSnr);
    }
    Ok(if noise == 0.0 { f64::INFINITY } else { signal / noise })
}

/// Slip the stored predictions are compared with: the twin's for TiL logs,
/// the measured plant slip for the stand-alone MPC.
fn realized_slip(log: &RunLog, k: usize, i: usize) -> f64 {
    match log.controller {
        Some(Controller::Til) => log.twin_slip[k][i],
        _ => log.measured_slip[k][i],
    }
}

/// Pairs of (prediction row, realized row) `horizon` controller steps apart.
fn prediction_pairs(log: &RunLog, horizon: usize) -> Vec<(usize, usize)> {
    let ahead = horizon * STEPS_PER_TICK;
    (0..log.len())
        .filter(|&k| k + ahead < log.len() && log.active[k + ahead])
        .filter(|&k| log.predicted_slip[k].iter().all(|p| !p.is_nan()))
        .map(|k| (k, k + ahead))
        .collect()
}

/// RMS gap between the stored horizon-tip predictions and the slip realized
/// at that time.
pub fn cost_mpc_prediction(log: &RunLog, horizon: usize) -> Result<f64> {
    if log.predicted_slip.len() != log.len() {
        return Err(Error::Config("log has no prediction channel".into()));
    }
    let pairs = prediction_pairs(log, horizon);
    if pairs.is_empty() {
        return Err(Error::Config("log has no stored predictions".into()));
    }
    let mut sum = 0.0;
    for &(k, j) in &pairs {
        for i in 0..WHEELS {
            let e = realized_slip(log, j, i) - log.predicted_slip[k][i];
            sum += e * e;
        }
    }
    Ok((sum / (WHEELS * pairs.len()) as f64).sqrt())
}

/// Re-evaluates the prediction error of a candidate model on a recorded log
/// without re-running the loop: each controller step is re-linearized with
/// the logged speed and acceleration and driven with the logged command
/// increments.
pub fn replay_prediction_cost(
    log: &RunLog,
    models: &[WheelModel; WHEELS],
    horizon: usize,
    sample_time: f64,
    min_speed: f64,
) -> Result<f64> {
    let tick = STEPS_PER_TICK;
    let ahead = horizon * tick;
    let (speed, accel, slip): (&[f64], &[f64], &[[f64; WHEELS]]) = match log.controller {
        Some(Controller::Til) => (&log.twin_speed, &log.plant_accel, &log.twin_slip),
        _ => (&log.measured_speed, &log.measured_accel, &log.measured_slip),
    };
    let mut sum = 0.0;
    let mut count = 0usize;
    for k in (tick..log.len()).step_by(tick) {
        if k % tick != 0 || k + ahead >= log.len() || !log.active[k - tick] || !log.active[k + ahead] {
            continue;
        }
        for i in 0..WHEELS {
            let Ok(model) = linearize_slip_model(speed[k], accel[k], &models[i], sample_time, horizon, min_speed) else {
                continue;
            };
            let aug = to_velocity_form(&model);
            let z0 = DVector::from_vec(vec![
                slip[k][i] - slip[k - tick][i],
                log.actuated_torque[k][i] - log.actuated_torque[k - tick][i],
                log.actuated_rate[k][i] - log.actuated_rate[k - tick][i],
                0.0,
            ]);
            let p = predict(&aug, &z0, &[slip[k][i]], horizon);
            let du = DVector::from_fn(horizon, |j, _| {
                let now = k + j * tick;
                log.plant_command[now][i] - log.plant_command[now - tick][i]
            });
            let predicted = slip[k][i] + p.errors(&du)[horizon - 1];
            let e = slip[k + ahead][i] - predicted;
            sum += e * e;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedCost("no replayable controller steps".into()));
    }
    Ok((sum / count as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(n: usize) -> RunLog {
        RunLog {
            controller: Some(Controller::Mpc),
            dt: 0.001,
            horizon_steps: 5,
            activation_time: Some(0.0),
            time: (0..n).map(|k| k as f64 * 0.001).collect(),
            active: vec![true; n],
            plant_speed: vec![30.0; n],
            measured_speed: vec![30.0; n],
            plant_accel: vec![0.0; n],
            measured_accel: vec![0.0; n],
            twin_speed: vec![f64::NAN; n],
            reference: vec![[0.1; WHEELS]; n],
            twin_slip: vec![[f64::NAN; WHEELS]; n],
            plant_slip: vec![[0.1; WHEELS]; n],
            measured_slip: vec![[0.1; WHEELS]; n],
            nominal_command: vec![[0.0; WHEELS]; n],
            delta_command: vec![[0.0; WHEELS]; n],
            plant_command: vec![[0.0; WHEELS]; n],
            actuated_torque: vec![[500.0; WHEELS]; n],
            actuated_rate: vec![[0.0; WHEELS]; n],
            predicted_slip: vec![[f64::NAN; WHEELS]; n],
            mode: vec![[0; WHEELS]; n],
            ..RunLog::default()
        }
    }

    #[test]
    fn slip_cost_examples() {
        let mut log = synthetic(100);
        assert_eq!(cost_slip(&log).unwrap(), 0.0);
        for row in log.plant_slip.iter_mut() {
            *row = [0.09; WHEELS];
        }
        assert!((cost_slip(&log).unwrap() - 0.01).abs() < 1e-12);
        for row in log.plant_slip.iter_mut() {
            *row = [0.08, 0.1, 0.08, 0.1];
        }
        assert!((cost_slip(&log).unwrap() - (2.0f64 * 0.02 * 0.02 / 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn empty_window_is_undefined() {
        let mut log = synthetic(10);
        log.active = vec![false; 10];
        assert!(matches!(cost_slip(&log), Err(Error::UndefinedCost(_))));
    }

    #[test]
    fn effort_examples() {
        let mut log = synthetic(200);
        assert_eq!(cost_effort(&log).unwrap(), 0.0);
        for (k, row) in log.actuated_torque.iter_mut().enumerate() {
            row[0] = 500.0 + 100.0 * k as f64 * 0.001;
        }
        assert!((cost_effort(&log).unwrap() - 50.0).abs() < 1e-6);
    }

    #[test]
    fn braking_time_examples() {
        let mut log = synthetic(6000);
        log.activation_time = Some(1.0);
        for (k, v) in log.plant_speed.iter_mut().enumerate() {
            *v = if k >= 4880 { 2.0 } else { 30.0 };
        }
        assert!((braking_time(&log).unwrap() - 3.88).abs() < 1e-9);
        // shifted copy
        let mut shifted = log.clone();
        shifted.activation_time = Some(1.5);
        shifted.plant_speed.splice(0..0, vec![30.0; 500]);
        shifted.time = (0..shifted.plant_speed.len()).map(|k| k as f64 * 0.001).collect();
        assert!((braking_time(&shifted).unwrap() - 3.88).abs() < 1e-9);
        let mut slow = synthetic(100);
        slow.plant_speed = vec![1.0; 100];
        assert_eq!(braking_time(&slow).unwrap(), 0.0);
        let never = synthetic(100);
        assert!(braking_time(&never).is_err());
    }

    #[test]
    fn zero_predictions_give_rms_of_realized() {
        let mut log = synthetic(400);
        for k in (0..400).step_by(5) {
            log.predicted_slip[k] = [0.0; WHEELS];
        }
        assert!((cost_mpc_prediction(&log, 5).unwrap() - 0.1).abs() < 1e-12);
        let bare = synthetic(400);
        assert!(matches!(cost_mpc_prediction(&bare, 5), Err(Error::Config(_))));
    }
}
