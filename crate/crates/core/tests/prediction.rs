//! Prediction-error index on a plant that is exactly the MPC predictor, and
//! consistency of the replay evaluation with the stored predictions.

use til_core::config::RunConfig;
use til_core::indices::{cost_mpc_prediction, replay_prediction_cost};
use til_core::mpc::{linearize_slip_model, MpcMeasurement, SlipMpc, WheelModel};
use til_core::sim::{run_experiment, Controller, RunLog, STEPS_PER_TICK};
use til_core::vehicle::WHEELS;

const SPEED: f64 = 30.0;
const ACCEL: f64 = -9.0;

/// Closed loop of the MPC with the discretized predictor as plant, logged at
/// 1 ms with the 5 ms values held.
fn linear_plant_log(cfg: &RunConfig) -> RunLog {
    let mc = cfg.mpc_config(0);
    let wheel = cfg.nominal_wheel_model(0);
    let d = linearize_slip_model(SPEED, ACCEL, &wheel, mc.sample_time, mc.horizon_steps, mc.min_speed)
        .unwrap()
        .discretize();
    let mut mpcs: Vec<SlipMpc> = (0..WHEELS).map(|_| SlipMpc::new(mc.clone(), wheel).unwrap()).collect();
    let mut x = [nalgebra::Vector3::new(0.02, 0.0, 0.0); WHEELS];
    let reference = |t: f64| 0.08 + 0.02 * (std::f64::consts::TAU * t).sin();
    let mut log = RunLog {
        controller: Some(Controller::Mpc),
        dt: 0.001,
        horizon_steps: mc.horizon_steps,
        activation_time: Some(0.0),
        ..RunLog::default()
    };
    let ticks = 240;
    for j in 0..ticks {
        let t = j as f64 * mc.sample_time;
        let preview: Vec<f64> = (0..=mc.horizon_steps).map(|h| reference(t + h as f64 * mc.sample_time)).collect();
        let mut u = [0.0; WHEELS];
        let mut tip = [f64::NAN; WHEELS];
        for i in 0..WHEELS {
            let m = MpcMeasurement {
                slip: x[i][0],
                speed: SPEED,
                accel: ACCEL,
                torque: x[i][1],
                torque_rate: x[i][2],
            };
            let out = mpcs[i].mpc_step(&m, &preview);
            u[i] = out.command;
            // the first call has no increment history
            if j > 0 {
                tip[i] = *out.predicted_slip.last().unwrap();
            }
        }
        for s in 0..STEPS_PER_TICK {
            log.time.push(t + s as f64 * 0.001);
            log.active.push(true);
            log.measured_speed.push(SPEED);
            log.measured_accel.push(ACCEL);
            log.measured_slip.push(std::array::from_fn(|i| x[i][0]));
            log.actuated_torque.push(std::array::from_fn(|i| x[i][1]));
            log.actuated_rate.push(std::array::from_fn(|i| x[i][2]));
            log.plant_command.push(u);
            log.predicted_slip.push(if s == 0 { tip } else { [f64::NAN; WHEELS] });
        }
        for i in 0..WHEELS {
            x[i] = d.a * x[i] + d.b * u[i] + d.w;
        }
    }
    log
}

#[test]
fn perfect_model_predicts_itself() {
    let cfg = RunConfig::default();
    let log = linear_plant_log(&cfg);
    let n = cfg.mpc.horizon_steps;
    // stored tips use the planned moves, which are re-optimized later
    let stored = cost_mpc_prediction(&log, n).unwrap();
    assert!(stored < 1e-3, "{stored}");
    let models: [WheelModel; WHEELS] = std::array::from_fn(|_| cfg.nominal_wheel_model(0));
    let replayed = replay_prediction_cost(&log, &models, n, cfg.mpc_config(0).sample_time, cfg.mpc.min_speed).unwrap();
    assert!(replayed < 1e-9, "{replayed}");
}

#[test]
fn inflated_inertia_worsens_replay_on_perfect_model_log() {
    let cfg = RunConfig::default();
    let log = linear_plant_log(&cfg);
    let n = cfg.mpc.horizon_steps;
    let nominal: [WheelModel; WHEELS] = std::array::from_fn(|_| cfg.nominal_wheel_model(0));
    let mut inflated = nominal;
    for m in inflated.iter_mut() {
        m.inertia *= 1.5;
    }
    let a = replay_prediction_cost(&log, &nominal, n, cfg.mpc_config(0).sample_time, cfg.mpc.min_speed).unwrap();
    let b = replay_prediction_cost(&log, &inflated, n, cfg.mpc_config(0).sample_time, cfg.mpc.min_speed).unwrap();
    assert!(a < 1e-9, "{a}");
    assert!(b > a + 1e-4, "{a} vs {b}");
}

#[test]
fn replay_tracks_stored_predictions() {
    let cfg = RunConfig::from_preset("nominal").unwrap();
    let log = run_experiment(&cfg, Controller::Mpc).unwrap();
    let n = cfg.mpc.horizon_steps;
    let stored = cost_mpc_prediction(&log, n).unwrap();
    let models: [WheelModel; WHEELS] = std::array::from_fn(|i| cfg.nominal_wheel_model(i));
    let replayed = replay_prediction_cost(&log, &models, n, cfg.mpc_config(0).sample_time, cfg.mpc.min_speed).unwrap();
    assert!((stored - replayed).abs() < 0.01 * stored, "{stored} vs {replayed}");
}
