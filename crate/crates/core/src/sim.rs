//! Multi-rate orchestration of twin, plant, sensors and controllers.
//!
//! Vehicles and sensors advance at 1 ms. Controllers run every fifth step on
//! a grid aligned with t = 0 and their commands are held in between. In TiL
//! mode the nominal MPC drives the twin from its true states while the
//! compensator corrects the plant; in baseline mode the MPC consumes the
//! plant's noisy measurements directly.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::compensator::{CompensatorInput, CompensatorMode, TilCompensator, DEACTIVATION_SPEED};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::mpc::{MpcMeasurement, MpcStatus, SlipMpc};
use crate::sensors::{Measurements, SensorRig};
use crate::vehicle::{wheel_slip, DriverInput, Vehicle, VehicleParams, VehicleState, WHEELS, WHEEL_NAMES};

/// Vehicle and sensor step, s.
pub const SIM_DT: f64 = 0.001;
/// Vehicle steps per controller step.
pub const STEPS_PER_TICK: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Controller {
    /// Nominal MPC on the twin plus residual compensator on the plant.
    Til,
    /// MPC directly on the plant measurements.
    Mpc,
}

impl Controller {
    pub fn name(self) -> &'static str {
        match self {
            Self::Til => "til",
            Self::Mpc => "mpc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "til" => Some(Self::Til),
            "mpc" => Some(Self::Mpc),
            _ => None,
        }
    }
}

/// Synchronized 1 ms trace of one run. Per-wheel signals are in
/// fl, fr, rl, rr order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub controller: Option<Controller>,
    pub scenario: String,
    pub dt: f64,
    pub horizon_steps: usize,
    pub activation_time: Option<f64>,
    pub twin_done_time: Option<f64>,
    /// Run reached the deactivation speed.
    pub completed: bool,
    /// Set when the run was aborted, e.g. by numerical divergence.
    pub failure: Option<String>,
    pub time: Vec<f64>,
    pub active: Vec<bool>,
    pub plant_speed: Vec<f64>,
    pub measured_speed: Vec<f64>,
    pub plant_accel: Vec<f64>,
    pub measured_accel: Vec<f64>,
    /// NaN while the twin is inactive.
    pub twin_speed: Vec<f64>,
    pub reference: Vec<[f64; WHEELS]>,
    pub twin_slip: Vec<[f64; WHEELS]>,
    pub plant_slip: Vec<[f64; WHEELS]>,
    pub measured_slip: Vec<[f64; WHEELS]>,
    pub nominal_command: Vec<[f64; WHEELS]>,
    pub delta_command: Vec<[f64; WHEELS]>,
    pub plant_command: Vec<[f64; WHEELS]>,
    pub actuated_torque: Vec<[f64; WHEELS]>,
    pub actuated_rate: Vec<[f64; WHEELS]>,
    /// Slip predicted `horizon_steps` controller steps ahead; NaN off-tick.
    pub predicted_slip: Vec<[f64; WHEELS]>,
    pub mode: Vec<[u8; WHEELS]>,
    /// Wall-clock time of each controller invocation (all four wheels), s.
    pub controller_times: Vec<f64>,
    /// Wall-clock time of each twin step, s.
    pub twin_times: Vec<f64>,
    pub solver_failures: usize,
}

/// CSV header of [`RunLog::write_csv`].
pub fn csv_header() -> Vec<String> {
    let mut h: Vec<String> = [
        "time_s",
        "active",
        "plant_speed_mps",
        "measured_speed_mps",
        "plant_accel_mps2",
        "measured_accel_mps2",
        "twin_speed_mps",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for w in WHEEL_NAMES {
        for col in [
            "ref_slip",
            "twin_slip",
            "plant_slip",
            "measured_slip",
            "nominal_cmd_Nm",
            "delta_cmd_Nm",
            "plant_cmd_Nm",
            "actuated_torque_Nm",
            "actuated_rate_Nmps",
            "predicted_slip",
            "mode",
        ] {
            h.push(format!("{col}_{w}"));
        }
    }
    h
}

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

impl RunLog {
    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    /// Indices of rows with the braking controller engaged.
    pub fn active_rows(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&k| self.active[k])
    }

    /// Plain-text CSV; empty fields stand for undefined values.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(csv_header())?;
        for k in 0..self.len() {
            let mut row = vec![
                num(self.time[k]),
                u8::from(self.active[k]).to_string(),
                num(self.plant_speed[k]),
                num(self.measured_speed[k]),
                num(self.plant_accel[k]),
                num(self.measured_accel[k]),
                num(self.twin_speed[k]),
            ];
            for i in 0..WHEELS {
                row.push(num(self.reference[k][i]));
                row.push(num(self.twin_slip[k][i]));
                row.push(num(self.plant_slip[k][i]));
                row.push(num(self.measured_slip[k][i]));
                row.push(num(self.nominal_command[k][i]));
                row.push(num(self.delta_command[k][i]));
                row.push(num(self.plant_command[k][i]));
                row.push(num(self.actuated_torque[k][i]));
                row.push(num(self.actuated_rate[k][i]));
                row.push(num(self.predicted_slip[k][i]));
                row.push(self.mode[k][i].to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Initial twin state from plant measurements at the brake trigger. Wheel
/// rates are taken as measured (clamped at zero); actuator states are known
/// to the controller and copied.
pub fn activate_twin(
    params: &VehicleParams,
    measurements: &Measurements,
    plant_actuators: &VehicleState,
    time: f64,
) -> Result<VehicleState> {
    let finite = measurements.speed.is_finite()
        && measurements.accel.is_finite()
        && measurements.wheel_rates.iter().all(|w| w.is_finite());
    if !finite {
        return Err(Error::ActivationRefused("non-finite plant measurements".into()));
    }
    if measurements.speed <= 0.0 {
        return Err(Error::ActivationRefused("plant is not moving".into()));
    }
    let mut state = VehicleState::free_rolling(params, measurements.speed);
    state.time = time;
    state.chassis_position = plant_actuators.chassis_position;
    state.actuators = plant_actuators.actuators;
    state.longitudinal_accel = measurements.accel;
    for i in 0..WHEELS {
        let w = measurements.wheel_rates[i].max(0.0);
        state.wheel_rates[i] = w;
        state.slips[i] = wheel_slip(state.chassis_speed, w, params.radius(i)).unwrap_or(0.0);
    }
    Ok(state)
}

/// Twin and plant with their controllers.
pub struct World {
    cfg: RunConfig,
    controller: Controller,
    plant: Vehicle,
    twin: Vehicle,
    plant_state: VehicleState,
    twin_state: Option<VehicleState>,
    twin_done: bool,
    rig: SensorRig,
    twin_mpc: Vec<SlipMpc>,
    baseline_mpc: Vec<SlipMpc>,
    compensators: Vec<TilCompensator>,
    nominal: [f64; WHEELS],
    delta: [f64; WHEELS],
    plant_cmd: [f64; WHEELS],
    modes: [u8; WHEELS],
    step: usize,
    activation_step: Option<usize>,
    finished: bool,
    log: RunLog,
}

impl World {
    pub fn new(cfg: &RunConfig, controller: Controller) -> Result<Self> {
        cfg.validate()?;
        let plant_params = cfg.scenario.plant_params(&cfg.vehicle)?;
        let twin_params = cfg.scenario.twin_params(&cfg.vehicle)?;
        let plant_state = VehicleState::free_rolling(&plant_params, cfg.scenario.initial_speed);
        let twin_mpc = (0..WHEELS)
            .map(|i| SlipMpc::new(cfg.mpc_config(i), cfg.nominal_wheel_model(i)))
            .collect::<Result<Vec<_>>>()?;
        let baseline_mpc = (0..WHEELS)
            .map(|i| SlipMpc::new(cfg.mpc_config(i), cfg.baseline_wheel_model(i)))
            .collect::<Result<Vec<_>>>()?;
        let compensators = (0..WHEELS)
            .map(|i| TilCompensator::new(cfg.compensator.clone(), i))
            .collect::<Result<Vec<_>>>()?;
        let log = RunLog {
            controller: Some(controller),
            scenario: cfg.scenario.name.clone(),
            dt: SIM_DT,
            horizon_steps: cfg.mpc.horizon_steps,
            ..RunLog::default()
        };
        Ok(Self {
            plant: Vehicle::new(plant_params, SIM_DT)?,
            twin: Vehicle::new(twin_params, SIM_DT)?,
            plant_state,
            twin_state: None,
            twin_done: false,
            rig: SensorRig::new(cfg.plant_noise())?,
            twin_mpc,
            baseline_mpc,
            compensators,
            nominal: [0.0; WHEELS],
            delta: [0.0; WHEELS],
            plant_cmd: [0.0; WHEELS],
            modes: [CompensatorMode::TrackTwin.code(); WHEELS],
            step: 0,
            activation_step: None,
            finished: false,
            log,
            cfg: cfg.clone(),
            controller,
        })
    }

    pub fn plant_state(&self) -> &VehicleState {
        &self.plant_state
    }

    pub fn twin_state(&self) -> Option<&VehicleState> {
        self.twin_state.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    fn uses_twin(&self) -> bool {
        self.controller == Controller::Til || self.cfg.baseline.reference_from_twin
    }

    fn reference_preview(&self, elapsed: f64) -> Vec<f64> {
        let ts = SIM_DT * STEPS_PER_TICK as f64;
        (0..=self.cfg.mpc.horizon_steps)
            .map(|j| self.cfg.scenario.reference.value(elapsed + j as f64 * ts))
            .collect()
    }

    /// Runs the twin-side MPC and the compensators for one controller step.
    fn til_tick(&mut self, meas: &Measurements, elapsed: f64) -> [f64; WHEELS] {
        let preview = self.reference_preview(elapsed);
        let mut predicted = [f64::NAN; WHEELS];
        let twin = self.twin_state.as_ref().expect("twin active");
        for i in 0..WHEELS {
            if self.twin_done {
                self.nominal[i] = 0.0;
            } else {
                let m = MpcMeasurement {
                    slip: twin.slips[i],
                    speed: twin.chassis_speed,
                    accel: twin.longitudinal_accel,
                    torque: twin.actuators[i].torque,
                    torque_rate: twin.actuators[i].rate,
                };
                let out = self.twin_mpc[i].mpc_step(&m, &preview);
                if out.status == MpcStatus::SolverFailure {
                    self.log.solver_failures += 1;
                }
                self.nominal[i] = out.command;
                if let Some(p) = out.predicted_slip.last() {
                    predicted[i] = *p;
                }
            }
            let input = CompensatorInput {
                twin_slip: twin.slips[i],
                measured_slip: meas.slips[i],
                chassis_speed: meas.speed,
                twin_done: self.twin_done,
                nominal_torque: self.nominal[i],
            };
            self.delta[i] = self.compensators[i].step(&input).unwrap_or(0.0);
            let mode = self.compensators[i].mode();
            self.modes[i] = mode.code();
            self.plant_cmd[i] = match mode {
                CompensatorMode::TrackTwin => self.nominal[i] + self.delta[i],
                CompensatorMode::HoldTotalTorque => self.delta[i],
                CompensatorMode::Off => self.driver_torque(i),
            };
        }
        predicted
    }

    /// Runs the stand-alone MPC on plant measurements.
    fn baseline_tick(&mut self, meas: &Measurements, elapsed: f64) -> [f64; WHEELS] {
        let mut predicted = [f64::NAN; WHEELS];
        for i in 0..WHEELS {
            if meas.speed < DEACTIVATION_SPEED {
                self.modes[i] = CompensatorMode::Off.code();
                self.nominal[i] = 0.0;
                self.plant_cmd[i] = self.driver_torque(i);
                continue;
            }
            let preview = match (&self.twin_state, self.cfg.baseline.reference_from_twin) {
                (Some(t), true) if !self.twin_done => vec![t.slips[i]],
                _ => self.reference_preview(elapsed),
            };
            let act = self.plant_state.actuators[i];
            let m = MpcMeasurement {
                slip: meas.slips[i],
                speed: meas.speed,
                accel: meas.accel,
                torque: act.torque,
                torque_rate: act.rate,
            };
            let out = self.baseline_mpc[i].mpc_step(&m, &preview);
            if out.status == MpcStatus::SolverFailure {
                self.log.solver_failures += 1;
            }
            self.nominal[i] = out.command;
            self.delta[i] = 0.0;
            self.plant_cmd[i] = out.command;
            if let Some(p) = out.predicted_slip.last() {
                predicted[i] = *p;
            }
        }
        predicted
    }

    /// Twin-side MPC only, used when the baseline borrows the twin's ideal
    /// slip as its reference.
    fn twin_only_tick(&mut self, elapsed: f64) {
        let preview = self.reference_preview(elapsed);
        let twin = self.twin_state.as_ref().expect("twin active");
        for i in 0..WHEELS {
            let m = MpcMeasurement {
                slip: twin.slips[i],
                speed: twin.chassis_speed,
                accel: twin.longitudinal_accel,
                torque: twin.actuators[i].torque,
                torque_rate: twin.actuators[i].rate,
            };
            self.twin_mpc[i].mpc_step(&m, &preview);
        }
    }

    fn driver_torque(&self, wheel: usize) -> f64 {
        DriverInput::braking(self.cfg.scenario.driver_brake).brake_map(self.plant.params())[wheel]
    }

    fn twin_commands(&self) -> [f64; WHEELS] {
        if self.twin_done {
            [0.0; WHEELS]
        } else {
            std::array::from_fn(|i| self.twin_mpc[i].previous_command())
        }
    }

    /// Advances one 1 ms step. Returns `false` once the run is over.
    pub fn advance(&mut self) -> Result<bool> {
        if self.finished {
            return Ok(false);
        }
        let k = self.step;
        let t = k as f64 * SIM_DT;
        let meas = self.rig.measure(&self.plant_state, self.plant.params(), SIM_DT);
        let trigger = self.cfg.scenario.brake_trigger_time;
        if self.activation_step.is_none() && t + 1e-9 >= trigger && k.is_multiple_of(STEPS_PER_TICK) {
            self.activation_step = Some(k);
            self.log.activation_time = Some(t);
            for m in self.twin_mpc.iter_mut().chain(self.baseline_mpc.iter_mut()) {
                m.reset(0.0);
            }
            if self.uses_twin() {
                let twin = activate_twin(self.twin.params(), &meas, &self.plant_state, t)?;
                self.twin_state = Some(twin);
            }
        }
        let active = self.activation_step.is_some();
        let driver = DriverInput::braking(if active { self.cfg.scenario.driver_brake } else { 0.0 });

        let mut predicted = [f64::NAN; WHEELS];
        if active && k.is_multiple_of(STEPS_PER_TICK) {
            let elapsed = t - self.log.activation_time.unwrap_or(t);
            if let Some(twin) = &self.twin_state {
                if !self.twin_done && twin.chassis_speed < DEACTIVATION_SPEED {
                    self.twin_done = true;
                    self.log.twin_done_time = Some(t);
                }
            }
            let started = Instant::now();
            predicted = match self.controller {
                Controller::Til => self.til_tick(&meas, elapsed),
                Controller::Mpc => {
                    if self.cfg.baseline.reference_from_twin {
                        self.twin_only_tick(elapsed);
                    }
                    self.baseline_tick(&meas, elapsed)
                }
            };
            self.log.controller_times.push(started.elapsed().as_secs_f64());
        }
        if !active {
            self.plant_cmd = [0.0; WHEELS];
        }

        self.record(t, active, &meas, predicted);

        if active && self.plant_state.chassis_speed < DEACTIVATION_SPEED {
            self.log.completed = true;
            self.finished = true;
            return Ok(false);
        }
        if t >= self.cfg.scenario.duration_cap {
            self.finished = true;
            return Ok(false);
        }

        if let Some(twin) = &self.twin_state {
            if !self.twin_done {
                let started = Instant::now();
                let next = self.twin.step(twin, &self.twin_commands(), &driver);
                self.log.twin_times.push(started.elapsed().as_secs_f64());
                match next {
                    Ok(s) => self.twin_state = Some(s),
                    Err(e) => return self.abort(e),
                }
            }
        }
        match self.plant.step(&self.plant_state, &self.plant_cmd, &driver) {
            Ok(s) => self.plant_state = s,
            Err(e) => return self.abort(e),
        }
        self.step += 1;
        Ok(true)
    }

    fn abort(&mut self, e: Error) -> Result<bool> {
        self.log.failure = Some(e.to_string());
        self.finished = true;
        Ok(false)
    }

    fn record(&mut self, t: f64, active: bool, meas: &Measurements, predicted: [f64; WHEELS]) {
        let p = &self.plant_state;
        let log = &mut self.log;
        let elapsed = t - log.activation_time.unwrap_or(t);
        let reference = if active {
            self.cfg.scenario.reference.value(elapsed)
        } else {
            f64::NAN
        };
        log.time.push(t);
        log.active.push(active);
        log.plant_speed.push(p.chassis_speed);
        log.measured_speed.push(meas.speed);
        log.plant_accel.push(p.longitudinal_accel);
        log.measured_accel.push(meas.accel);
        log.twin_speed.push(self.twin_state.as_ref().map(|s| s.chassis_speed).unwrap_or(f64::NAN));
        log.reference.push([reference; WHEELS]);
        log.twin_slip.push(self.twin_state.as_ref().map(|s| s.slips).unwrap_or([f64::NAN; WHEELS]));
        log.plant_slip.push(p.slips);
        log.measured_slip.push(meas.slips);
        let (nominal, delta) = match self.controller {
            Controller::Til => (self.nominal, self.delta),
            Controller::Mpc => (self.plant_cmd, [0.0; WHEELS]),
        };
        log.nominal_command.push(if active { nominal } else { [0.0; WHEELS] });
        log.delta_command.push(if active { delta } else { [0.0; WHEELS] });
        log.plant_command.push(self.plant_cmd);
        log.actuated_torque.push(p.actuated_torques());
        log.actuated_rate.push(std::array::from_fn(|i| p.actuators[i].rate));
        log.predicted_slip.push(predicted);
        log.mode.push(self.modes);
    }

    pub fn into_log(self) -> RunLog {
        self.log
    }
}

/// Simulates until the plant drops below the deactivation speed or the
/// duration cap is hit (the log is then marked incomplete).
pub fn run_experiment(cfg: &RunConfig, controller: Controller) -> Result<RunLog> {
    let mut world = World::new(cfg, controller)?;
    while world.advance()? {}
    Ok(world.into_log())
}
