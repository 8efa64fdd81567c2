//! Per-wheel linear MPC for slip tracking.
//!
//! Each call re-linearizes the slip model at the measured speed and
//! acceleration, converts it to velocity form and solves a condensed QP over
//! the torque increments of the horizon. Only the first move is applied.

mod model;
mod qp;

pub use model::{
    augment, linearize_slip_model, to_velocity_form, AugmentedModel, ContinuousModel, DiscreteModel,
    SlipPredictionModel, WheelModel, AUGMENTED_STATES, PLANT_STATES,
};
pub use qp::{kkt_residuals, solve_qp, solve_qp_from, KktResiduals, QpProblem, QpSolution, MAX_ITERATIONS, MIN_HESSIAN_EIGENVALUE};

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MpcConfig {
    pub horizon_steps: usize,
    pub tracking_weight: f64,
    pub input_rate_weight: f64,
    pub min_torque: f64,
    pub max_torque: f64,
    /// Torque slew bound in N·m/s; the per-step bound is this times the sample time.
    pub rate_limit: f64,
    pub sample_time: f64,
    /// Below this chassis speed the slip model is not used.
    pub min_speed: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon_steps: 5,
            tracking_weight: 1.0,
            input_rate_weight: 5e-10,
            min_torque: 0.0,
            max_torque: 3000.0,
            rate_limit: 30_000.0,
            sample_time: 0.005,
            min_speed: 1.0,
        }
    }
}

impl MpcConfig {
    pub fn with_max_torque(mut self, max_torque: f64) -> Self {
        self.max_torque = max_torque;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon_steps == 0 {
            return Err(invalid("horizon_steps", "must be at least 1"));
        }
        if !(self.tracking_weight > 0.0 && self.input_rate_weight > 0.0) {
            return Err(invalid("weights", "must be positive"));
        }
        if !(self.min_torque <= self.max_torque) {
            return Err(Error::Config(format!(
                "torque bounds inconsistent: min {} > max {}",
                self.min_torque, self.max_torque
            )));
        }
        if !(self.rate_limit > 0.0 && self.sample_time > 0.0 && self.min_speed > 0.0) {
            return Err(invalid("rate_limit/sample_time/min_speed", "must be positive"));
        }
        Ok(())
    }

    pub fn step_limit(&self) -> f64 {
        self.rate_limit * self.sample_time
    }
}

/// Condensed prediction: tracking errors over the horizon are
/// `free + gamma * du`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub free: DVector<f64>,
    pub gamma: DMatrix<f64>,
}

impl Prediction {
    pub fn errors(&self, du: &DVector<f64>) -> DVector<f64> {
        &self.free + &self.gamma * du
    }
}

/// Propagates the augmented model over `horizon` steps. `reference` holds the
/// absolute reference from the current instant onward; it is padded with its
/// last value.
pub fn predict(model: &AugmentedModel, z0: &DVector<f64>, reference: &[f64], horizon: usize) -> Prediction {
    let n = model.states();
    let ei = model.error_index();
    let r = |j: usize| -> f64 {
        match reference.len() {
            0 => 0.0,
            len => reference[j.min(len - 1)],
        }
    };
    let mut free = DVector::zeros(horizon);
    let mut gamma = DMatrix::zeros(horizon, horizon);
    let mut z = z0.clone();
    // columns of the input response, one per future move
    let mut responses: Vec<DVector<f64>> = Vec::with_capacity(horizon);
    for j in 0..horizon {
        z = &model.a * &z;
        z[ei] -= r(j + 1) - r(j);
        for resp in responses.iter_mut() {
            *resp = &model.a * &*resp;
        }
        responses.push(model.b.clone());
        free[j] = z[ei];
        for (i, resp) in responses.iter().enumerate() {
            gamma[(j, i)] = resp[ei];
        }
        debug_assert_eq!(resp_len(&responses), n);
    }
    Prediction { free, gamma }
}

fn resp_len(responses: &[DVector<f64>]) -> usize {
    responses.first().map(|r| r.len()).unwrap_or(0)
}

/// Condensed QP over the torque increments with bounds on the cumulative
/// command and on each increment. The cost is normalized so the Hessian has
/// unit mean diagonal; the minimizer is unchanged.
pub fn build_qp(prediction: &Prediction, previous_command: f64, config: &MpcConfig) -> Result<QpProblem> {
    config.validate()?;
    let n = prediction.free.len();
    if n == 0 {
        return Err(invalid("horizon_steps", "must be at least 1"));
    }
    let q = config.tracking_weight;
    let r = config.input_rate_weight;
    let g = &prediction.gamma;
    let mut h = (g.transpose() * g) * (2.0 * q) + DMatrix::identity(n, n) * (2.0 * r);
    let mut f = (g.transpose() * &prediction.free) * (2.0 * q);
    let scale = n as f64 / h.trace();
    h *= scale;
    f *= scale;

    let u_prev = previous_command.clamp(config.min_torque, config.max_torque);
    let lower_tri = DMatrix::from_fn(n, n, |i, j| if j <= i { 1.0 } else { 0.0 });
    let mut a = DMatrix::zeros(2 * n, n);
    let mut b = DVector::zeros(2 * n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = lower_tri[(i, j)];
            a[(n + i, j)] = -lower_tri[(i, j)];
        }
        b[i] = config.max_torque - u_prev;
        b[n + i] = u_prev - config.min_torque;
    }
    let step = config.step_limit();
    QpProblem::new(
        h,
        f,
        a,
        b,
        DVector::from_element(n, -step),
        DVector::from_element(n, step),
    )
}

/// Controller measurements for one wheel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MpcMeasurement {
    pub slip: f64,
    pub speed: f64,
    pub accel: f64,
    pub torque: f64,
    pub torque_rate: f64,
}

impl MpcMeasurement {
    fn is_finite(&self) -> bool {
        self.slip.is_finite()
            && self.speed.is_finite()
            && self.accel.is_finite()
            && self.torque.is_finite()
            && self.torque_rate.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MpcStatus {
    Solved,
    /// Speed at or below the model limit; previous command held.
    ModelInvalid,
    /// QP failed; previous command held.
    SolverFailure,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcOutput {
    pub command: f64,
    pub status: MpcStatus,
    pub iterations: usize,
    pub kkt: KktResiduals,
    /// Predicted slip at steps 1..=N under the optimal moves.
    pub predicted_slip: Vec<f64>,
}

/// One wheel's controller.
#[derive(Clone, Debug)]
pub struct SlipMpc {
    config: MpcConfig,
    wheel: WheelModel,
    previous_command: f64,
    previous_state: Option<[f64; PLANT_STATES]>,
    last_prediction: Vec<f64>,
}

impl SlipMpc {
    pub fn new(config: MpcConfig, wheel: WheelModel) -> Result<Self> {
        config.validate()?;
        if !(wheel.radius > 0.0 && wheel.inertia > 0.0 && wheel.natural_frequency > 0.0 && wheel.damping > 0.0) {
            return Err(invalid("wheel model", "radius, inertia, frequency and damping must be positive"));
        }
        Ok(Self {
            config,
            wheel,
            previous_command: 0.0,
            previous_state: None,
            last_prediction: Vec::new(),
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.config
    }

    pub fn wheel(&self) -> &WheelModel {
        &self.wheel
    }

    pub fn previous_command(&self) -> f64 {
        self.previous_command
    }

    pub fn last_prediction(&self) -> &[f64] {
        &self.last_prediction
    }

    /// Starts from a known actuator command, e.g. when taking over a wheel
    /// that is already braking.
    pub fn reset(&mut self, command: f64) {
        self.previous_command = command.clamp(self.config.min_torque, self.config.max_torque);
        self.previous_state = None;
        self.last_prediction.clear();
    }

    /// `reference[0]` is the slip reference now, later entries preview the
    /// following controller steps.
    pub fn mpc_step(&mut self, meas: &MpcMeasurement, reference: &[f64]) -> MpcOutput {
        let hold = |s: &Self, status| MpcOutput {
            command: s.previous_command,
            status,
            iterations: 0,
            kkt: KktResiduals::default(),
            predicted_slip: Vec::new(),
        };
        if !meas.is_finite() {
            self.previous_state = None;
            return hold(self, MpcStatus::ModelInvalid);
        }
        let x = [meas.slip, meas.torque, meas.torque_rate];
        let model = match linearize_slip_model(
            meas.speed,
            meas.accel,
            &self.wheel,
            self.config.sample_time,
            self.config.horizon_steps,
            self.config.min_speed,
        ) {
            Ok(m) => m,
            Err(_) => {
                self.previous_state = Some(x);
                return hold(self, MpcStatus::ModelInvalid);
            }
        };
        let aug = to_velocity_form(&model);
        let dx = match self.previous_state {
            Some(p) => [x[0] - p[0], x[1] - p[1], x[2] - p[2]],
            None => [0.0; PLANT_STATES],
        };
        self.previous_state = Some(x);
        let r0 = reference.first().copied().unwrap_or(0.0);
        let z0 = DVector::from_vec(vec![dx[0], dx[1], dx[2], meas.slip - r0]);
        let n = self.config.horizon_steps;
        let prediction = predict(&aug, &z0, reference, n);
        let solved = build_qp(&prediction, self.previous_command, &self.config).and_then(|qp| {
            let sol = solve_qp(&qp)?;
            Ok((kkt_residuals(&qp, &sol), sol))
        });
        match solved {
            Ok((kkt, sol)) => {
                let command = (self.previous_command + sol.x[0]).clamp(self.config.min_torque, self.config.max_torque);
                let errors = prediction.errors(&sol.x);
                let r = |j: usize| reference.get(j).or(reference.last()).copied().unwrap_or(0.0);
                self.last_prediction = (0..n).map(|j| errors[j] + r(j + 1)).collect();
                self.previous_command = command;
                debug_assert!(kkt.max() < 1e-6, "KKT residuals {kkt:?}");
                MpcOutput {
                    command,
                    status: MpcStatus::Solved,
                    iterations: sol.iterations,
                    kkt,
                    predicted_slip: self.last_prediction.clone(),
                }
            }
            Err(_) => hold(self, MpcStatus::SolverFailure),
        }
    }
}
