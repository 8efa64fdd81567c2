//! Longitudinal two-track vehicle model for straight braking.
//!
//! Chassis translation, four wheel spin degrees of freedom, Pacejka
//! longitudinal tire forces, quasi-static load transfer and a second-order
//! brake actuator per corner. The same model plays both the digital twin and
//! the (perturbed) physical vehicle.
//!
//! Wheel order everywhere is `fl, fr, rl, rr`.

use nalgebra::Matrix3;

use crate::error::{invalid, Error, Result};

/// Number of corners.
pub const WHEELS: usize = 4;
/// Corner labels in storage order.
pub const WHEEL_NAMES: [&str; WHEELS] = ["fl", "fr", "rl", "rr"];

/// Below this chassis speed the slip is frozen at its last value.
pub const SLIP_FREEZE_SPEED: f64 = 0.5;

pub fn is_front(wheel: usize) -> bool {
    wheel < 2
}

/// Pacejka magic-formula coefficients for the longitudinal force, plus the
/// multiplicative mismatch scalings applied to the peak and shape factors.
#[derive(Clone, Debug, PartialEq)]
pub struct TireParams {
    pub stiffness_factor: f64,
    pub shape_factor: f64,
    pub peak_factor: f64,
    pub curvature_factor: f64,
    /// Multiplicative scaling of the peak friction (mu_s).
    pub peak_friction_scale: f64,
    /// Multiplicative scaling of the shape factor (c_s).
    pub shape_factor_scale: f64,
    /// Linear derating of the peak factor per newton of vertical load.
    pub vertical_load_sensitivity: f64,
}

impl Default for TireParams {
    fn default() -> Self {
        Self {
            stiffness_factor: 12.0,
            shape_factor: 1.9,
            peak_factor: 1.0,
            curvature_factor: 0.97,
            peak_friction_scale: 1.0,
            shape_factor_scale: 1.0,
            vertical_load_sensitivity: 1.0e-5,
        }
    }
}

impl TireParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_friction_scale > 0.0) {
            return Err(invalid("tire.peak_friction_scale", "must be > 0"));
        }
        if !(self.shape_factor_scale > 0.0) {
            return Err(invalid("tire.shape_factor_scale", "must be > 0"));
        }
        let peak = self.peak_factor * self.peak_friction_scale;
        if !(peak > 0.0 && peak <= 2.0) {
            return Err(invalid(
                "tire.peak_factor",
                format!("effective peak {peak} outside (0, 2]"),
            ));
        }
        if !(self.stiffness_factor > 0.0 && self.shape_factor > 0.0) {
            return Err(invalid("tire", "stiffness and shape factors must be > 0"));
        }
        if !(self.vertical_load_sensitivity >= 0.0) {
            return Err(invalid("tire.vertical_load_sensitivity", "must be >= 0"));
        }
        // The sine argument must pass pi/2 before full lock for the curve to
        // have an interior maximum.
        let c = self.shape_factor * self.shape_factor_scale;
        if c * magic_phase(1.0, self) <= std::f64::consts::FRAC_PI_2 {
            return Err(invalid(
                "tire",
                "force-vs-slip curve has no interior maximum in (0, 1)",
            ));
        }
        Ok(())
    }

    /// Slip at which the force peaks (closed form for the sine argument = pi/2).
    pub fn peak_slip(&self) -> f64 {
        let c = self.shape_factor * self.shape_factor_scale;
        let target = (std::f64::consts::FRAC_PI_2 / c).tan();
        // phase is monotone in slip; bisection on [0, 1]
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if magic_inner(mid, self) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

fn magic_inner(slip: f64, tire: &TireParams) -> f64 {
    let bx = tire.stiffness_factor * slip;
    bx - tire.curvature_factor * (bx - bx.atan())
}

fn magic_phase(slip: f64, tire: &TireParams) -> f64 {
    magic_inner(slip, tire).atan()
}

/// Wheel slip `(v - wR) / max(v, wR)`. Positive under braking.
pub fn wheel_slip(chassis_point_speed: f64, wheel_rate: f64, radius: f64) -> Result<f64> {
    let circumferential = wheel_rate * radius;
    let denom = chassis_point_speed.max(circumferential);
    if denom <= 0.0 {
        return Err(Error::DegenerateSpeed);
    }
    Ok((chassis_point_speed - circumferential) / denom)
}

/// Longitudinal tire force. Positive slip (braking) yields a positive force
/// that retards the chassis; the function is odd in slip.
///
/// The peak factor is derated linearly with load first, then scaled by
/// `peak_friction_scale`; the shape factor is scaled by `shape_factor_scale`.
pub fn pacejka_fx(slip: f64, vertical_load: f64, tire: &TireParams) -> f64 {
    if vertical_load <= 0.0 {
        return 0.0;
    }
    let derate = (1.0 - tire.vertical_load_sensitivity * vertical_load).max(0.0);
    let d = tire.peak_factor * derate * tire.peak_friction_scale;
    let c = tire.shape_factor * tire.shape_factor_scale;
    let s = slip.abs();
    slip.signum() * vertical_load * d * (c * magic_phase(s, tire)).sin()
}

/// Point mass added to the vehicle body.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcentratedMass {
    pub mass: f64,
    /// Distance ahead of the nominal centre of gravity, m.
    pub longitudinal_offset: f64,
    /// Distance to the left of the vehicle centreline, m. Loads are split
    /// evenly left/right, so this only documents the placement.
    pub lateral_offset: f64,
    /// Height above ground, m.
    pub height: f64,
}

impl ConcentratedMass {
    pub fn new(mass: f64, longitudinal_offset: f64, lateral_offset: f64, height: f64) -> Self {
        Self {
            mass,
            longitudinal_offset,
            lateral_offset,
            height,
        }
    }
}

/// Driver, passenger and two unbalanced front-trunk masses.
pub fn default_extra_masses() -> Vec<ConcentratedMass> {
    vec![
        ConcentratedMass::new(75.0, 0.30, 0.40, 0.45),
        ConcentratedMass::new(80.0, 0.30, -0.40, 0.45),
        ConcentratedMass::new(90.0, 1.60, 0.35, 0.55),
        ConcentratedMass::new(30.0, 1.60, -0.35, 0.55),
    ]
}

/// Full parameterization of one vehicle instance.
#[derive(Clone, Debug, PartialEq)]
pub struct VehicleParams {
    pub total_mass: f64,
    pub wheel_radius_front: f64,
    pub wheel_radius_rear: f64,
    pub wheel_inertia_front: f64,
    pub wheel_inertia_rear: f64,
    pub cog_to_front_axle: f64,
    pub cog_to_rear_axle: f64,
    pub wheelbase: f64,
    pub cog_height: f64,
    pub gravity: f64,
    pub air_density: f64,
    pub aero_drag_area_coeff: f64,
    pub max_brake_torque_front: f64,
    pub max_brake_torque_rear: f64,
    pub actuator_natural_freq: f64,
    pub actuator_damping: f64,
    /// Actuated torque slew limit, N·m/s.
    pub actuator_slew_limit: f64,
    pub tire: TireParams,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            total_mass: 1612.0,
            wheel_radius_front: 0.33,
            wheel_radius_rear: 0.35,
            wheel_inertia_front: 1.49,
            wheel_inertia_rear: 2.25,
            cog_to_front_axle: 1.57,
            cog_to_rear_axle: 1.03,
            wheelbase: 2.60,
            cog_height: 0.46,
            gravity: 9.81,
            air_density: 1.225,
            aero_drag_area_coeff: 0.6,
            max_brake_torque_front: 3000.0,
            max_brake_torque_rear: 1500.0,
            actuator_natural_freq: 70.0,
            actuator_damping: 0.7,
            actuator_slew_limit: 30_000.0,
            tire: TireParams::default(),
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vehicle.total_mass", self.total_mass),
            ("vehicle.wheel_radius_front", self.wheel_radius_front),
            ("vehicle.wheel_radius_rear", self.wheel_radius_rear),
            ("vehicle.wheel_inertia_front", self.wheel_inertia_front),
            ("vehicle.wheel_inertia_rear", self.wheel_inertia_rear),
            ("vehicle.cog_to_front_axle", self.cog_to_front_axle),
            ("vehicle.cog_to_rear_axle", self.cog_to_rear_axle),
            ("vehicle.wheelbase", self.wheelbase),
            ("vehicle.cog_height", self.cog_height),
            ("vehicle.gravity", self.gravity),
            ("vehicle.max_brake_torque_front", self.max_brake_torque_front),
            ("vehicle.max_brake_torque_rear", self.max_brake_torque_rear),
            ("vehicle.actuator_natural_freq", self.actuator_natural_freq),
            ("vehicle.actuator_damping", self.actuator_damping),
            ("vehicle.actuator_slew_limit", self.actuator_slew_limit),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(invalid(name, format!("must be finite and > 0, got {value}")));
            }
        }
        if !(self.aero_drag_area_coeff >= 0.0) || !(self.air_density >= 0.0) {
            return Err(invalid("vehicle.aero_drag_area_coeff", "must be >= 0"));
        }
        let sum = self.cog_to_front_axle + self.cog_to_rear_axle;
        if (sum - self.wheelbase).abs() > 1e-9 * self.wheelbase.max(1.0) {
            return Err(invalid(
                "vehicle.wheelbase",
                format!("l_f + l_r = {sum} does not match wheelbase {}", self.wheelbase),
            ));
        }
        self.tire.validate()
    }

    pub fn radius(&self, wheel: usize) -> f64 {
        if is_front(wheel) {
            self.wheel_radius_front
        } else {
            self.wheel_radius_rear
        }
    }

    pub fn inertia(&self, wheel: usize) -> f64 {
        if is_front(wheel) {
            self.wheel_inertia_front
        } else {
            self.wheel_inertia_rear
        }
    }

    pub fn max_torque(&self, wheel: usize) -> f64 {
        if is_front(wheel) {
            self.max_brake_torque_front
        } else {
            self.max_brake_torque_rear
        }
    }

    /// Set `l_f` and keep `l_r` consistent with the wheelbase.
    pub fn set_cog_to_front_axle(&mut self, lf: f64) {
        self.cog_to_front_axle = lf;
        self.cog_to_rear_axle = self.wheelbase - lf;
    }
}

/// Add point masses and recompute mass, COG position and COG height from the
/// moment balance. The wheelbase is unchanged.
pub fn apply_mass_config(base: &VehicleParams, masses: &[ConcentratedMass]) -> Result<VehicleParams> {
    let mut out = base.clone();
    if masses.is_empty() {
        return Ok(out);
    }
    let mut mass = base.total_mass;
    // distance behind the front axle, weighted
    let mut moment_x = base.total_mass * base.cog_to_front_axle;
    let mut moment_z = base.total_mass * base.cog_height;
    for m in masses {
        if !(m.mass >= 0.0) {
            return Err(invalid("mass", format!("concentrated mass must be >= 0, got {}", m.mass)));
        }
        mass += m.mass;
        moment_x += m.mass * (base.cog_to_front_axle - m.longitudinal_offset);
        moment_z += m.mass * m.height;
    }
    let lf = moment_x / mass;
    if !(lf > 0.0 && lf < base.wheelbase) {
        return Err(Error::CogOutsideWheelbase {
            lf,
            wheelbase: base.wheelbase,
        });
    }
    out.total_mass = mass;
    out.set_cog_to_front_axle(lf);
    out.cog_height = moment_z / mass;
    Ok(out)
}

/// Per-wheel vertical loads with a flag set when clamping at zero occurred.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WheelLoads {
    pub loads: [f64; WHEELS],
    pub clamped: bool,
}

/// Quasi-static load transfer. Negative acceleration (braking) shifts load
/// to the front axle.
pub fn vertical_loads(params: &VehicleParams, longitudinal_accel: f64) -> WheelLoads {
    let m = params.total_mass;
    let g = params.gravity;
    let l = params.cog_to_front_axle + params.cog_to_rear_axle;
    let transfer = m * longitudinal_accel * params.cog_height / l;
    let front_axle = m * g * params.cog_to_rear_axle / l - transfer;
    let rear_axle = m * g * params.cog_to_front_axle / l + transfer;
    let clamped = front_axle < 0.0 || rear_axle < 0.0;
    let f = 0.5 * front_axle.max(0.0);
    let r = 0.5 * rear_axle.max(0.0);
    WheelLoads {
        loads: [f, f, r, r],
        clamped,
    }
}

/// Actuated brake torque and its rate at one corner.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ActuatorState {
    pub torque: f64,
    pub rate: f64,
}

/// Exact zero-order-hold discretization of the second-order actuator
/// `T'' = wn^2 (u - T) - 2 zeta wn T'` for a fixed step.
#[derive(Clone, Debug, PartialEq)]
pub struct ActuatorModel {
    dt: f64,
    ad: [[f64; 2]; 2],
    bd: [f64; 2],
    slew: f64,
}

impl ActuatorModel {
    pub fn new(natural_freq: f64, damping: f64, slew_limit: f64, dt: f64) -> Self {
        let wn = natural_freq;
        let m = Matrix3::new(
            0.0,
            1.0,
            0.0,
            -wn * wn,
            -2.0 * damping * wn,
            wn * wn,
            0.0,
            0.0,
            0.0,
        ) * dt;
        let e = m.exp();
        Self {
            dt,
            ad: [[e[(0, 0)], e[(0, 1)]], [e[(1, 0)], e[(1, 1)]]],
            bd: [e[(0, 2)], e[(1, 2)]],
            slew: slew_limit,
        }
    }

    pub fn for_params(params: &VehicleParams, dt: f64) -> Self {
        Self::new(
            params.actuator_natural_freq,
            params.actuator_damping,
            params.actuator_slew_limit,
            dt,
        )
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// One step with output saturation at `[0, max_torque]` and slew limiting.
    pub fn step(&self, state: ActuatorState, command: f64, max_torque: f64) -> ActuatorState {
        let u = command.clamp(0.0, max_torque);
        let mut torque = self.ad[0][0] * state.torque + self.ad[0][1] * state.rate + self.bd[0] * u;
        let mut rate = self.ad[1][0] * state.torque + self.ad[1][1] * state.rate + self.bd[1] * u;
        let max_delta = self.slew * self.dt;
        let delta = (torque - state.torque).clamp(-max_delta, max_delta);
        torque = state.torque + delta;
        rate = rate.clamp(-self.slew, self.slew);
        if torque <= 0.0 {
            torque = 0.0;
            rate = rate.max(0.0);
        } else if torque >= max_torque {
            torque = max_torque;
            rate = rate.min(0.0);
        }
        ActuatorState { torque, rate }
    }
}

/// Convenience wrapper that discretizes and steps in one call.
pub fn actuator_step(
    state: ActuatorState,
    commanded_torque: f64,
    dt: f64,
    params: &VehicleParams,
    max_torque: f64,
) -> ActuatorState {
    ActuatorModel::for_params(params, dt).step(state, commanded_torque, max_torque)
}

/// Dynamic state of one vehicle instance.
#[derive(Clone, Debug, PartialEq)]
pub struct VehicleState {
    pub time: f64,
    pub chassis_speed: f64,
    pub chassis_position: f64,
    pub wheel_rates: [f64; WHEELS],
    pub actuators: [ActuatorState; WHEELS],
    /// Chassis acceleration over the last step.
    pub longitudinal_accel: f64,
    /// Last computed slips; held when the chassis is nearly stopped.
    pub slips: [f64; WHEELS],
    /// Vertical loads used during the last step.
    pub wheel_loads: [f64; WHEELS],
}

impl VehicleState {
    /// Free rolling at `speed` with released brakes.
    pub fn free_rolling(params: &VehicleParams, speed: f64) -> Self {
        let mut wheel_rates = [0.0; WHEELS];
        for (i, w) in wheel_rates.iter_mut().enumerate() {
            *w = speed / params.radius(i);
        }
        Self {
            time: 0.0,
            chassis_speed: speed,
            chassis_position: 0.0,
            wheel_rates,
            actuators: [ActuatorState::default(); WHEELS],
            longitudinal_accel: 0.0,
            slips: [0.0; WHEELS],
            wheel_loads: vertical_loads(params, 0.0).loads,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.chassis_speed.is_finite()
            && self.chassis_position.is_finite()
            && self.longitudinal_accel.is_finite()
            && self.wheel_rates.iter().all(|w| w.is_finite())
            && self
                .actuators
                .iter()
                .all(|a| a.torque.is_finite() && a.rate.is_finite())
    }

    /// Translational plus wheel rotational kinetic energy.
    pub fn kinetic_energy(&self, params: &VehicleParams) -> f64 {
        let mut e = 0.5 * params.total_mass * self.chassis_speed * self.chassis_speed;
        for (i, w) in self.wheel_rates.iter().enumerate() {
            e += 0.5 * params.inertia(i) * w * w;
        }
        e
    }

    pub fn actuated_torques(&self) -> [f64; WHEELS] {
        std::array::from_fn(|i| self.actuators[i].torque)
    }
}

/// Driver request vector.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DriverInput {
    pub throttle: f64,
    pub brake: f64,
    pub steer: f64,
    pub gear: i32,
}

impl DriverInput {
    pub fn braking(brake: f64) -> Self {
        Self {
            brake,
            ..Self::default()
        }
    }

    /// Straight braking only: no throttle, no steering.
    pub fn check_straight_braking(&self) -> Result<()> {
        if self.throttle != 0.0 {
            return Err(Error::UnsupportedDriverInput(format!(
                "throttle {} (straight braking requires 0)",
                self.throttle
            )));
        }
        if self.steer != 0.0 {
            return Err(Error::UnsupportedDriverInput(format!(
                "steer {} (straight braking requires 0)",
                self.steer
            )));
        }
        if !(0.0..=1.0).contains(&self.brake) {
            return Err(Error::UnsupportedDriverInput(format!(
                "brake {} outside [0, 1]",
                self.brake
            )));
        }
        Ok(())
    }

    /// Plain brake map used when no braking controller is active.
    pub fn brake_map(&self, params: &VehicleParams) -> [f64; WHEELS] {
        std::array::from_fn(|i| self.brake * params.max_torque(i))
    }
}

/// Vehicle parameters bundled with the actuator discretization for a fixed
/// step size.
#[derive(Clone, Debug)]
pub struct Vehicle {
    params: VehicleParams,
    actuator: ActuatorModel,
}

impl Vehicle {
    pub fn new(params: VehicleParams, dt: f64) -> Result<Self> {
        params.validate()?;
        if !(dt > 0.0) {
            return Err(invalid("dt", "must be > 0"));
        }
        let actuator = ActuatorModel::for_params(&params, dt);
        Ok(Self { params, actuator })
    }

    pub fn params(&self) -> &VehicleParams {
        &self.params
    }

    pub fn dt(&self) -> f64 {
        self.actuator.dt()
    }

    /// Advance one fixed step: actuators (exact ZOH), then chassis and
    /// wheels with RK4, then the acceleration that drives the next step's
    /// load transfer.
    pub fn step(
        &self,
        state: &VehicleState,
        torque_commands: &[f64; WHEELS],
        driver: &DriverInput,
    ) -> Result<VehicleState> {
        driver.check_straight_braking()?;
        if !state.is_finite() {
            return Err(Error::Divergence {
                time: state.time,
                last_valid: Box::new(state.clone()),
            });
        }
        let p = &self.params;
        let dt = self.actuator.dt();

        let old_torque = state.actuated_torques();
        let mut actuators = state.actuators;
        for (i, act) in actuators.iter_mut().enumerate() {
            *act = self.actuator.step(*act, torque_commands[i], p.max_torque(i));
        }
        let new_torque: [f64; WHEELS] = std::array::from_fn(|i| actuators[i].torque);

        let loads = vertical_loads(p, state.longitudinal_accel).loads;
        let frozen = state.slips;

        let deriv = |y: &[f64; 5], frac: f64| -> [f64; 5] {
            let v = y[0];
            let mut out = [0.0; 5];
            let mut total_force = 0.0;
            for i in 0..WHEELS {
                let w = y[i + 1].max(0.0);
                let r = p.radius(i);
                let slip = if v < SLIP_FREEZE_SPEED {
                    frozen[i]
                } else {
                    wheel_slip(v, w, r).unwrap_or(frozen[i])
                };
                let fx = pacejka_fx(slip, loads[i], &p.tire);
                let torque = old_torque[i] + frac * (new_torque[i] - old_torque[i]);
                let mut w_dot = (fx * r - torque) / p.inertia(i);
                if y[i + 1] <= 0.0 && w_dot < 0.0 {
                    w_dot = 0.0;
                }
                out[i + 1] = w_dot;
                total_force += fx;
            }
            let drag = 0.5 * p.air_density * p.aero_drag_area_coeff * v * v;
            let mut v_dot = (-total_force - drag) / p.total_mass;
            if v <= 0.0 && v_dot < 0.0 {
                v_dot = 0.0;
            }
            out[0] = v_dot;
            out
        };

        let y0 = [
            state.chassis_speed,
            state.wheel_rates[0],
            state.wheel_rates[1],
            state.wheel_rates[2],
            state.wheel_rates[3],
        ];
        let add = |a: &[f64; 5], k: &[f64; 5], h: f64| -> [f64; 5] { std::array::from_fn(|j| a[j] + h * k[j]) };
        let k1 = deriv(&y0, 0.0);
        let k2 = deriv(&add(&y0, &k1, 0.5 * dt), 0.5);
        let k3 = deriv(&add(&y0, &k2, 0.5 * dt), 0.5);
        let k4 = deriv(&add(&y0, &k3, dt), 1.0);
        let y1: [f64; 5] =
            std::array::from_fn(|j| y0[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]));

        let speed = y1[0].max(0.0);
        let wheel_rates: [f64; WHEELS] = std::array::from_fn(|i| y1[i + 1].max(0.0));
        let mut slips = state.slips;
        if speed >= SLIP_FREEZE_SPEED {
            for i in 0..WHEELS {
                slips[i] = wheel_slip(speed, wheel_rates[i], p.radius(i)).unwrap_or(slips[i]);
            }
        }

        let next = VehicleState {
            time: state.time + dt,
            chassis_speed: speed,
            chassis_position: state.chassis_position + 0.5 * dt * (state.chassis_speed + speed),
            wheel_rates,
            actuators,
            longitudinal_accel: (speed - state.chassis_speed) / dt,
            slips,
            wheel_loads: loads,
        };
        if !next.is_finite() {
            return Err(Error::Divergence {
                time: state.time,
                last_valid: Box::new(state.clone()),
            });
        }
        Ok(next)
    }
}

/// Free-function form of [`Vehicle::step`].
pub fn step_vehicle(
    state: &VehicleState,
    torque_commands: &[f64; WHEELS],
    driver: &DriverInput,
    params: &VehicleParams,
    dt: f64,
) -> Result<VehicleState> {
    Vehicle::new(params.clone(), dt)?.step(state, torque_commands, driver)
}
