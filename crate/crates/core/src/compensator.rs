//! Residual compensator closing the second loop on the physical vehicle.
//!
//! A speed-scheduled PI acts on the mismatch between twin slip and measured
//! plant slip. The integrator uses automatic reset: it is a first-order lag
//! `1/(1 + s Ti)` driven by the saturated output, which reproduces
//! `kp (1 + s Ti) / (s Ti)` while unsaturated and stops winding up at the
//! limits. Everything is discretized with Tustin's rule.

use crate::error::{invalid, Error, Result};
use crate::vehicle::{is_front, VehicleParams};

/// Speed below which the whole control stack hands back to the driver.
pub const DEACTIVATION_SPEED: f64 = 10.0 / 3.6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GainSchedule {
    pub v_lb: f64,
    pub v_ub: f64,
    pub kp_lb: f64,
    /// Use a schedule without the jump at `v_ub`.
    pub continuous: bool,
}

impl Default for GainSchedule {
    fn default() -> Self {
        Self {
            v_lb: 8.0,
            v_ub: 25.0,
            kp_lb: 0.3,
            continuous: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PiGains {
    pub kp: f64,
    pub ti: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompensatorConfig {
    pub front: PiGains,
    pub rear: PiGains,
    pub schedule: GainSchedule,
    /// Constant slip reference used once the twin has finished braking.
    pub fallback_slip_ref: f64,
    pub sample_rate: f64,
    pub max_torque_front: f64,
    pub max_torque_rear: f64,
    pub deactivation_speed: f64,
}

impl Default for CompensatorConfig {
    fn default() -> Self {
        Self {
            front: PiGains { kp: 2000.0, ti: 0.1 },
            rear: PiGains { kp: 1000.0, ti: 0.1 },
            schedule: GainSchedule::default(),
            fallback_slip_ref: 0.10,
            sample_rate: 200.0,
            max_torque_front: 3000.0,
            max_torque_rear: 1500.0,
            deactivation_speed: DEACTIVATION_SPEED,
        }
    }
}

impl CompensatorConfig {
    pub fn for_vehicle(params: &VehicleParams) -> Self {
        Self {
            max_torque_front: params.max_torque(0),
            max_torque_rear: params.max_torque(2),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, g) in [("front", self.front), ("rear", self.rear)] {
            if !(g.kp > 0.0 && g.kp.is_finite()) {
                return Err(invalid(&format!("{name}.kp"), "must be positive"));
            }
            if !(g.ti > 0.0 && g.ti.is_finite()) {
                return Err(invalid(&format!("{name}.ti"), "must be positive"));
            }
        }
        let s = &self.schedule;
        if !(s.v_lb < s.v_ub) {
            return Err(invalid("schedule", "v_lb must be below v_ub"));
        }
        if !(0.0..=1.0).contains(&s.kp_lb) {
            return Err(invalid("schedule.kp_lb", "must lie in [0, 1]"));
        }
        if !(self.sample_rate > 0.0) {
            return Err(invalid("sample_rate", "must be positive"));
        }
        if !(self.max_torque_front > 0.0 && self.max_torque_rear > 0.0) {
            return Err(invalid("max_torque", "must be positive"));
        }
        if !(self.fallback_slip_ref > 0.0 && self.fallback_slip_ref < 1.0) {
            return Err(invalid("fallback_slip_ref", "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn gains(&self, wheel: usize) -> PiGains {
        if is_front(wheel) {
            self.front
        } else {
            self.rear
        }
    }

    pub fn max_torque(&self, wheel: usize) -> f64 {
        if is_front(wheel) {
            self.max_torque_front
        } else {
            self.max_torque_rear
        }
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }
}

/// Proportional gain at `speed`. As printed the law jumps at `v_ub` from
/// `kp_nom (1 + kp_lb)` down to `kp_nom`; the continuous variant rescales the
/// middle branch to end at `kp_nom`.
pub fn scheduled_gain(schedule: &GainSchedule, kp_nominal: f64, speed: f64) -> f64 {
    let s = schedule;
    if speed >= s.v_ub {
        kp_nominal
    } else if speed >= s.v_lb {
        let frac = (speed - s.v_lb) / (s.v_ub - s.v_lb);
        if s.continuous {
            kp_nominal * (s.kp_lb + (1.0 - s.kp_lb) * frac)
        } else {
            kp_nominal * (s.kp_lb + frac)
        }
    } else {
        kp_nominal * s.kp_lb
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PiState {
    pub integrator: f64,
    pub previous_output: f64,
}

/// One Tustin step of the automatic-reset PI. The output is clamped to
/// `[lower, upper]` and the integrator follows the clamped output.
pub fn pi_step(state: &mut PiState, kp: f64, ti: f64, error: f64, lower: f64, upper: f64, dt: f64) -> Result<f64> {
    if !(error.is_finite() && kp.is_finite() && lower.is_finite() && upper.is_finite()) {
        return Err(Error::CompensatorFault);
    }
    let alpha = dt / (2.0 * ti);
    let p = kp * error;
    // unsaturated solution of the implicit update
    let integ = (1.0 - alpha) * state.integrator + alpha * (p + state.previous_output);
    let raw = p + integ;
    let (output, integ) = if raw > upper || raw < lower {
        let out = raw.clamp(lower, upper);
        let integ = ((1.0 - alpha) * state.integrator + alpha * (out + state.previous_output)) / (1.0 + alpha);
        (out, integ)
    } else {
        (raw, integ)
    };
    state.integrator = integ;
    state.previous_output = output;
    Ok(output)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompensatorMode {
    TrackTwin,
    HoldTotalTorque,
    Off,
}

impl CompensatorMode {
    pub fn code(self) -> u8 {
        match self {
            Self::TrackTwin => 0,
            Self::HoldTotalTorque => 1,
            Self::Off => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompensatorInput {
    pub twin_slip: f64,
    pub measured_slip: f64,
    pub chassis_speed: f64,
    pub twin_done: bool,
    /// Nominal command from the twin-side MPC; ignored once the twin is done.
    pub nominal_torque: f64,
}

/// One wheel's compensator with its switching logic.
#[derive(Clone, Debug)]
pub struct TilCompensator {
    config: CompensatorConfig,
    wheel: usize,
    pi: PiState,
    mode: CompensatorMode,
    time: f64,
    total_torque_prev: f64,
    faulted: bool,
}

impl TilCompensator {
    pub fn new(config: CompensatorConfig, wheel: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            wheel,
            pi: PiState::default(),
            mode: CompensatorMode::TrackTwin,
            time: 0.0,
            total_torque_prev: 0.0,
            faulted: false,
        })
    }

    pub fn mode(&self) -> CompensatorMode {
        self.mode
    }

    pub fn state(&self) -> PiState {
        self.pi
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn is_faulted(&self) -> bool {
        self.faulted
    }

    /// Decides the mode and returns the slip reference the PI should track.
    /// On the first step without the twin the integrator is loaded so the
    /// output continues from the last total torque.
    pub fn switching_step(
        &mut self,
        twin_slip_ref: f64,
        twin_done: bool,
        chassis_speed: f64,
        measured_slip: f64,
    ) -> (f64, CompensatorMode) {
        if self.faulted || chassis_speed < self.config.deactivation_speed || self.mode == CompensatorMode::Off {
            self.mode = CompensatorMode::Off;
            return (0.0, self.mode);
        }
        if twin_done {
            let reference = self.config.fallback_slip_ref;
            if self.mode == CompensatorMode::TrackTwin {
                let kp = self.kp(chassis_speed);
                let total = self.total_torque_prev.clamp(0.0, self.config.max_torque(self.wheel));
                let alpha = self.config.dt() / (2.0 * self.config.gains(self.wheel).ti);
                let p = kp * (reference - measured_slip);
                // choose the integrator so the next unsaturated output equals `total`
                self.pi.previous_output = total;
                self.pi.integrator = (total - p - alpha * (p + total)) / (1.0 - alpha);
                self.mode = CompensatorMode::HoldTotalTorque;
            }
            (reference, self.mode)
        } else {
            (twin_slip_ref, self.mode)
        }
    }

    fn kp(&self, speed: f64) -> f64 {
        scheduled_gain(&self.config.schedule, self.config.gains(self.wheel).kp, speed)
    }

    /// Additive correction `T_delta`; the plant command is the nominal torque
    /// plus this value (the nominal torque is dropped once the twin is done).
    pub fn step(&mut self, input: &CompensatorInput) -> Result<f64> {
        self.time += self.config.dt();
        let finite = input.twin_slip.is_finite()
            && input.measured_slip.is_finite()
            && input.chassis_speed.is_finite()
            && input.nominal_torque.is_finite();
        if !finite {
            self.faulted = true;
            self.mode = CompensatorMode::Off;
            return Err(Error::CompensatorFault);
        }
        let (reference, mode) =
            self.switching_step(input.twin_slip, input.twin_done, input.chassis_speed, input.measured_slip);
        let max = self.config.max_torque(self.wheel);
        let nominal = match mode {
            CompensatorMode::TrackTwin => input.nominal_torque.clamp(0.0, max),
            _ => 0.0,
        };
        if mode == CompensatorMode::Off {
            return Ok(0.0);
        }
        let gains = self.config.gains(self.wheel);
        let kp = self.kp(input.chassis_speed);
        let error = reference - input.measured_slip;
        let out = pi_step(&mut self.pi, kp, gains.ti, error, -nominal, max - nominal, self.config.dt()).inspect_err(|_| {
            self.faulted = true;
            self.mode = CompensatorMode::Off;
        })?;
        self.total_torque_prev = nominal + out;
        Ok(out)
    }
}

/// Free-function form of [`TilCompensator::step`].
pub fn compensator_step(compensator: &mut TilCompensator, input: &CompensatorInput) -> Result<f64> {
    compensator.step(input)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DT: f64 = 0.005;

    #[test]
    fn schedule_branches() {
        let s = GainSchedule::default();
        assert_eq!(scheduled_gain(&s, 100.0, s.v_ub + 10.0), 100.0);
        assert!((scheduled_gain(&s, 100.0, s.v_lb) - 30.0).abs() < 1e-12);
        assert!((scheduled_gain(&s, 100.0, 2.0) - 30.0).abs() < 1e-12);
        let s2 = GainSchedule { kp_lb: 0.2, ..s };
        let below = scheduled_gain(&s2, 100.0, s2.v_ub - 1e-9);
        assert!((below - 120.0).abs() < 1e-6);
        let cont = GainSchedule { continuous: true, ..s2 };
        assert!((scheduled_gain(&cont, 100.0, cont.v_ub - 1e-9) - 100.0).abs() < 1e-6);
        assert!((scheduled_gain(&cont, 100.0, cont.v_lb) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn zero_error_zero_output() {
        let mut st = PiState::default();
        for _ in 0..100 {
            assert_eq!(pi_step(&mut st, 500.0, 0.1, 0.0, -1e4, 1e4, DT).unwrap(), 0.0);
        }
    }

    #[test]
    fn ramp_matches_continuous_pi() {
        let (kp, ti, e0) = (800.0, 0.2, 0.01);
        let mut st = PiState::default();
        let steps = (1.0 / DT) as usize;
        let mut out = 0.0;
        for _ in 0..=steps {
            out = pi_step(&mut st, kp, ti, e0, -1e9, 1e9, DT).unwrap();
        }
        let continuous = kp * e0 * (1.0 + 1.0 / ti);
        assert!(((out - continuous) / continuous).abs() < 5e-3, "{out} vs {continuous}");
        let mut st2 = st;
        let next = pi_step(&mut st2, kp, ti, e0, -1e9, 1e9, DT).unwrap();
        let slope = (next - out) / DT;
        assert!(((slope - kp * e0 / ti) / (kp * e0 / ti)).abs() < 5e-3);
    }

    #[test]
    fn frequency_response_matches_continuous() {
        let (kp, ti) = (1500.0, 0.08);
        let n = 64;
        let mut st = PiState::default();
        let h: Vec<f64> = (0..n)
            .map(|k| pi_step(&mut st, kp, ti, if k == 0 { 1.0 } else { 0.0 }, -1e12, 1e12, DT).unwrap())
            .collect();
        // (1 - z^-1) D(z) has a finite impulse response
        let g: Vec<f64> = (0..n).map(|k| h[k] - if k > 0 { h[k - 1] } else { 0.0 }).collect();
        for i in 1..=100 {
            let w = 2.0 * std::f64::consts::PI * 10.0 * i as f64 / 100.0;
            let (mut re, mut im) = (0.0, 0.0);
            for (k, gk) in g.iter().enumerate() {
                let ph = -w * DT * k as f64;
                re += gk * ph.cos();
                im += gk * ph.sin();
            }
            // divide by 1 - e^{-jw dt}
            let (dr, di) = (1.0 - (w * DT).cos(), (w * DT).sin());
            let den = dr * dr + di * di;
            let (zr, zi) = ((re * dr + im * di) / den, (im * dr - re * di) / den);
            let discrete = (zr * zr + zi * zi).sqrt();
            let continuous = kp * (1.0 + 1.0 / (w * ti).powi(2)).sqrt();
            assert!(((discrete - continuous) / continuous).abs() < 0.01, "w={w}");
        }
    }

    #[test]
    fn windup_released_quickly() {
        let (kp, ti) = (2000.0, 0.1);
        let mut st = PiState::default();
        for _ in 0..400 {
            let out = pi_step(&mut st, kp, ti, 1.0, 0.0, 3000.0, DT).unwrap();
            assert!(st.integrator.abs() <= 3000.0 + kp * 1.0);
            assert!(out <= 3000.0);
        }
        assert_eq!(st.previous_output, 3000.0);
        let mut left = None;
        for k in 0..20 {
            let out = pi_step(&mut st, kp, ti, -0.05, 0.0, 3000.0, DT).unwrap();
            if out < 3000.0 {
                left = Some(k + 1);
                break;
            }
        }
        assert!(left.unwrap() <= 5);
    }

    #[test]
    fn non_finite_error_faults() {
        let mut c = TilCompensator::new(CompensatorConfig::default(), 0).unwrap();
        let input = CompensatorInput {
            twin_slip: f64::NAN,
            measured_slip: 0.1,
            chassis_speed: 30.0,
            twin_done: false,
            nominal_torque: 1000.0,
        };
        assert!(matches!(c.step(&input), Err(Error::CompensatorFault)));
        assert_eq!(c.mode(), CompensatorMode::Off);
        let ok = CompensatorInput { twin_slip: 0.1, ..input };
        assert_eq!(c.step(&ok).unwrap(), 0.0);
    }

    #[test]
    fn under_braking_gives_positive_correction() {
        let mut c = TilCompensator::new(CompensatorConfig::default(), 0).unwrap();
        let out = c
            .step(&CompensatorInput {
                twin_slip: 0.10,
                measured_slip: 0.08,
                chassis_speed: 40.0,
                twin_done: false,
                nominal_torque: 1200.0,
            })
            .unwrap();
        assert!(out > 0.0);
    }

    #[test]
    fn front_and_rear_use_their_own_gains() {
        let cfg = CompensatorConfig {
            front: PiGains { kp: 1000.0, ti: 0.1 },
            rear: PiGains { kp: 400.0, ti: 0.3 },
            ..CompensatorConfig::default()
        };
        let input = CompensatorInput {
            twin_slip: 0.10,
            measured_slip: 0.09,
            chassis_speed: 40.0,
            twin_done: false,
            nominal_torque: 800.0,
        };
        let mut f = TilCompensator::new(cfg.clone(), 0).unwrap();
        let mut r = TilCompensator::new(cfg, 3).unwrap();
        assert_ne!(f.step(&input).unwrap(), r.step(&input).unwrap());
    }

    #[test]
    fn twin_never_done_keeps_tracking() {
        let mut c = TilCompensator::new(CompensatorConfig::default(), 1).unwrap();
        for k in 0..500 {
            let input = CompensatorInput {
                twin_slip: 0.1,
                measured_slip: 0.1 + 0.001 * (k as f64).sin(),
                chassis_speed: 50.0 - 0.05 * k as f64,
                twin_done: false,
                nominal_torque: 1000.0,
            };
            c.step(&input).unwrap();
            assert_eq!(c.mode(), CompensatorMode::TrackTwin);
        }
    }

    #[test]
    fn switch_to_hold_is_bumpless_and_stop_hands_back() {
        let mut c = TilCompensator::new(CompensatorConfig::default(), 0).unwrap();
        let mut total = 0.0;
        for _ in 0..100 {
            let nominal = 1100.0;
            let out = c
                .step(&CompensatorInput {
                    twin_slip: 0.1,
                    measured_slip: 0.095,
                    chassis_speed: 12.0,
                    twin_done: false,
                    nominal_torque: nominal,
                })
                .unwrap();
            total = nominal + out;
        }
        let out = c
            .step(&CompensatorInput {
                twin_slip: 0.0,
                measured_slip: 0.095,
                chassis_speed: 12.0,
                twin_done: true,
                nominal_torque: 0.0,
            })
            .unwrap();
        assert_eq!(c.mode(), CompensatorMode::HoldTotalTorque);
        assert!((out - total).abs() < 1.0, "{out} vs {total}");
        let out = c
            .step(&CompensatorInput {
                twin_slip: 0.0,
                measured_slip: 0.095,
                chassis_speed: 2.0,
                twin_done: true,
                nominal_torque: 0.0,
            })
            .unwrap();
        assert_eq!(out, 0.0);
        assert_eq!(c.mode(), CompensatorMode::Off);
    }

    #[test]
    fn total_command_within_limits() {
        let mut c = TilCompensator::new(CompensatorConfig::default(), 2).unwrap();
        for k in 0..2000 {
            let nominal = 750.0 + 900.0 * (k as f64 * 0.01).sin();
            let out = c
                .step(&CompensatorInput {
                    twin_slip: 0.1,
                    measured_slip: 0.1 + 0.3 * (k as f64 * 0.037).sin(),
                    chassis_speed: 30.0,
                    twin_done: false,
                    nominal_torque: nominal,
                })
                .unwrap();
            let total = nominal.clamp(0.0, 1500.0) + out;
            assert!((-1e-9..=1500.0 + 1e-9).contains(&total));
        }
    }
}
