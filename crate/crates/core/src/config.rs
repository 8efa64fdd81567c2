//! Flat `section.key = value` configuration covering a full run: scenario,
//! nominal vehicle, sensors, controllers and the baseline's model overrides.
//!
//! Lines starting with `#` are comments. A `preset = <name>` line selects the
//! starting scenario; later keys override it. Overlays written by the tuner
//! use the same format.

use std::fmt::Write as _;
use std::path::Path;

use crate::compensator::CompensatorConfig;
use crate::error::{Error, Result};
use crate::mpc::{MpcConfig, WheelModel};
use crate::scenario::{ReferenceProfile, Scenario};
use crate::sensors::NoiseConfig;
use crate::vehicle::{default_extra_masses, is_front, ConcentratedMass, VehicleParams};

#[derive(Clone, Debug, PartialEq)]
pub struct MpcSettings {
    pub horizon_steps: usize,
    pub tracking_weight: f64,
    pub input_rate_weight: f64,
    pub min_speed: f64,
}

impl Default for MpcSettings {
    fn default() -> Self {
        let d = MpcConfig::default();
        Self {
            horizon_steps: d.horizon_steps,
            tracking_weight: d.tracking_weight,
            input_rate_weight: d.input_rate_weight,
            min_speed: d.min_speed,
        }
    }
}

/// Predictive-model parameters of the stand-alone MPC, adjusted by the
/// end-of-line tuning. `None` means the nominal value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BaselineSettings {
    pub radius_front: Option<f64>,
    pub inertia_front: Option<f64>,
    pub radius_rear: Option<f64>,
    pub inertia_rear: Option<f64>,
    /// Feed the twin's ideal slip instead of the scenario reference.
    pub reference_from_twin: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub vehicle: VehicleParams,
    pub noise: NoiseConfig,
    pub mpc: MpcSettings,
    pub compensator: CompensatorConfig,
    pub baseline: BaselineSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let vehicle = VehicleParams::default();
        Self {
            scenario: Scenario::default(),
            compensator: CompensatorConfig::for_vehicle(&vehicle),
            vehicle,
            noise: NoiseConfig::default(),
            mpc: MpcSettings::default(),
            baseline: BaselineSettings::default(),
        }
    }
}

fn parse_f64(key: &str, value: &str) -> std::result::Result<f64, String> {
    value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("`{key}` expects a finite number, got `{value}`"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("`{key}` expects true/false, got `{value}`")),
    }
}

fn parse_masses(value: &str) -> std::result::Result<Vec<ConcentratedMass>, String> {
    match value {
        "none" => Ok(Vec::new()),
        "table" => Ok(default_extra_masses()),
        list => list
            .split(';')
            .filter(|s| !s.trim().is_empty())
            .map(|item| {
                let f: Vec<f64> = item
                    .split(':')
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| format!("bad mass entry `{item}`"))?;
                if f.len() != 4 || f[0] < 0.0 {
                    return Err(format!("mass entry `{item}` needs mass:longitudinal:lateral:height"));
                }
                Ok(ConcentratedMass::new(f[0], f[1], f[2], f[3]))
            })
            .collect(),
    }
}

fn format_masses(masses: &[ConcentratedMass]) -> String {
    if masses.is_empty() {
        return "none".into();
    }
    if masses == default_extra_masses().as_slice() {
        return "table".into();
    }
    masses
        .iter()
        .map(|m| format!("{}:{}:{}:{}", m.mass, m.longitudinal_offset, m.lateral_offset, m.height))
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_reference(value: &str) -> std::result::Result<ReferenceProfile, String> {
    let mut parts = value.split_whitespace();
    let kind = parts.next().unwrap_or("");
    let rest: Vec<&str> = parts.collect();
    let nums = |items: &[&str]| -> std::result::Result<Vec<f64>, String> {
        items
            .iter()
            .map(|x| x.parse::<f64>().map_err(|_| format!("bad number `{x}` in reference")))
            .collect()
    };
    match kind {
        "constant" if rest.len() == 1 => Ok(ReferenceProfile::Constant(nums(&rest)?[0])),
        "pulse" if rest.len() == 3 => {
            let v = nums(&rest)?;
            Ok(ReferenceProfile::Pulse {
                base: v[0],
                amplitude: v[1],
                period: v[2],
            })
        }
        "piecewise" if !rest.is_empty() => rest
            .iter()
            .map(|p| {
                let (t, v) = p.split_once(':').ok_or_else(|| format!("piecewise point `{p}` needs time:value"))?;
                let v = nums(&[t, v])?;
                Ok((v[0], v[1]))
            })
            .collect::<std::result::Result<Vec<_>, String>>()
            .map(ReferenceProfile::Piecewise),
        _ => Err(format!(
            "reference must be `constant V`, `pulse BASE AMPLITUDE PERIOD` or `piecewise T:V ...`, got `{value}`"
        )),
    }
}

fn format_reference(r: &ReferenceProfile) -> String {
    match r {
        ReferenceProfile::Constant(v) => format!("constant {v}"),
        ReferenceProfile::Pulse { base, amplitude, period } => format!("pulse {base} {amplitude} {period}"),
        ReferenceProfile::Piecewise(points) => {
            let pts: Vec<String> = points.iter().map(|(t, v)| format!("{t}:{v}")).collect();
            format!("piecewise {}", pts.join(" "))
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "nominal".into())
}

fn parse_opt(key: &str, value: &str) -> std::result::Result<Option<f64>, String> {
    if value == "nominal" {
        Ok(None)
    } else {
        parse_f64(key, value).map(Some)
    }
}

impl RunConfig {
    pub fn from_preset(name: &str) -> Result<Self> {
        let scenario = Scenario::preset(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown scenario preset `{name}` (expected one of {})",
                crate::scenario::PRESETS.join(", ")
            ))
        })?;
        Ok(Self {
            scenario,
            ..Self::default()
        })
    }

    /// Parses a config text. Errors carry the 1-based line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Applies the keys of `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.apply(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: idx + 1,
                message: match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                },
            })?;
        }
        self.validate()
    }

    /// Applies `key=value` strings from the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.apply(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.vehicle.validate()?;
        self.noise.validate()?;
        self.compensator.validate()?;
        self.mpc_config(0).validate()?;
        if self.mpc.horizon_steps == 0 {
            return Err(Error::Config("mpc.horizon_steps must be at least 1".into()));
        }
        for v in [
            self.baseline.radius_front,
            self.baseline.inertia_front,
            self.baseline.radius_rear,
            self.baseline.inertia_rear,
        ]
        .into_iter()
        .flatten()
        {
            if !(v > 0.0) {
                return Err(Error::Config("baseline model parameters must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        self.apply_inner(key, value).map_err(Error::Config)
    }

    fn apply_inner(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let num = || parse_f64(key, value);
        let s = &mut self.scenario;
        let v = &mut self.vehicle;
        let n = &mut self.noise;
        let c = &mut self.compensator;
        match key {
            "preset" => {
                let p = Scenario::preset(value).ok_or_else(|| format!("unknown preset `{value}`"))?;
                *s = p;
            }
            "scenario.name" => s.name = value.to_string(),
            "scenario.initial_speed" => s.initial_speed = num()?,
            "scenario.brake_trigger_time" => s.brake_trigger_time = num()?,
            "scenario.duration_cap" => s.duration_cap = num()?,
            "scenario.seed" => s.seed = value.parse().map_err(|_| format!("`{key}` expects an integer"))?,
            "scenario.reference" => s.reference = parse_reference(value)?,
            "scenario.noise" => s.noise = parse_bool(key, value)?,
            "scenario.driver_brake" => s.driver_brake = num()?,
            "plant.masses" => s.plant_masses = parse_masses(value)?,
            "plant.peak_friction_scale" => s.peak_friction_scale = num()?,
            "plant.shape_factor_scale" => s.shape_factor_scale = num()?,
            "twin.mass_offset" => s.twin_mass_offset = num()?,

            "vehicle.total_mass" => v.total_mass = num()?,
            "vehicle.wheel_radius_front" => v.wheel_radius_front = num()?,
            "vehicle.wheel_radius_rear" => v.wheel_radius_rear = num()?,
            "vehicle.wheel_inertia_front" => v.wheel_inertia_front = num()?,
            "vehicle.wheel_inertia_rear" => v.wheel_inertia_rear = num()?,
            "vehicle.cog_to_front_axle" => v.set_cog_to_front_axle(num()?),
            "vehicle.wheelbase" => {
                v.wheelbase = num()?;
                v.cog_to_rear_axle = v.wheelbase - v.cog_to_front_axle;
            }
            "vehicle.cog_height" => v.cog_height = num()?,
            "vehicle.gravity" => v.gravity = num()?,
            "vehicle.air_density" => v.air_density = num()?,
            "vehicle.aero_drag_area_coeff" => v.aero_drag_area_coeff = num()?,
            "vehicle.max_brake_torque_front" => {
                v.max_brake_torque_front = num()?;
                c.max_torque_front = v.max_brake_torque_front;
            }
            "vehicle.max_brake_torque_rear" => {
                v.max_brake_torque_rear = num()?;
                c.max_torque_rear = v.max_brake_torque_rear;
            }
            "vehicle.actuator_natural_freq" => v.actuator_natural_freq = num()?,
            "vehicle.actuator_damping" => v.actuator_damping = num()?,
            "vehicle.actuator_slew_limit" => v.actuator_slew_limit = num()?,
            "tire.stiffness_factor" => v.tire.stiffness_factor = num()?,
            "tire.shape_factor" => v.tire.shape_factor = num()?,
            "tire.peak_factor" => v.tire.peak_factor = num()?,
            "tire.curvature_factor" => v.tire.curvature_factor = num()?,
            "tire.vertical_load_sensitivity" => v.tire.vertical_load_sensitivity = num()?,

            "sensors.accel_noise_std" => n.accel_noise_std = num()?,
            "sensors.speed_noise_std" => n.speed_noise_std = num()?,
            "sensors.speed_lowpass_cutoff" => n.speed_lowpass_cutoff = num()?,
            "sensors.wheel_noise_offset" => n.wheel_noise_offset = num()?,
            "sensors.wheel_noise_speed_gain" => n.wheel_noise_speed_gain = num()?,

            "mpc.horizon_steps" => {
                self.mpc.horizon_steps = value.parse().map_err(|_| format!("`{key}` expects an integer"))?
            }
            "mpc.tracking_weight" => self.mpc.tracking_weight = num()?,
            "mpc.input_rate_weight" => self.mpc.input_rate_weight = num()?,
            "mpc.min_speed" => self.mpc.min_speed = num()?,

            "compensator.kp_front" => c.front.kp = num()?,
            "compensator.ti_front" => c.front.ti = num()?,
            "compensator.kp_rear" => c.rear.kp = num()?,
            "compensator.ti_rear" => c.rear.ti = num()?,
            "compensator.v_lb" => c.schedule.v_lb = num()?,
            "compensator.v_ub" => c.schedule.v_ub = num()?,
            "compensator.kp_lb" => c.schedule.kp_lb = num()?,
            "compensator.continuous_schedule" => c.schedule.continuous = parse_bool(key, value)?,
            "compensator.fallback_slip_ref" => c.fallback_slip_ref = num()?,

            "baseline.radius_front" => self.baseline.radius_front = parse_opt(key, value)?,
            "baseline.inertia_front" => self.baseline.inertia_front = parse_opt(key, value)?,
            "baseline.radius_rear" => self.baseline.radius_rear = parse_opt(key, value)?,
            "baseline.inertia_rear" => self.baseline.inertia_rear = parse_opt(key, value)?,
            "baseline.reference_from_twin" => self.baseline.reference_from_twin = parse_bool(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order. Parsing the
    /// result reproduces the configuration.
    pub fn to_text(&self) -> String {
        let s = &self.scenario;
        let v = &self.vehicle;
        let n = &self.noise;
        let c = &self.compensator;
        let b = &self.baseline;
        let mut out = String::new();
        let mut put = |k: &str, val: String| {
            let _ = writeln!(out, "{k} = {val}");
        };
        put("scenario.name", s.name.clone());
        put("scenario.initial_speed", s.initial_speed.to_string());
        put("scenario.brake_trigger_time", s.brake_trigger_time.to_string());
        put("scenario.duration_cap", s.duration_cap.to_string());
        put("scenario.seed", s.seed.to_string());
        put("scenario.reference", format_reference(&s.reference));
        put("scenario.noise", s.noise.to_string());
        put("scenario.driver_brake", s.driver_brake.to_string());
        put("plant.masses", format_masses(&s.plant_masses));
        put("plant.peak_friction_scale", s.peak_friction_scale.to_string());
        put("plant.shape_factor_scale", s.shape_factor_scale.to_string());
        put("twin.mass_offset", s.twin_mass_offset.to_string());
        put("vehicle.total_mass", v.total_mass.to_string());
        put("vehicle.wheel_radius_front", v.wheel_radius_front.to_string());
        put("vehicle.wheel_radius_rear", v.wheel_radius_rear.to_string());
        put("vehicle.wheel_inertia_front", v.wheel_inertia_front.to_string());
        put("vehicle.wheel_inertia_rear", v.wheel_inertia_rear.to_string());
        put("vehicle.wheelbase", v.wheelbase.to_string());
        put("vehicle.cog_to_front_axle", v.cog_to_front_axle.to_string());
        put("vehicle.cog_height", v.cog_height.to_string());
        put("vehicle.gravity", v.gravity.to_string());
        put("vehicle.air_density", v.air_density.to_string());
        put("vehicle.aero_drag_area_coeff", v.aero_drag_area_coeff.to_string());
        put("vehicle.max_brake_torque_front", v.max_brake_torque_front.to_string());
        put("vehicle.max_brake_torque_rear", v.max_brake_torque_rear.to_string());
        put("vehicle.actuator_natural_freq", v.actuator_natural_freq.to_string());
        put("vehicle.actuator_damping", v.actuator_damping.to_string());
        put("vehicle.actuator_slew_limit", v.actuator_slew_limit.to_string());
        put("tire.stiffness_factor", v.tire.stiffness_factor.to_string());
        put("tire.shape_factor", v.tire.shape_factor.to_string());
        put("tire.peak_factor", v.tire.peak_factor.to_string());
        put("tire.curvature_factor", v.tire.curvature_factor.to_string());
        put("tire.vertical_load_sensitivity", v.tire.vertical_load_sensitivity.to_string());
        put("sensors.accel_noise_std", n.accel_noise_std.to_string());
        put("sensors.speed_noise_std", n.speed_noise_std.to_string());
        put("sensors.speed_lowpass_cutoff", n.speed_lowpass_cutoff.to_string());
        put("sensors.wheel_noise_offset", n.wheel_noise_offset.to_string());
        put("sensors.wheel_noise_speed_gain", n.wheel_noise_speed_gain.to_string());
        put("mpc.horizon_steps", self.mpc.horizon_steps.to_string());
        put("mpc.tracking_weight", self.mpc.tracking_weight.to_string());
        put("mpc.input_rate_weight", self.mpc.input_rate_weight.to_string());
        put("mpc.min_speed", self.mpc.min_speed.to_string());
        put("compensator.kp_front", c.front.kp.to_string());
        put("compensator.ti_front", c.front.ti.to_string());
        put("compensator.kp_rear", c.rear.kp.to_string());
        put("compensator.ti_rear", c.rear.ti.to_string());
        put("compensator.v_lb", c.schedule.v_lb.to_string());
        put("compensator.v_ub", c.schedule.v_ub.to_string());
        put("compensator.kp_lb", c.schedule.kp_lb.to_string());
        put("compensator.continuous_schedule", c.schedule.continuous.to_string());
        put("compensator.fallback_slip_ref", c.fallback_slip_ref.to_string());
        put("baseline.radius_front", fmt_opt(b.radius_front));
        put("baseline.inertia_front", fmt_opt(b.inertia_front));
        put("baseline.radius_rear", fmt_opt(b.radius_rear));
        put("baseline.inertia_rear", fmt_opt(b.inertia_rear));
        put("baseline.reference_from_twin", b.reference_from_twin.to_string());
        out
    }

    /// FNV-1a hash of the canonical text, for reports.
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }

    /// Noise actually applied to the plant sensors.
    pub fn plant_noise(&self) -> NoiseConfig {
        let base = if self.scenario.noise {
            self.noise.clone()
        } else {
            NoiseConfig::noiseless()
        };
        NoiseConfig {
            seed: self.scenario.seed,
            ..base
        }
    }

    pub fn mpc_config(&self, wheel: usize) -> MpcConfig {
        MpcConfig {
            horizon_steps: self.mpc.horizon_steps,
            tracking_weight: self.mpc.tracking_weight,
            input_rate_weight: self.mpc.input_rate_weight,
            min_speed: self.mpc.min_speed,
            max_torque: self.vehicle.max_torque(wheel),
            rate_limit: self.vehicle.actuator_slew_limit,
            ..MpcConfig::default()
        }
    }

    /// Predictor constants for the twin-side controller.
    pub fn nominal_wheel_model(&self, wheel: usize) -> WheelModel {
        WheelModel {
            radius: self.vehicle.radius(wheel),
            inertia: self.vehicle.inertia(wheel),
            natural_frequency: self.vehicle.actuator_natural_freq,
            damping: self.vehicle.actuator_damping,
        }
    }

    /// Predictor constants for the stand-alone MPC, with end-of-line
    /// adjustments applied.
    pub fn baseline_wheel_model(&self, wheel: usize) -> WheelModel {
        let mut m = self.nominal_wheel_model(wheel);
        let b = &self.baseline;
        let (r, j) = if is_front(wheel) {
            (b.radius_front, b.inertia_front)
        } else {
            (b.radius_rear, b.inertia_rear)
        };
        if let Some(r) = r {
            m.radius = r;
        }
        if let Some(j) = j {
            m.inertia = j;
        }
        m
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_text() {
        let mut cfg = RunConfig::from_preset("friction").unwrap();
        cfg.compensator.front.kp = 1234.5;
        cfg.baseline.inertia_rear = Some(2.7);
        cfg.scenario.reference = ReferenceProfile::Piecewise(vec![(0.0, 0.08), (1.25, 0.11)]);
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = RunConfig::parse("# comment\nscenario.seed = 3\nvehicle.total_mass = heavy\n").unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("vehicle.total_mass"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(RunConfig::parse("\n\nbogus.key = 1"), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(RunConfig::parse("no equals sign"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn preset_line_then_overrides() {
        let cfg = RunConfig::parse("preset = masses\nscenario.seed = 9 # trailing comment\n").unwrap();
        assert_eq!(cfg.scenario.name, "masses");
        assert_eq!(cfg.scenario.seed, 9);
        assert_eq!(cfg.scenario.plant_masses.len(), 4);
    }

    #[test]
    fn overrides_apply_and_validate() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["compensator.kp_rear=77".into()]).unwrap();
        assert_eq!(cfg.compensator.rear.kp, 77.0);
        assert!(cfg.apply_overrides(&["compensator.ti_rear=-1".into()]).is_err());
        assert!(cfg.apply_overrides(&["nonsense".into()]).is_err());
    }

    #[test]
    fn noise_follows_scenario_switch_and_seed() {
        let mut cfg = RunConfig::from_preset("noisy").unwrap();
        cfg.scenario.seed = 42;
        assert_eq!(cfg.plant_noise().seed, 42);
        assert!(!cfg.plant_noise().is_noiseless());
        let quiet = RunConfig::default();
        assert!(quiet.plant_noise().is_noiseless());
    }

    #[test]
    fn baseline_model_overrides() {
        let mut cfg = RunConfig::default();
        cfg.baseline.radius_front = Some(0.4);
        assert_eq!(cfg.baseline_wheel_model(1).radius, 0.4);
        assert_eq!(cfg.baseline_wheel_model(2).radius, cfg.vehicle.wheel_radius_rear);
        assert_eq!(cfg.nominal_wheel_model(0).radius, cfg.vehicle.wheel_radius_front);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }
}
