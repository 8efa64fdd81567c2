//! Braking scenarios: initial condition, slip reference profile and the
//! perturbations that separate the physical vehicle from its twin.

use crate::compensator::DEACTIVATION_SPEED;
use crate::error::{invalid, Result};
use crate::vehicle::{apply_mass_config, default_extra_masses, ConcentratedMass, VehicleParams};

/// 196 km/h.
pub const DEFAULT_INITIAL_SPEED: f64 = 196.0 / 3.6;

#[derive(Clone, Debug, PartialEq)]
pub enum ReferenceProfile {
    Constant(f64),
    /// Step changes at the given times after activation: `(time, value)`,
    /// sorted by time; the first entry should start at 0.
    Piecewise(Vec<(f64, f64)>),
    /// Square wave `base ± amplitude` with the given period, starting on the
    /// high half-cycle.
    Pulse { base: f64, amplitude: f64, period: f64 },
}

impl ReferenceProfile {
    /// Reference value `elapsed` seconds after activation.
    pub fn value(&self, elapsed: f64) -> f64 {
        match self {
            Self::Constant(v) => *v,
            Self::Piecewise(points) => {
                let mut v = points.first().map(|p| p.1).unwrap_or(0.0);
                for &(t, val) in points {
                    if elapsed + 1e-12 >= t {
                        v = val;
                    } else {
                        break;
                    }
                }
                v
            }
            Self::Pulse { base, amplitude, period } => {
                let phase = (elapsed.max(0.0) / period).fract();
                if phase < 0.5 {
                    base + amplitude
                } else {
                    base - amplitude
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |v: f64| {
            if v > 0.0 && v <= 0.3 {
                Ok(())
            } else {
                Err(invalid("reference", format!("value {v} outside (0, 0.3]")))
            }
        };
        match self {
            Self::Constant(v) => check(*v),
            Self::Piecewise(points) => {
                if points.is_empty() {
                    return Err(invalid("reference.points", "empty"));
                }
                for w in points.windows(2) {
                    if w[1].0 <= w[0].0 {
                        return Err(invalid("reference.points", "times must increase"));
                    }
                }
                points.iter().try_for_each(|p| check(p.1))
            }
            Self::Pulse { base, amplitude, period } => {
                if !(*period > 0.0) {
                    return Err(invalid("reference.period", "must be positive"));
                }
                check(base + amplitude)?;
                check(base - amplitude)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub initial_speed: f64,
    pub brake_trigger_time: f64,
    pub duration_cap: f64,
    pub seed: u64,
    pub reference: ReferenceProfile,
    /// Measurement noise on the plant sensors.
    pub noise: bool,
    /// Extra point masses carried by the plant only.
    pub plant_masses: Vec<ConcentratedMass>,
    pub peak_friction_scale: f64,
    pub shape_factor_scale: f64,
    /// Mass added to (negative: removed from) the twin only, kg.
    pub twin_mass_offset: f64,
    /// Pedal request after the trigger.
    pub driver_brake: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "nominal".into(),
            initial_speed: DEFAULT_INITIAL_SPEED,
            brake_trigger_time: 1.0,
            duration_cap: 12.0,
            seed: 1,
            reference: ReferenceProfile::Constant(0.10),
            noise: false,
            plant_masses: Vec::new(),
            peak_friction_scale: 1.0,
            shape_factor_scale: 1.0,
            twin_mass_offset: 0.0,
            driver_brake: 1.0,
        }
    }
}

/// Names accepted by [`Scenario::preset`].
pub const PRESETS: [&str; 6] = ["nominal", "noisy", "masses", "noisy+masses", "friction", "training"];

impl Scenario {
    pub fn preset(name: &str) -> Option<Self> {
        let base = Self::default();
        let s = match name {
            "nominal" => base,
            "noisy" => Self {
                name: name.into(),
                noise: true,
                ..base
            },
            "masses" => Self {
                name: name.into(),
                plant_masses: default_extra_masses(),
                ..base
            },
            "noisy+masses" => Self {
                name: name.into(),
                noise: true,
                plant_masses: default_extra_masses(),
                ..base
            },
            "friction" => Self {
                name: name.into(),
                noise: true,
                plant_masses: default_extra_masses(),
                peak_friction_scale: 0.8,
                shape_factor_scale: 1.2,
                ..base
            },
            "training" => Self::training(),
            _ => return None,
        };
        Some(s)
    }

    /// Coast-down followed by full braking with a pulse wave on the slip
    /// reference.
    pub fn training() -> Self {
        Self {
            name: "training".into(),
            brake_trigger_time: 1.5,
            reference: ReferenceProfile::Pulse {
                base: 0.08,
                amplitude: 0.02,
                period: 0.4,
            },
            ..Self::default()
        }
    }

    /// Same plant and seed with the training reference profile.
    pub fn as_training(&self) -> Self {
        let t = Self::training();
        Self {
            name: format!("{}-training", self.name),
            brake_trigger_time: t.brake_trigger_time,
            reference: t.reference,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_speed > DEACTIVATION_SPEED) {
            return Err(invalid("scenario.initial_speed", "must exceed the deactivation speed"));
        }
        if !(self.brake_trigger_time >= 0.0 && self.duration_cap > self.brake_trigger_time) {
            return Err(invalid("scenario.duration_cap", "must exceed the brake trigger time"));
        }
        if !(self.peak_friction_scale > 0.0 && self.shape_factor_scale > 0.0) {
            return Err(invalid("plant.friction", "scalings must be positive"));
        }
        if !(0.0..=1.0).contains(&self.driver_brake) {
            return Err(invalid("scenario.driver_brake", "must lie in [0, 1]"));
        }
        self.reference.validate()
    }

    /// Physical vehicle: nominal parameters plus masses and tire scalings.
    pub fn plant_params(&self, nominal: &VehicleParams) -> Result<VehicleParams> {
        let mut p = apply_mass_config(nominal, &self.plant_masses)?;
        p.tire.peak_friction_scale *= self.peak_friction_scale;
        p.tire.shape_factor_scale *= self.shape_factor_scale;
        p.validate()?;
        Ok(p)
    }

    pub fn twin_params(&self, nominal: &VehicleParams) -> Result<VehicleParams> {
        let mut p = nominal.clone();
        p.total_mass += self.twin_mass_offset;
        p.validate()?;
        Ok(p)
    }
}
