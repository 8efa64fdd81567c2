//! Frozen-coefficient slip model cascaded with the brake actuator, its exact
//! zero-order-hold discretization and the velocity-form augmentation.

use nalgebra::{DMatrix, DVector, SMatrix};

use crate::error::{Error, Result};

/// Number of physical states: slip, actuator torque, actuator torque rate.
pub const PLANT_STATES: usize = 3;
/// Augmented states: the three increments plus the tracking error.
pub const AUGMENTED_STATES: usize = PLANT_STATES + 1;

/// Wheel and actuator constants the predictor is built from. For the twin
/// these are the nominal values; the baseline tuner perturbs radius and
/// inertia.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WheelModel {
    pub radius: f64,
    pub inertia: f64,
    pub natural_frequency: f64,
    pub damping: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlipPredictionModel {
    pub wheel_radius: f64,
    pub wheel_inertia: f64,
    pub frozen_speed: f64,
    pub frozen_accel: f64,
    pub natural_frequency: f64,
    pub damping: f64,
    pub sample_time: f64,
    pub horizon_steps: usize,
}

/// Continuous model `x' = A x + B u + w` with `x = [slip, torque, torque rate]`
/// and `u` the commanded brake torque magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousModel {
    pub a: SMatrix<f64, 3, 3>,
    pub b: SMatrix<f64, 3, 1>,
    pub w: SMatrix<f64, 3, 1>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteModel {
    pub a: SMatrix<f64, 3, 3>,
    pub b: SMatrix<f64, 3, 1>,
    pub w: SMatrix<f64, 3, 1>,
}

/// Linear augmented model `z+ = A z + B du + E dr` whose last state is the
/// tracking error. `E` is zero except for `-1` on the error row.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedModel {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl AugmentedModel {
    pub fn states(&self) -> usize {
        self.b.len()
    }

    /// Index of the tracking-error state.
    pub fn error_index(&self) -> usize {
        self.states() - 1
    }
}

/// Freezes speed and acceleration at their current values. Fails below
/// `min_speed`, where the slip model is singular.
pub fn linearize_slip_model(
    speed: f64,
    accel: f64,
    wheel: &WheelModel,
    sample_time: f64,
    horizon_steps: usize,
    min_speed: f64,
) -> Result<SlipPredictionModel> {
    if !(speed.is_finite() && accel.is_finite()) {
        return Err(Error::ModelInvalid { speed, min: min_speed });
    }
    if speed <= min_speed {
        return Err(Error::ModelInvalid { speed, min: min_speed });
    }
    Ok(SlipPredictionModel {
        wheel_radius: wheel.radius,
        wheel_inertia: wheel.inertia,
        frozen_speed: speed,
        frozen_accel: accel,
        natural_frequency: wheel.natural_frequency,
        damping: wheel.damping,
        sample_time,
        horizon_steps,
    })
}

impl SlipPredictionModel {
    /// Gain from signed wheel torque to slip rate, `-R / (J v)`. Brake torque
    /// magnitude enters with the opposite sign.
    pub fn input_gain(&self) -> f64 {
        -self.wheel_radius / (self.wheel_inertia * self.frozen_speed)
    }

    /// Slip-state pole `-a / v`.
    pub fn slip_pole(&self) -> f64 {
        -self.frozen_accel / self.frozen_speed
    }

    pub fn continuous(&self) -> ContinuousModel {
        let wn = self.natural_frequency;
        let zeta = self.damping;
        let p = self.slip_pole();
        let g = -self.input_gain();
        let a = SMatrix::<f64, 3, 3>::new(
            p, g, 0.0, //
            0.0, 0.0, 1.0, //
            0.0, -wn * wn, -2.0 * zeta * wn,
        );
        let b = SMatrix::<f64, 3, 1>::new(0.0, 0.0, wn * wn);
        let w = SMatrix::<f64, 3, 1>::new(self.frozen_accel / self.frozen_speed, 0.0, 0.0);
        ContinuousModel { a, b, w }
    }

    /// Exact zero-order-hold discretization of the input and the affine term.
    pub fn discretize(&self) -> DiscreteModel {
        let c = self.continuous();
        let mut m = SMatrix::<f64, 5, 5>::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&c.a);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&c.b);
        m.fixed_view_mut::<3, 1>(0, 4).copy_from(&c.w);
        let e = (m * self.sample_time).exp();
        DiscreteModel {
            a: e.fixed_view::<3, 3>(0, 0).into_owned(),
            b: e.fixed_view::<3, 1>(0, 3).into_owned(),
            w: e.fixed_view::<3, 1>(0, 4).into_owned(),
        }
    }
}

/// Velocity form with the slip tracking error appended as a state:
/// `dx+ = Ad dx + Bd du`, `e+ = e + C dx+ - dr`.
pub fn to_velocity_form(model: &SlipPredictionModel) -> AugmentedModel {
    augment(&model.discretize())
}

pub fn augment(d: &DiscreteModel) -> AugmentedModel {
    let n = PLANT_STATES;
    let mut a = DMatrix::zeros(n + 1, n + 1);
    let mut b = DVector::zeros(n + 1);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = d.a[(i, j)];
        }
        b[i] = d.b[i];
    }
    // output is the slip state
    for j in 0..n {
        a[(n, j)] = d.a[(0, j)];
    }
    a[(n, n)] = 1.0;
    b[n] = d.b[0];
    AugmentedModel { a, b }
}
