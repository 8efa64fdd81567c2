//! Sensor models for the physical vehicle.
//!
//! Acceleration carries white Gaussian noise, the chassis speed carries
//! low-pass filtered white noise (standing in for an observer), and encoder
//! wheel rates carry a speed-scheduled sinusoidal error. Slip is recomputed
//! from the noisy speed and wheel rates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::vehicle::{wheel_slip, VehicleParams, VehicleState, SLIP_FREEZE_SPEED, WHEELS};

/// Lower clamp applied to measured slip so noise-induced sign flips stay
/// bounded.
pub const MEASURED_SLIP_MIN: f64 = -0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseConfig {
    pub accel_noise_std: f64,
    pub speed_noise_std: f64,
    /// First-order low-pass cutoff, Hz.
    pub speed_lowpass_cutoff: f64,
    pub wheel_noise_offset: f64,
    pub wheel_noise_speed_gain: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    /// Calibrated for a slip SNR of about 4 on the training maneuver
    /// (see `til calibrate`).
    fn default() -> Self {
        Self {
            accel_noise_std: 0.3,
            speed_noise_std: 2.97,
            speed_lowpass_cutoff: 5.0,
            wheel_noise_offset: 0.372,
            wheel_noise_speed_gain: 0.0446,
            seed: 1,
        }
    }
}

impl NoiseConfig {
    /// All noise terms zero: every measurement is the identity.
    pub fn noiseless() -> Self {
        Self {
            accel_noise_std: 0.0,
            speed_noise_std: 0.0,
            wheel_noise_offset: 0.0,
            wheel_noise_speed_gain: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sensors.accel_noise_std", self.accel_noise_std),
            ("sensors.speed_noise_std", self.speed_noise_std),
            ("sensors.wheel_noise_offset", self.wheel_noise_offset),
            ("sensors.wheel_noise_speed_gain", self.wheel_noise_speed_gain),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(name, "must be finite and >= 0"));
            }
        }
        if !(self.speed_lowpass_cutoff > 0.0) {
            return Err(invalid("sensors.speed_lowpass_cutoff", "must be > 0"));
        }
        Ok(())
    }

    /// Scale the speed and wheel-encoder noise terms together.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            speed_noise_std: self.speed_noise_std * factor,
            wheel_noise_offset: self.wheel_noise_offset * factor,
            wheel_noise_speed_gain: self.wheel_noise_speed_gain * factor,
            ..self.clone()
        }
    }

    pub fn is_noiseless(&self) -> bool {
        self.accel_noise_std == 0.0
            && self.speed_noise_std == 0.0
            && self.wheel_noise_offset == 0.0
            && self.wheel_noise_speed_gain == 0.0
    }
}

/// First-order low-pass `y' = 2 pi fc (u - y)`, discretized exactly for a
/// piecewise-constant input.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LowPass {
    pub state: f64,
}

impl LowPass {
    pub fn step(&mut self, input: f64, cutoff_hz: f64, dt: f64) -> f64 {
        let alpha = 1.0 - (-2.0 * std::f64::consts::PI * cutoff_hz * dt).exp();
        self.state += alpha * (input - self.state);
        self.state
    }
}

/// One synchronized set of measurements of a vehicle.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurements {
    pub accel: f64,
    pub speed: f64,
    pub wheel_rates: [f64; WHEELS],
    pub slips: [f64; WHEELS],
}

/// Seeded noise generator with filter memory. Identical seed and input
/// sequence give identical outputs.
#[derive(Clone, Debug)]
pub struct SensorRig {
    config: NoiseConfig,
    lowpass: LowPass,
    rng: ChaCha8Rng,
    time: f64,
    last_slips: [f64; WHEELS],
}

impl SensorRig {
    pub fn new(config: NoiseConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            lowpass: LowPass::default(),
            rng,
            time: 0.0,
            last_slips: [0.0; WHEELS],
        })
    }

    pub fn config(&self) -> &NoiseConfig {
        &self.config
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn measure_acceleration(&mut self, true_accel: f64) -> f64 {
        let n = self.config.accel_noise_std * self.gaussian();
        true_accel + n
    }

    pub fn measure_chassis_speed(&mut self, true_speed: f64, dt: f64) -> f64 {
        let white = self.config.speed_noise_std * self.gaussian();
        let colored = self
            .lowpass
            .step(white, self.config.speed_lowpass_cutoff, dt);
        true_speed + colored
    }

    /// Encoder error `(w0 + k w) sin(w t)` with `t` the absolute time.
    pub fn measure_wheel_rate(&self, true_rate: f64, time: f64) -> f64 {
        let amplitude =
            self.config.wheel_noise_offset + self.config.wheel_noise_speed_gain * true_rate;
        true_rate + amplitude * (true_rate * time).sin()
    }

    /// Slip from noisy signals, clamped to `[-0.2, 1]`.
    pub fn measured_slip(&self, measured_speed: f64, measured_rate: f64, radius: f64) -> Result<f64> {
        let s = wheel_slip(measured_speed, measured_rate.max(0.0), radius)?;
        Ok(s.clamp(MEASURED_SLIP_MIN, 1.0))
    }

    /// Measure everything for one step of `dt` ending at the state's time.
    /// Random draws happen in a fixed order (acceleration, then speed).
    pub fn measure(&mut self, state: &VehicleState, params: &VehicleParams, dt: f64) -> Measurements {
        let accel = self.measure_acceleration(state.longitudinal_accel);
        let speed = self.measure_chassis_speed(state.chassis_speed, dt);
        self.time = state.time;
        let wheel_rates: [f64; WHEELS] =
            std::array::from_fn(|i| self.measure_wheel_rate(state.wheel_rates[i], state.time));
        let mut slips = self.last_slips;
        if state.chassis_speed >= SLIP_FREEZE_SPEED {
            for i in 0..WHEELS {
                if let Ok(s) = self.measured_slip(speed, wheel_rates[i], params.radius(i)) {
                    slips[i] = s;
                }
            }
        }
        self.last_slips = slips;
        Measurements {
            accel,
            speed,
            wheel_rates,
            slips,
        }
    }
}

/// Power ratio of the true slip to the slip measurement error. Returns
/// `f64::INFINITY` when the error is identically zero.
pub fn calibrate_snr(true_slip: &[f64], measured_slip: &[f64]) -> Result<f64> {
    if true_slip.len() != measured_slip.len() {
        return Err(Error::Config("slip logs differ in length".into()));
    }
    if true_slip.len() < 1000 {
        return Err(Error::Config(format!(
            "SNR needs at least 1000 samples, got {}",
            true_slip.len()
        )));
    }
    let signal: f64 = true_slip.iter().map(|s| s * s).sum();
    if signal == 0.0 {
        return Err(Error::UndefinedSnr);
    }
    let noise: f64 = true_slip
        .iter()
        .zip(measured_slip)
        .map(|(t, m)| (m - t) * (m - t))
        .sum();
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(signal / noise)
}

/// Scale the speed/encoder noise of `base` until `evaluate` reports an SNR
/// within `tolerance` of `target`. `evaluate` runs the reference maneuver
/// with the candidate configuration. Bisection on the log of the scale.
pub fn calibrate_noise<F>(base: &NoiseConfig, target: f64, tolerance: f64, mut evaluate: F) -> Result<(NoiseConfig, f64)>
where
    F: FnMut(&NoiseConfig) -> Result<f64>,
{
    if !(target > 0.0) {
        return Err(invalid("target", "SNR target must be > 0"));
    }
    let (mut lo, mut hi) = ((0.05f64).ln(), (20.0f64).ln());
    let mut best = (base.clone(), evaluate(base)?);
    if (best.1 - target).abs() <= tolerance {
        return Ok(best);
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let candidate = base.scaled(mid.exp());
        let snr = evaluate(&candidate)?;
        if (snr - target).abs() < (best.1 - target).abs() {
            best = (candidate, snr);
        }
        if (snr - target).abs() <= tolerance {
            break;
        }
        // more noise, lower SNR
        if snr > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_is_identity() {
        let mut rig = SensorRig::new(NoiseConfig::noiseless()).unwrap();
        assert_eq!(rig.measure_acceleration(-7.3), -7.3);
        assert_eq!(rig.measure_chassis_speed(41.0, 1e-3), 41.0);
        assert_eq!(rig.measure_wheel_rate(120.0, 0.37), 120.0);
        let s = rig.measured_slip(30.0, 80.0, 0.33).unwrap();
        assert_eq!(s, wheel_slip(30.0, 80.0, 0.33).unwrap());
    }

    #[test]
    fn acceleration_variance() {
        let cfg = NoiseConfig {
            accel_noise_std: 0.3,
            ..NoiseConfig::noiseless()
        };
        let mut rig = SensorRig::new(cfg).unwrap();
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| rig.measure_acceleration(0.0)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!((var / 0.09 - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn acceleration_noise_is_independent_of_signal() {
        let cfg = NoiseConfig {
            accel_noise_std: 0.3,
            ..NoiseConfig::noiseless()
        };
        let mut rig = SensorRig::new(cfg).unwrap();
        let n = 100_000;
        let mut truth = Vec::with_capacity(n);
        let mut err = Vec::with_capacity(n);
        for k in 0..n {
            let a = -9.0 * (k as f64 * 1e-3).sin();
            truth.push(a);
            err.push(rig.measure_acceleration(a) - a);
        }
        let corr = correlation(&truth, &err);
        assert!(corr.abs() < 0.02, "correlation {corr}");
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn same_seed_same_stream() {
        let cfg = NoiseConfig::default();
        let mut a = SensorRig::new(cfg.clone()).unwrap();
        let mut b = SensorRig::new(cfg).unwrap();
        for k in 0..1000 {
            let v = 50.0 - k as f64 * 0.01;
            assert_eq!(a.measure_acceleration(-9.0), b.measure_acceleration(-9.0));
            assert_eq!(a.measure_chassis_speed(v, 1e-3), b.measure_chassis_speed(v, 1e-3));
        }
    }

    #[test]
    fn lowpass_unity_dc_gain() {
        let mut lp = LowPass::default();
        let mut y = 0.0;
        for _ in 0..5000 {
            y = lp.step(0.7, 5.0, 1e-3);
        }
        assert!((y - 0.7).abs() < 1e-9);
    }

    /// Averaged Hann-windowed DFT power at one bin.
    fn bin_power(xs: &[f64], seg: usize, freq_bin: usize) -> f64 {
        let mut acc = 0.0;
        let mut count = 0;
        for chunk in xs.chunks_exact(seg) {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, x) in chunk.iter().enumerate() {
                let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / seg as f64).cos();
                let ang = -2.0 * std::f64::consts::PI * (freq_bin * n) as f64 / seg as f64;
                re += w * x * ang.cos();
                im += w * x * ang.sin();
            }
            acc += re * re + im * im;
            count += 1;
        }
        acc / count as f64
    }

    #[test]
    fn speed_noise_rolls_off_above_cutoff() {
        let cfg = NoiseConfig {
            speed_noise_std: 1.0,
            ..NoiseConfig::noiseless()
        };
        let mut rig = SensorRig::new(cfg).unwrap();
        let xs: Vec<f64> = (0..1_000_000).map(|_| rig.measure_chassis_speed(0.0, 1e-3)).collect();
        // 1 Hz bins at fs = 1 kHz; one decade from 20 Hz to 200 Hz
        let low: f64 = (18..=22).map(|b| bin_power(&xs, 1000, b)).sum::<f64>() / 5.0;
        let high: f64 = (180..=220).step_by(10).map(|b| bin_power(&xs, 1000, b)).sum::<f64>() / 5.0;
        let drop_db = 10.0 * (low / high).log10();
        assert!(drop_db >= 15.0, "roll-off {drop_db} dB/decade");
    }

    #[test]
    fn wheel_error_examples() {
        let cfg = NoiseConfig {
            wheel_noise_offset: 0.4,
            wheel_noise_speed_gain: 0.03,
            ..NoiseConfig::noiseless()
        };
        let rig = SensorRig::new(cfg).unwrap();
        assert_eq!(rig.measure_wheel_rate(0.0, 1.234), 0.0);
        let w = 100.0;
        let period = 2.0 * std::f64::consts::PI / w;
        let peak = (0..100_000)
            .map(|k| (rig.measure_wheel_rate(w, k as f64 * period / 100_000.0) - w).abs())
            .fold(0.0, f64::max);
        assert!((peak - (0.4 + 100.0 * 0.03)).abs() < 1e-9);
    }

    #[test]
    fn measured_slip_clamps_only_on_negative_excursions() {
        let rig = SensorRig::new(NoiseConfig::noiseless()).unwrap();
        assert_eq!(rig.measured_slip(30.0, 30.0 / 0.33 * 1.5, 0.33).unwrap(), MEASURED_SLIP_MIN);
        let s = rig.measured_slip(30.0, 30.0 / 0.33 * 1.1, 0.33).unwrap();
        assert!(s < 0.0 && s > MEASURED_SLIP_MIN);
        assert!(rig.measured_slip(0.0, 0.0, 0.33).is_err());
    }

    #[test]
    fn snr_examples() {
        let truth: Vec<f64> = (0..2000).map(|k| 0.1 + 0.02 * (k as f64 * 0.01).sin()).collect();
        assert_eq!(calibrate_snr(&truth, &truth).unwrap(), f64::INFINITY);
        let noise: Vec<f64> = (0..2000).map(|k| 0.03 * ((k * 7919 % 1000) as f64 / 500.0 - 1.0)).collect();
        let m1: Vec<f64> = truth.iter().zip(&noise).map(|(t, n)| t + n).collect();
        let m2: Vec<f64> = truth.iter().zip(&noise).map(|(t, n)| t + 2.0 * n).collect();
        let s1 = calibrate_snr(&truth, &m1).unwrap();
        let s2 = calibrate_snr(&truth, &m2).unwrap();
        assert!(((s1 / s2) / 4.0 - 1.0).abs() < 0.1);
        let zeros = vec![0.0; 2000];
        assert!(matches!(calibrate_snr(&zeros, &m1), Err(Error::UndefinedSnr)));
        assert!(calibrate_snr(&truth[..10], &m1[..10]).is_err());
    }

    #[test]
    fn calibration_lands_on_target() {
        // synthetic evaluator: SNR inversely proportional to the squared scale
        let base = NoiseConfig::default();
        let eval = |c: &NoiseConfig| Ok(16.0 * (base.speed_noise_std / c.speed_noise_std).powi(2));
        let (cfg, snr) = calibrate_noise(&base, 4.0, 0.01, eval).unwrap();
        assert!((snr - 4.0).abs() <= 0.01);
        assert!((cfg.speed_noise_std / base.speed_noise_std - 2.0).abs() < 0.01);
    }
}
