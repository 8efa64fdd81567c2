//! Gaussian-process Bayesian optimization and the two calibration drivers:
//! compensator gains for TiL and predictor parameters for the stand-alone
//! MPC (end-of-line baseline).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::config::RunConfig;
use crate::error::{invalid, Error, Result};
use crate::indices::{cost_mpc_prediction, cost_slip_twin};
use crate::sim::{run_experiment, Controller, RunLog};

/// Box of admissible parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterBox {
    pub names: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ParameterBox {
    pub fn new(names: &[&str], lower: &[f64], upper: &[f64]) -> Result<Self> {
        if names.len() != lower.len() || names.len() != upper.len() || names.is_empty() {
            return Err(invalid("box", "names and bounds must have the same nonzero length"));
        }
        for (i, (l, u)) in lower.iter().zip(upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(invalid("box", format!("{}: need lower < upper", names[i])));
            }
        }
        Ok(Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            lower: lower.to_vec(),
            upper: upper.to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn to_unit(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .enumerate()
            .map(|(i, t)| (t - self.lower[i]) / (self.upper[i] - self.lower[i]))
            .collect()
    }

    pub fn from_unit(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .enumerate()
            .map(|(i, u)| self.lower[i] + u.clamp(0.0, 1.0) * (self.upper[i] - self.lower[i]))
            .collect()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .enumerate()
                .all(|(i, t)| *t >= self.lower[i] && *t <= self.upper[i])
    }
}

/// Posterior of a cost model at a point of the unit box.
pub trait Surrogate {
    /// Posterior mean and variance in cost units.
    fn predict(&self, unit: &[f64]) -> (f64, f64);
}

#[derive(Clone, Debug)]
pub struct GpSurrogate {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    /// In standardized cost units.
    pub noise_variance: f64,
    pub jitter: f64,
    log_likelihood: f64,
    inputs: Vec<Vec<f64>>,
    cost_mean: f64,
    cost_scale: f64,
    alpha: DVector<f64>,
    lower_factor: DMatrix<f64>,
}

fn se_kernel(a: &[f64], b: &[f64], lengthscales: &[f64], signal: f64) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(lengthscales)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum();
    signal * (-0.5 * r2).exp()
}

struct Fitted {
    alpha: DVector<f64>,
    factor: Cholesky<f64, Dyn>,
    jitter: f64,
    log_likelihood: f64,
}

fn fit_fixed(inputs: &[Vec<f64>], y: &DVector<f64>, lengthscales: &[f64], signal: f64, noise: f64) -> Option<Fitted> {
    let n = inputs.len();
    let k = DMatrix::from_fn(n, n, |i, j| se_kernel(&inputs[i], &inputs[j], lengthscales, signal));
    let mut jitter = 0.0;
    loop {
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += noise + jitter;
        }
        if let Some(factor) = Cholesky::new(m) {
            let alpha = factor.solve(y);
            let log_det: f64 = factor.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
            let log_likelihood =
                -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            return Some(Fitted {
                alpha,
                factor,
                jitter,
                log_likelihood,
            });
        }
        jitter = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 };
        if jitter > 1e-6 {
            return None;
        }
    }
}

/// Fit a GP with squared-exponential ARD kernel to costs observed at points
/// of the unit box. Hyperparameters maximize the marginal likelihood over a
/// grid followed by coordinate refinement of each lengthscale.
pub fn gp_fit(inputs: &[Vec<f64>], costs: &[f64], noise_variance: f64) -> Result<GpSurrogate> {
    let n = inputs.len();
    if n < 2 || costs.len() != n {
        return Err(Error::GpFit(format!("need at least 2 matching points, got {n}")));
    }
    let dim = inputs[0].len();
    if inputs.iter().any(|x| x.len() != dim) || dim == 0 {
        return Err(Error::GpFit("inconsistent input dimension".into()));
    }
    if inputs.iter().all(|x| x == &inputs[0]) {
        return Err(Error::GpFit("all inputs identical".into()));
    }
    if costs.iter().any(|c| !c.is_finite()) || !(noise_variance >= 0.0) {
        return Err(Error::GpFit("non-finite cost or negative noise".into()));
    }
    let mean = costs.iter().sum::<f64>() / n as f64;
    let var = costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n as f64;
    let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
    let y = DVector::from_iterator(n, costs.iter().map(|c| (c - mean) / scale));

    let mut best: Option<(Vec<f64>, f64, Fitted)> = None;
    let consider = |ls: Vec<f64>, sf: f64, best: &mut Option<(Vec<f64>, f64, Fitted)>| {
        if let Some(f) = fit_fixed(inputs, &y, &ls, sf, noise_variance) {
            if best.as_ref().is_none_or(|b| f.log_likelihood > b.2.log_likelihood) {
                *best = Some((ls, sf, f));
            }
        }
    };
    for &l in &[0.05, 0.1, 0.2, 0.35, 0.6, 1.0, 2.0, 4.0] {
        for &sf in &[0.25, 1.0, 4.0] {
            consider(vec![l; dim], sf, &mut best);
        }
    }
    for _ in 0..3 {
        for d in 0..dim {
            for &factor in &[0.5, 0.7, 1.4, 2.0] {
                let Some((ls, sf, _)) = best.as_ref() else { break };
                let mut trial = ls.clone();
                trial[d] = (trial[d] * factor).clamp(0.01, 10.0);
                let sf = *sf;
                consider(trial, sf, &mut best);
            }
        }
    }
    let (lengthscales, signal_variance, fitted) =
        best.ok_or_else(|| Error::GpFit("kernel matrix not positive definite with jitter 1e-6".into()))?;
    Ok(GpSurrogate {
        lengthscales,
        signal_variance,
        noise_variance,
        jitter: fitted.jitter,
        log_likelihood: fitted.log_likelihood,
        inputs: inputs.to_vec(),
        cost_mean: mean,
        cost_scale: scale,
        alpha: fitted.alpha,
        lower_factor: fitted.factor.l(),
    })
}

impl GpSurrogate {
    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_likelihood
    }
}

impl Surrogate for GpSurrogate {
    fn predict(&self, unit: &[f64]) -> (f64, f64) {
        let n = self.inputs.len();
        let ks = DVector::from_iterator(
            n,
            self.inputs
                .iter()
                .map(|x| se_kernel(x, unit, &self.lengthscales, self.signal_variance)),
        );
        let mean = ks.dot(&self.alpha);
        let v = self
            .lower_factor
            .solve_lower_triangular(&ks)
            .unwrap_or_else(|| DVector::zeros(n));
        let var = (self.signal_variance - v.dot(&v)).max(0.0);
        (
            self.cost_mean + self.cost_scale * mean,
            self.cost_scale * self.cost_scale * var,
        )
    }
}

/// Expected improvement below `best` of a Gaussian with the given mean and
/// variance.
pub fn expected_improvement(mean: f64, variance: f64, best: f64) -> f64 {
    let gain = best - mean;
    if !(variance > 0.0) {
        return gain.max(0.0);
    }
    let sd = variance.sqrt();
    let z = gain / sd;
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    (gain * n.cdf(z) + sd * n.pdf(z)).max(0.0)
}

const PRIMES: [u32; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Randomly shifted Halton points in the unit box.
pub fn halton_points(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    assert!(dim <= PRIMES.len(), "dimension above {}", PRIMES.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
    (1..=count as u64)
        .map(|i| {
            (0..dim)
                .map(|d| (radical_inverse(i, PRIMES[d] as u64) + shift[d]).fract())
                .collect()
        })
        .collect()
}

/// `count` points of a Latin hypercube design in the unit box.
pub fn latin_hypercube(count: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; dim]; count];
    for d in 0..dim {
        let mut strata: Vec<usize> = (0..count).collect();
        strata.shuffle(rng);
        for (i, s) in strata.into_iter().enumerate() {
            points[i][d] = (s as f64 + rng.random::<f64>()) / count as f64;
        }
    }
    points
}

/// Pattern search for a maximum of `f` inside the unit box.
fn polish<F: Fn(&[f64]) -> f64>(start: &[f64], f: &F) -> (Vec<f64>, f64) {
    let mut x = start.to_vec();
    let mut fx = f(&x);
    let mut step = 0.05;
    while step > 1e-4 {
        let mut improved = false;
        for d in 0..x.len() {
            for dir in [-1.0, 1.0] {
                let mut trial = x.clone();
                trial[d] = (trial[d] + dir * step).clamp(0.0, 1.0);
                let ft = f(&trial);
                if ft > fx {
                    x = trial;
                    fx = ft;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (x, fx)
}

pub const SCATTER_POINTS: usize = 2048;

fn scatter_argmax<F: Fn(&[f64]) -> f64>(points: &[Vec<f64>], f: &F) -> (Vec<f64>, f64) {
    let mut scored: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (f(p), i)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut best = (points[scored[0].1].clone(), scored[0].0);
    for &(_, i) in scored.iter().take(4) {
        let (x, fx) = polish(&points[i], f);
        if fx > best.1 {
            best = (x, fx);
        }
    }
    best
}

/// Maximizer of expected improvement over `best` in the unit box. When EI
/// vanishes everywhere the posterior-mean minimizer is returned instead.
pub fn acquisition_argmax(surrogate: &dyn Surrogate, dim: usize, best: f64, seed: u64) -> Vec<f64> {
    let points = halton_points(SCATTER_POINTS, dim, seed);
    let ei = |x: &[f64]| {
        let (m, v) = surrogate.predict(x);
        expected_improvement(m, v, best)
    };
    let (x, value) = scatter_argmax(&points, &ei);
    if value > 0.0 {
        return x;
    }
    let neg_mean = |x: &[f64]| -surrogate.predict(x).0;
    scatter_argmax(&points, &neg_mean).0
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoOptions {
    pub budget: usize,
    pub initial_design: usize,
    pub seed: u64,
    /// Observation noise variance in standardized cost units.
    pub noise_variance: f64,
}

impl Default for BoOptions {
    fn default() -> Self {
        Self {
            budget: 40,
            initial_design: 8,
            seed: 7,
            noise_variance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub iteration: usize,
    pub theta: Vec<f64>,
    /// Observed cost, or the penalty for a failed evaluation.
    pub cost: f64,
    pub failed: bool,
    /// Best successful cost so far; infinite until the first success.
    pub incumbent: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoResult {
    pub best_theta: Vec<f64>,
    pub best_cost: f64,
    pub history: Vec<Evaluation>,
}

/// Recorded cost of a failed evaluation.
pub fn failure_penalty(worst: f64) -> f64 {
    if worst > 0.0 {
        10.0 * worst
    } else {
        worst + 10.0 * worst.abs() + 1.0
    }
}

/// Minimize `objective` over `bbox`. The initial Latin hypercube design is
/// evaluated in parallel; afterwards one candidate per iteration.
pub fn bo_optimize<F>(objective: F, bbox: &ParameterBox, options: &BoOptions) -> Result<BoResult>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let dim = bbox.dim();
    if options.initial_design < 2 {
        return Err(invalid("initial_design", "need at least 2 points"));
    }
    if options.budget < options.initial_design {
        return Err(invalid(
            "budget",
            format!("{} is below the initial design size {}", options.budget, options.initial_design),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let design = latin_hypercube(options.initial_design, dim, &mut rng);
    let outcomes: Vec<Option<f64>> = design
        .par_iter()
        .map(|u| match objective(&bbox.from_unit(u)) {
            Ok(c) if c.is_finite() => Some(c),
            _ => None,
        })
        .collect();

    let mut units: Vec<Vec<f64>> = Vec::new();
    let mut raw: Vec<Option<f64>> = Vec::new();
    let mut history = Vec::new();
    let mut incumbent = f64::INFINITY;
    let mut best_theta = Vec::new();
    let mut record = |u: Vec<f64>, outcome: Option<f64>, units: &mut Vec<Vec<f64>>, raw: &mut Vec<Option<f64>>| {
        let theta = bbox.from_unit(&u);
        let worst = raw.iter().chain(std::iter::once(&outcome)).flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let (cost, failed) = match outcome {
            Some(c) => (c, false),
            None => (if worst.is_finite() { failure_penalty(worst) } else { f64::NAN }, true),
        };
        if let Some(c) = outcome {
            if c < incumbent {
                incumbent = c;
                best_theta = theta.clone();
            }
        }
        history.push(Evaluation {
            iteration: history.len(),
            theta,
            cost,
            failed,
            incumbent,
        });
        units.push(u);
        raw.push(outcome);
    };
    for (u, o) in design.into_iter().zip(outcomes) {
        record(u, o, &mut units, &mut raw);
    }
    if raw.iter().all(|o| o.is_none()) {
        return Err(Error::Infeasible("every initial design point failed".into()));
    }

    for it in options.initial_design..options.budget {
        let worst = raw.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let costs: Vec<f64> = raw.iter().map(|o| o.unwrap_or_else(|| failure_penalty(worst))).collect();
        let gp = gp_fit(&units, &costs, options.noise_variance)?;
        let best_fit = costs.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut u = acquisition_argmax(&gp, dim, best_fit, options.seed.wrapping_add(it as u64));
        let duplicate = units
            .iter()
            .any(|p| p.iter().zip(&u).map(|(a, b)| (a - b).powi(2)).sum::<f64>() < 1e-12);
        if duplicate {
            // fall back to the most uncertain scatter point
            let points = halton_points(SCATTER_POINTS, dim, options.seed.wrapping_add(1000 + it as u64));
            u = points
                .into_iter()
                .max_by(|a, b| gp.predict(a).1.total_cmp(&gp.predict(b).1))
                .expect("non-empty scatter");
        }
        let outcome = match objective(&bbox.from_unit(&u)) {
            Ok(c) if c.is_finite() => Some(c),
            _ => None,
        };
        record(u, outcome, &mut units, &mut raw);
    }
    // penalties recorded before the first success
    let worst = raw.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    for e in history.iter_mut().filter(|e| e.cost.is_nan()) {
        e.cost = failure_penalty(worst);
    }
    Ok(BoResult {
        best_theta,
        best_cost: incumbent,
        history,
    })
}

/// Tuning target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TuneTarget {
    Til,
    MpcEol,
}

impl TuneTarget {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "til" => Some(Self::Til),
            "mpc-eol" => Some(Self::MpcEol),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Til => "til",
            Self::MpcEol => "mpc-eol",
        }
    }

    /// Config keys written to the overlay, in box order.
    pub fn keys(self) -> [&'static str; 4] {
        match self {
            Self::Til => [
                "compensator.kp_front",
                "compensator.ti_front",
                "compensator.kp_rear",
                "compensator.ti_rear",
            ],
            Self::MpcEol => [
                "baseline.radius_front",
                "baseline.inertia_front",
                "baseline.radius_rear",
                "baseline.inertia_rear",
            ],
        }
    }

    pub fn parameter_box(self, cfg: &RunConfig) -> Result<ParameterBox> {
        let keys = self.keys();
        match self {
            Self::Til => ParameterBox::new(&keys, &[10.0, 0.01, 10.0, 0.01], &[5000.0, 1.0, 5000.0, 1.0]),
            Self::MpcEol => {
                let v = &cfg.vehicle;
                let nominal = [
                    v.wheel_radius_front,
                    v.wheel_inertia_front,
                    v.wheel_radius_rear,
                    v.wheel_inertia_rear,
                ];
                let lower: Vec<f64> = nominal.iter().map(|x| 0.5 * x).collect();
                let upper: Vec<f64> = nominal.iter().map(|x| 1.5 * x).collect();
                ParameterBox::new(&keys, &lower, &upper)
            }
        }
    }

    /// Training-maneuver configuration with `theta` applied.
    pub fn candidate(self, cfg: &RunConfig, theta: &[f64]) -> Result<RunConfig> {
        let mut c = cfg.clone();
        for (k, v) in self.keys().iter().zip(theta) {
            c.apply(k, &v.to_string())?;
        }
        c.validate()?;
        Ok(c)
    }

    fn controller(self) -> Controller {
        match self {
            Self::Til => Controller::Til,
            Self::MpcEol => Controller::Mpc,
        }
    }

    /// Cost of a finished training run.
    pub fn cost(self, log: &RunLog) -> Result<f64> {
        if let Some(f) = &log.failure {
            return Err(Error::Infeasible(format!("run failed: {f}")));
        }
        if !log.completed {
            return Err(Error::Infeasible("run hit the duration cap".into()));
        }
        match self {
            Self::Til => cost_slip_twin(log),
            Self::MpcEol => cost_mpc_prediction(log, log.horizon_steps),
        }
    }

    pub fn evaluate(self, training: &RunConfig, theta: &[f64]) -> Result<f64> {
        let c = self.candidate(training, theta)?;
        let log = run_experiment(&c, self.controller())?;
        self.cost(&log)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneResult {
    pub target: TuneTarget,
    pub parameter_box: ParameterBox,
    pub result: BoResult,
}

impl TuneResult {
    /// Config overlay with the best parameters, one `key = value` per line.
    pub fn overlay(&self) -> String {
        let mut s = format!(
            "# {} tuning, best cost {}\n",
            self.target.name(),
            self.result.best_cost
        );
        for (k, v) in self.target.keys().iter().zip(&self.result.best_theta) {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn write_history<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["iteration".to_string()];
        header.extend(self.parameter_box.names.iter().cloned());
        header.extend(["cost".into(), "failed".into(), "incumbent".into()]);
        w.write_record(&header)?;
        for e in &self.result.history {
            let mut row = vec![e.iteration.to_string()];
            row.extend(e.theta.iter().map(|t| t.to_string()));
            row.push(e.cost.to_string());
            row.push(u8::from(e.failed).to_string());
            row.push(e.incumbent.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Tune `target` on the training maneuver built from `cfg`'s plant.
pub fn tune(cfg: &RunConfig, target: TuneTarget, options: &BoOptions) -> Result<TuneResult> {
    let mut training = cfg.clone();
    training.scenario = cfg.scenario.as_training();
    training.validate()?;
    let bbox = target.parameter_box(&training)?;
    let result = bo_optimize(|theta| target.evaluate(&training, theta), &bbox, options)?;
    Ok(TuneResult {
        target,
        parameter_box: bbox,
        result,
    })
}
