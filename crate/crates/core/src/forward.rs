//! Drift-implicit Euler simulation of `dX = (AX + F(X)) dt + G (dW + gamma dt)`.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{norm, ModelSpec, StateVec};
use crate::rng::{self, Domain};

/// State-dependent drift shift `gamma: R^n -> R^m`, entering as `G gamma dt`.
pub type ShiftFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

pub const DEFAULT_BLOWUP_GUARD: f64 = 1e6;

/// One time step of the semi-implicit scheme with a precomputed `(I - hA)^{-1}`.
#[derive(Clone)]
pub struct Stepper<'a> {
    model: &'a ModelSpec,
    h: f64,
    sqrt_h: f64,
    inverse: Inverse,
    guard: f64,
}

#[derive(Clone)]
enum Inverse {
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

impl<'a> Stepper<'a> {
    pub fn new(model: &'a ModelSpec, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Config(format!("time step must be positive, got {h}")));
        }
        let n = model.dim;
        let inverse = if model.is_linear_diagonal() {
            let mut d = Vec::with_capacity(n);
            for i in 0..n {
                let denom = 1.0 - h * model.linear_drift[(i, i)];
                if denom.abs() < 1e-300 {
                    return Err(Error::Numerical(format!("I - hA is singular in mode {i}")));
                }
                d.push(1.0 / denom);
            }
            Inverse::Diagonal(d)
        } else {
            let m = DMatrix::identity(n, n) - &model.linear_drift * h;
            let inv = m
                .try_inverse()
                .ok_or_else(|| Error::Numerical("I - hA is singular".into()))?;
            Inverse::Dense(inv)
        };
        Ok(Self {
            model,
            h,
            sqrt_h: h.sqrt(),
            inverse,
            guard: DEFAULT_BLOWUP_GUARD,
        })
    }

    pub fn with_guard(mut self, guard: f64) -> Self {
        self.guard = guard;
        self
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn sqrt_h(&self) -> f64 {
        self.sqrt_h
    }

    /// `out = (I - hA)^{-1} (x + h F(x) + G (dw + h shift))`; `scratch` has length `n`.
    pub fn step(&self, x: &[f64], dw: &[f64], shift: Option<&[f64]>, out: &mut [f64], scratch: &mut [f64]) {
        let m = self.model;
        m.eval_nonlinear(x, scratch);
        for i in 0..m.dim {
            let mut noise = 0.0;
            for j in 0..m.noise_dim {
                let inc = match shift {
                    Some(s) => dw[j] + self.h * s[j],
                    None => dw[j],
                };
                noise += m.noise_map[(i, j)] * inc;
            }
            scratch[i] = x[i] + self.h * scratch[i] + noise;
        }
        match &self.inverse {
            Inverse::Diagonal(d) => {
                for i in 0..m.dim {
                    out[i] = d[i] * scratch[i];
                }
            }
            Inverse::Dense(inv) => {
                for i in 0..m.dim {
                    out[i] = (0..m.dim).map(|j| inv[(i, j)] * scratch[j]).sum();
                }
            }
        }
    }

    pub fn check(&self, x: &[f64], step: usize) -> Result<()> {
        let nx = norm(x);
        if !(nx <= self.guard) {
            return Err(Error::Divergence {
                step,
                norm: nx,
                guard: self.guard,
            });
        }
        Ok(())
    }
}

/// A sampled path with the Wiener increments that drove it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVec>,
    pub noise_increments: Vec<Vec<f64>>,
    pub seed: u64,
}

impl Trajectory {
    pub fn last(&self) -> &StateVec {
        self.states.last().expect("trajectory has at least one state")
    }
}

fn simulate_indexed(
    model: &ModelSpec,
    x0: &StateVec,
    dt: f64,
    n_steps: usize,
    seed: u64,
    path_index: u64,
    drift_shift: Option<&ShiftFn>,
) -> Result<Trajectory> {
    if x0.len() != model.dim {
        return Err(Error::Config(format!(
            "initial state has length {}, model dimension is {}",
            x0.len(),
            model.dim
        )));
    }
    let stepper = Stepper::new(model, dt)?;
    let mut rng = rng::stream(seed, Domain::Paths, path_index);
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut increments = Vec::with_capacity(n_steps);
    times.push(0.0);
    states.push(x0.clone());
    let mut x = x0.as_slice().to_vec();
    let mut next = vec![0.0; model.dim];
    let mut scratch = vec![0.0; model.dim];
    for k in 0..n_steps {
        let mut dw = vec![0.0; model.noise_dim];
        rng::fill_normal(&mut rng, stepper.sqrt_h(), &mut dw);
        let shift = drift_shift.map(|g| g(&x));
        stepper.step(&x, &dw, shift.as_deref(), &mut next, &mut scratch);
        stepper.check(&next, k + 1)?;
        std::mem::swap(&mut x, &mut next);
        times.push((k + 1) as f64 * dt);
        states.push(StateVec::new(x.clone())?);
        increments.push(dw);
    }
    Ok(Trajectory {
        times,
        states,
        noise_increments: increments,
        seed,
    })
}

/// One path from `x0`; bit-identical for identical inputs.
pub fn simulate_path(
    model: &ModelSpec,
    x0: &StateVec,
    dt: f64,
    n_steps: usize,
    seed: u64,
    drift_shift: Option<&ShiftFn>,
) -> Result<Trajectory> {
    simulate_indexed(model, x0, dt, n_steps, seed, 0, drift_shift)
}

/// Two paths from `x0` and `x1` driven by the same increments.
pub fn coupled_pair(
    model: &ModelSpec,
    x0: &StateVec,
    x1: &StateVec,
    dt: f64,
    n_steps: usize,
    seed: u64,
) -> Result<(Trajectory, Trajectory)> {
    Ok((
        simulate_path(model, x0, dt, n_steps, seed, None)?,
        simulate_path(model, x1, dt, n_steps, seed, None)?,
    ))
}

/// `coupled_pair` over many independent noise streams, returning
/// `|X^0_t - X^1_t| / |x0 - x1|` at the requested checkpoint steps.
pub fn coupled_ratios(
    model: &ModelSpec,
    x0: &StateVec,
    x1: &StateVec,
    dt: f64,
    checkpoints: &[usize],
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let n_steps = checkpoints.iter().copied().max().unwrap_or(0);
    let d0 = crate::model::dist(x0.as_slice(), x1.as_slice());
    (0..n_pairs as u64)
        .into_par_iter()
        .map(|p| {
            let a = simulate_indexed(model, x0, dt, n_steps, seed, p, None)?;
            let b = simulate_indexed(model, x1, dt, n_steps, seed, p, None)?;
            Ok(checkpoints
                .iter()
                .map(|&k| crate::model::dist(a.states[k].as_slice(), b.states[k].as_slice()) / d0)
                .collect())
        })
        .collect()
}

/// Samples from a long path after burn-in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    pub samples: Vec<StateVec>,
    pub burn_in_time: f64,
    pub thinning_step: f64,
}

impl EmpiricalMeasure {
    /// Mean and naive standard error of `phi` over the samples.
    pub fn mean_of(&self, phi: impl Fn(&[f64]) -> f64) -> (f64, f64) {
        mean_stderr(self.samples.iter().map(|s| phi(s.as_slice())))
    }
}

pub(crate) fn mean_stderr(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut n = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for v in values {
        n += 1;
        let d = v - mean;
        mean += d / n as f64;
        m2 += d * (v - mean);
    }
    if n < 2 {
        return (mean, 0.0);
    }
    let var = (m2 / (n - 1) as f64).max(0.0);
    (mean, (var / n as f64).sqrt())
}

/// Long-path sampling of the invariant measure started at the origin.
pub fn estimate_invariant(
    model: &ModelSpec,
    dt: f64,
    burn_in_steps: usize,
    n_samples: usize,
    thinning: usize,
    seed: u64,
) -> Result<EmpiricalMeasure> {
    if (burn_in_steps as f64) * dt < 5.0 / model.eta * (1.0 - 1e-12) {
        return Err(Error::Config(format!(
            "burn-in {} is shorter than 5/eta = {}",
            burn_in_steps as f64 * dt,
            5.0 / model.eta
        )));
    }
    if n_samples == 0 || thinning == 0 {
        return Err(Error::Config("n_samples and thinning must be positive".into()));
    }
    let stepper = Stepper::new(model, dt)?;
    let mut rng = rng::stream(seed, Domain::Invariant, 0);
    let mut x = vec![0.0; model.dim];
    let mut next = vec![0.0; model.dim];
    let mut scratch = vec![0.0; model.dim];
    let mut dw = vec![0.0; model.noise_dim];
    let mut samples = Vec::with_capacity(n_samples);
    let total = burn_in_steps + n_samples * thinning;
    for k in 0..total {
        rng::fill_normal(&mut rng, stepper.sqrt_h(), &mut dw);
        stepper.step(&x, &dw, None, &mut next, &mut scratch);
        stepper.check(&next, k + 1)?;
        std::mem::swap(&mut x, &mut next);
        let after = k + 1;
        if after > burn_in_steps && (after - burn_in_steps) % thinning == 0 {
            samples.push(StateVec::new(x.clone())?);
        }
    }
    Ok(EmpiricalMeasure {
        samples,
        burn_in_time: burn_in_steps as f64 * dt,
        thinning_step: thinning as f64 * dt,
    })
}

/// `estimate_invariant` with burn-in `10/eta` and thinning `1/eta`.
pub fn estimate_invariant_default(model: &ModelSpec, dt: f64, n_samples: usize, seed: u64) -> Result<EmpiricalMeasure> {
    let burn = (10.0 / model.eta / dt).ceil() as usize;
    let thin = ((1.0 / model.eta / dt).round() as usize).max(1);
    estimate_invariant(model, dt, burn, n_samples, thin, seed)
}

/// Runs `n_paths` paths of `n_steps` and calls `visit(path, step, state)` at
/// every step including `0`. Per-path results are combined in path order.
pub(crate) fn run_paths<T: Send>(
    model: &ModelSpec,
    x0: &[f64],
    dt: f64,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
    drift_shift: Option<&ShiftFn>,
    init: impl Fn() -> T + Sync,
    visit: impl Fn(&mut T, usize, &[f64], Option<&[f64]>) + Sync,
) -> Result<Vec<T>> {
    let refiner = Refiner::new(model, dt, DEFAULT_BLOWUP_GUARD)?;
    (0..n_paths as u64)
        .into_par_iter()
        .map(|p| {
            let mut rng = rng::stream(seed, Domain::Paths, p);
            let mut refine_rng = rng::stream(seed, Domain::Refinement, p);
            let mut acc = init();
            let mut x = x0.to_vec();
            let mut next = vec![0.0; model.dim];
            let mut scratch = vec![0.0; model.dim];
            let mut dw = vec![0.0; model.noise_dim];
            for k in 0..n_steps {
                let shift = drift_shift.map(|g| g(&x));
                visit(&mut acc, k, &x, shift.as_deref());
                rng::fill_normal(&mut rng, refiner.sqrt_h(), &mut dw);
                refiner.advance(0, &mut x, &dw, shift.as_deref(), &mut refine_rng, k + 1, &mut next, &mut scratch)?;
            }
            let shift = drift_shift.map(|g| g(&x));
            visit(&mut acc, n_steps, &x, shift.as_deref());
            Ok(acc)
        })
        .collect()
}

/// Monte Carlo `P_t[phi](x) = E phi(X^x_t)` with its standard error.
pub fn semigroup_estimate(
    model: &ModelSpec,
    phi: &(dyn Fn(&[f64]) -> f64 + Sync),
    x: &StateVec,
    t: f64,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if !(t >= 0.0) {
        return Err(Error::Config(format!("t must be nonnegative, got {t}")));
    }
    let n_steps = (t / dt).round() as usize;
    if n_steps == 0 {
        return Ok((phi(x.as_slice()), 0.0));
    }
    let vals = run_paths(
        model,
        x.as_slice(),
        dt,
        n_steps,
        n_paths,
        seed,
        None,
        || 0.0,
        |acc, k, s, _| {
            if k == n_steps {
                *acc = phi(s);
            }
        },
    )?;
    Ok(mean_stderr(vals.into_iter()))
}

/// Gap `|P_t phi(x) - mu(phi)|` along checkpoints with a fitted log-linear slope.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixingCurve {
    /// `(t, gap, stderr)`.
    pub points: Vec<(f64, f64, f64)>,
    /// Slope of `ln gap` over points with gap above five standard errors.
    pub slope: Option<f64>,
    pub resolved_points: usize,
}

pub fn mixing_curve(
    model: &ModelSpec,
    phi: &(dyn Fn(&[f64]) -> f64 + Sync),
    x: &StateVec,
    times: &[f64],
    n_paths: usize,
    dt: f64,
    seed: u64,
    mu_phi: (f64, f64),
) -> Result<MixingCurve> {
    let steps: Vec<usize> = times.iter().map(|t| (t / dt).round() as usize).collect();
    let max_steps = steps.iter().copied().max().unwrap_or(0);
    let per_path = run_paths(
        model,
        x.as_slice(),
        dt,
        max_steps,
        n_paths,
        seed,
        None,
        || vec![0.0; steps.len()],
        |acc, k, s, _| {
            for (i, &st) in steps.iter().enumerate() {
                if st == k {
                    acc[i] = phi(s);
                }
            }
        },
    )?;
    let mut points = Vec::with_capacity(times.len());
    for (i, &t) in times.iter().enumerate() {
        let (m, se) = if steps[i] == 0 {
            (phi(x.as_slice()), 0.0)
        } else {
            mean_stderr(per_path.iter().map(|v| v[i]))
        };
        let se_total = (se * se + mu_phi.1 * mu_phi.1).sqrt();
        points.push((t, (m - mu_phi.0).abs(), se_total));
    }
    let resolved: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, g, se)| *g > 5.0 * se && *g > 0.0)
        .map(|(t, g, _)| (*t, g.ln()))
        .collect();
    let slope = if resolved.len() >= 2 {
        Some(crate::stats::linear_fit(&resolved).1)
    } else {
        None
    };
    Ok(MixingCurve {
        resolved_points: resolved.len(),
        points,
        slope,
    })
}

/// `E|X_t|` at geometric checkpoints and the fitted `C` in `sup_t E|X_t| <= C(1+|x0|)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentReport {
    /// `(t, E|X_t|, stderr)`.
    pub checkpoints: Vec<(f64, f64, f64)>,
    pub sup_mean: f64,
    pub fitted_c: f64,
}

pub fn moment_check(
    model: &ModelSpec,
    x0: &StateVec,
    dt: f64,
    horizon: f64,
    n_paths: usize,
    seed: u64,
    drift_shift: Option<&ShiftFn>,
) -> Result<MomentReport> {
    let n_steps = (horizon / dt).round() as usize;
    let mut steps = vec![0usize];
    let mut s = 1usize;
    while s < n_steps {
        steps.push(s);
        s *= 2;
    }
    steps.push(n_steps);
    steps.dedup();
    let per_path = run_paths(
        model,
        x0.as_slice(),
        dt,
        n_steps,
        n_paths,
        seed,
        drift_shift,
        || vec![0.0; steps.len()],
        |acc, k, x, _| {
            if let Ok(i) = steps.binary_search(&k) {
                acc[i] = norm(x);
            }
        },
    )?;
    let checkpoints: Vec<(f64, f64, f64)> = steps
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let (m, se) = mean_stderr(per_path.iter().map(|v| v[i]));
            (k as f64 * dt, m, se)
        })
        .collect();
    let sup_mean = checkpoints.iter().map(|c| c.1).fold(0.0, f64::max);
    Ok(MomentReport {
        fitted_c: sup_mean / (1.0 + x0.norm()),
        checkpoints,
        sup_mean,
    })
}

/// One-step transitions `(X, X', dW)` over a backward step of `substeps * h`.
pub(crate) struct TransitionSample {
    pub next: Vec<Vec<f64>>,
    /// Wiener increment over the whole backward step.
    pub dw: Vec<Vec<f64>>,
}

/// Largest number of halvings applied to a sub-step whose explicit part is too stiff.
const MAX_REFINE: usize = 14;
/// Sub-steps are halved while `h * stiffness` exceeds this.
const STIFF_LIMIT: f64 = 0.1;

/// Finite-difference power-iteration estimate of the spectral norm of `DF(x)`.
pub(crate) fn stiffness(model: &ModelSpec, x: &[f64]) -> f64 {
    if model.nonlinear_drift.name == "zero" {
        return 0.0;
    }
    let n = x.len();
    let f = &model.nonlinear_drift.func;
    let mut f0 = vec![0.0; n];
    f(x, &mut f0);
    let mut v = f0.clone();
    let mut len = norm(&v);
    if len < 1e-300 {
        v.fill(1.0);
        len = (n as f64).sqrt();
    }
    v.iter_mut().for_each(|c| *c /= len);
    let eps = 1e-6 * (1.0 + norm(x));
    let mut xp = vec![0.0; n];
    let mut fp = vec![0.0; n];
    let mut lam = 0.0;
    for _ in 0..4 {
        for i in 0..n {
            xp[i] = x[i] + eps * v[i];
        }
        f(&xp, &mut fp);
        for i in 0..n {
            v[i] = (fp[i] - f0[i]) / eps;
        }
        lam = norm(&v);
        if lam < 1e-300 {
            return 0.0;
        }
        v.iter_mut().for_each(|c| *c /= lam);
    }
    lam
}

pub(crate) struct Refiner<'a> {
    model: &'a ModelSpec,
    levels: Vec<Stepper<'a>>,
}

impl<'a> Refiner<'a> {
    pub(crate) fn new(model: &'a ModelSpec, h: f64, guard: f64) -> Result<Self> {
        let depth = if model.nonlinear_drift.name == "zero" { 1 } else { MAX_REFINE + 1 };
        let levels = (0..depth)
            .map(|j| Stepper::new(model, h / (1u64 << j) as f64).map(|s| s.with_guard(guard)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { model, levels })
    }

    pub(crate) fn sqrt_h(&self) -> f64 {
        self.levels[0].sqrt_h
    }

    /// Advances `x` by one step with increment `dw`, splitting the step by
    /// Brownian bridge refinement where the explicit drift is locally too stiff.
    /// The drift shift is held fixed over the step.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn advance<R: rand::Rng>(
        &self,
        level: usize,
        x: &mut Vec<f64>,
        dw: &[f64],
        shift: Option<&[f64]>,
        rng: &mut R,
        step: usize,
        next: &mut Vec<f64>,
        scratch: &mut [f64],
    ) -> Result<()> {
        let stepper = &self.levels[level];
        if level + 1 < self.levels.len() && stepper.h * stiffness(self.model, x) > STIFF_LIMIT {
            let half_sd = 0.5 * stepper.sqrt_h;
            let mut first = vec![0.0; dw.len()];
            rng::fill_normal(rng, half_sd, &mut first);
            for (a, d) in first.iter_mut().zip(dw) {
                *a += 0.5 * d;
            }
            let second: Vec<f64> = dw.iter().zip(&first).map(|(d, a)| d - a).collect();
            self.advance(level + 1, x, &first, shift, rng, step, next, scratch)?;
            return self.advance(level + 1, x, &second, shift, rng, step, next, scratch);
        }
        stepper.step(x, dw, shift, next, scratch);
        stepper.check(next, step)?;
        std::mem::swap(x, next);
        Ok(())
    }
}

pub(crate) fn transition_sample(
    model: &ModelSpec,
    starts: &[Vec<f64>],
    h: f64,
    substeps: usize,
    seed: u64,
    guard: f64,
) -> Result<TransitionSample> {
    transition_sample_streams(model, starts, None, h, substeps, seed, guard)
}

/// As [`transition_sample`], with start `i` driven by noise stream `streams[i]`
/// so that starts sharing a stream are coupled.
pub(crate) fn transition_sample_streams(
    model: &ModelSpec,
    starts: &[Vec<f64>],
    streams: Option<&[u64]>,
    h: f64,
    substeps: usize,
    seed: u64,
    guard: f64,
) -> Result<TransitionSample> {
    let refiner = Refiner::new(model, h, guard)?;
    let out: Result<Vec<(Vec<f64>, Vec<f64>)>> = starts
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let index = streams.map_or(i as u64, |s| s[i]);
            let mut rng = rng::stream(seed, Domain::Transitions, index);
            let mut refine_rng = rng::stream(seed, Domain::Refinement, index);
            let mut x = x0.clone();
            let mut next = vec![0.0; model.dim];
            let mut scratch = vec![0.0; model.dim];
            let mut dw = vec![0.0; model.noise_dim];
            let mut total = vec![0.0; model.noise_dim];
            for k in 0..substeps {
                rng::fill_normal(&mut rng, refiner.sqrt_h(), &mut dw);
                for (t, d) in total.iter_mut().zip(&dw) {
                    *t += d;
                }
                refiner.advance(0, &mut x, &dw, None, &mut refine_rng, k + 1, &mut next, &mut scratch)?;
            }
            Ok((x, total))
        })
        .collect();
    let (next, dw) = out?.into_iter().unzip();
    Ok(TransitionSample { next, dw })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Nonlinearity;

    fn ou(g: f64) -> ModelSpec {
        ModelSpec::ornstein_uhlenbeck(g).unwrap()
    }

    #[test]
    fn stiff_starts_are_refined() {
        let m = ModelSpec::scalar(1e-6, Nonlinearity::cubic(1.0), 0.0, 3).unwrap();
        let tr = transition_sample(&m, &[vec![50.0]], 0.01, 1, 1, 1e6).unwrap();
        let exact = 50.0 / (1.0f64 + 2.0 * 2500.0 * 0.01).sqrt();
        assert!((tr.next[0][0] - exact).abs() < 0.05 * exact, "{} vs {exact}", tr.next[0][0]);
        assert!((stiffness(&m, &[2.0]) - 12.0).abs() < 1e-3);
        assert_eq!(stiffness(&ou(1.0), &[5.0]), 0.0);
    }

    #[test]
    fn noiseless_linear_decay() {
        let m = ou(0.0);
        let tr = simulate_path(&m, &StateVec::scalar(2.0), 1e-3, 1000, 1, None).unwrap();
        let x1 = tr.last().as_slice()[0];
        assert!((x1 - 2.0 * (-1.0f64).exp()).abs() < 2e-3);
        assert_eq!(tr.times.len(), 1001);
        assert_eq!(tr.noise_increments.len(), 1000);
    }

    #[test]
    fn equilibrium_stays_put() {
        let m = ModelSpec::scalar(1.0, Nonlinearity::cubic(1.0), 0.0, 3).unwrap();
        let tr = simulate_path(&m, &StateVec::scalar(0.0), 1e-2, 100, 1, None).unwrap();
        assert!(tr.states.iter().all(|s| s.as_slice()[0] == 0.0));
    }

    #[test]
    fn deterministic_given_seed() {
        let m = ModelSpec::scalar(1.0, Nonlinearity::cubic(1.0), 1.0, 3).unwrap();
        let a = simulate_path(&m, &StateVec::scalar(0.5), 1e-2, 200, 42, None).unwrap();
        let b = simulate_path(&m, &StateVec::scalar(0.5), 1e-2, 200, 42, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identical_starts_give_identical_pairs() {
        let m = ou(1.0);
        let (a, b) = coupled_pair(&m, &StateVec::scalar(1.0), &StateVec::scalar(1.0), 1e-2, 100, 3).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn linear_pair_contracts_exactly() {
        let m = ou(1.0);
        let (a, b) = coupled_pair(&m, &StateVec::scalar(1.0), &StateVec::scalar(-1.0), 1e-3, 1000, 3).unwrap();
        let d = (a.last().as_slice()[0] - b.last().as_slice()[0]).abs() / 2.0;
        assert!((d / (-1.0f64).exp() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn divergence_guard_names_step() {
        let m = ModelSpec::scalar(1.0, Nonlinearity::polynomial(vec![0.0, 0.0, 0.0, 5.0]), 0.0, 3).unwrap();
        let err = simulate_path(&m, &StateVec::scalar(10.0), 0.1, 100, 1, None).unwrap_err();
        assert!(matches!(err, Error::Divergence { step, .. } if step >= 1));
    }

    #[test]
    fn increments_have_wiener_moments() {
        let m = ou(1.0);
        let dt = 1e-2;
        let n = 20_000;
        let per = run_paths(&m, &[0.0], dt, 1, n, 5, None, || 0.0, |_, _, _, _| {}).unwrap();
        assert_eq!(per.len(), n);
        let incs: Vec<f64> = (0..n as u64)
            .map(|p| {
                let mut r = rng::stream(5, Domain::Paths, p);
                let mut w = [0.0];
                rng::fill_normal(&mut r, dt.sqrt(), &mut w);
                w[0]
            })
            .collect();
        let mean = incs.iter().sum::<f64>() / n as f64;
        let var = incs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 * (dt / n as f64).sqrt());
        assert!((var / dt - 1.0).abs() < 0.05);
    }

    #[test]
    fn semigroup_at_time_zero_is_identity() {
        let m = ou(1.0);
        let phi = |x: &[f64]| x[0].cos();
        let (v, se) = semigroup_estimate(&m, &phi, &StateVec::scalar(0.7), 0.0, 10, 0.01, 1).unwrap();
        assert_eq!(v, 0.7f64.cos());
        assert_eq!(se, 0.0);
        let one = |_: &[f64]| 1.0;
        let (v, se) = semigroup_estimate(&m, &one, &StateVec::scalar(0.7), 1.0, 100, 0.01, 1).unwrap();
        assert_eq!((v, se), (1.0, 0.0));
    }

    #[test]
    fn short_burn_in_is_rejected() {
        let m = ou(1.0);
        assert!(estimate_invariant(&m, 0.01, 100, 10, 10, 1).is_err());
    }
}
