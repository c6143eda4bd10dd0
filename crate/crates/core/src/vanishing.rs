//! Vanishing-discount assembly of `(vbar, zetabar, lambda)` and checks on it.

use serde::{Deserialize, Serialize};
use rayon::prelude::*;

use crate::basis::FittedFunction;
use crate::discount::{DiscountScheme, DiscountSolution};
use crate::error::{Error, Result};
use crate::forward::{estimate_invariant_default, mean_stderr, run_paths, transition_sample_streams};
use crate::hamiltonian::psi;
use crate::model::{HamiltonianSpec, ModelSpec, RunConfig, StateVec};
use crate::stats::linear_fit;

/// One row of the schedule record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub alpha: f64,
    pub lambda_alpha: f64,
    /// `sup |vbar^alpha - vbar^{previous alpha}|` on the test points; `NaN`
    /// for the first entry.
    #[serde(with = "crate::export::nan_as_null")]
    pub v_change: f64,
    pub horizon_t: f64,
    pub n_paths: usize,
}

/// `x -> v(x) - v(0)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueFunction {
    pub fit: FittedFunction,
    pub offset: f64,
}

impl ValueFunction {
    fn centered(fit: FittedFunction) -> Self {
        let offset = fit.eval_scalar(&vec![0.0; fit.dim]);
        Self { fit, offset }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.fit.eval_scalar(x) - self.offset
    }

    pub fn extrapolated(&self, x: &[f64]) -> bool {
        !self.fit.hull.contains(x)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EbsdeSolution {
    pub vbar: ValueFunction,
    pub zetabar: FittedFunction,
    pub lambda: f64,
    /// Standard error of `psi(X, zetabar(X))` over invariant samples.
    pub lambda_stderr: f64,
    pub schedule_record: Vec<ScheduleEntry>,
    pub test_points: Vec<StateVec>,
    pub m_const: f64,
    pub k_x: f64,
    pub eta: f64,
}

impl EbsdeSolution {
    pub fn vbar_at(&self, x: &StateVec) -> f64 {
        self.vbar.eval(x.as_slice())
    }

    pub fn zetabar_at(&self, x: &StateVec) -> Vec<f64> {
        self.zetabar.eval(x.as_slice())
    }

    /// Restores basis caches after deserialization.
    pub fn prepare(&mut self) -> Result<()> {
        self.vbar.fit.prepare()?;
        self.zetabar.prepare()
    }

    /// Schedule record as CSV `(alpha, lambda_alpha, v_change, T, n_paths)`.
    pub fn schedule_csv(&self) -> String {
        schedule_csv(&self.schedule_record)
    }

    /// Same solution with `lambda` replaced.
    pub fn with_lambda(&self, lambda: f64) -> Self {
        let mut out = self.clone();
        out.lambda = lambda;
        out
    }
}

pub fn schedule_csv(record: &[ScheduleEntry]) -> String {
    use crate::export::{csv_string, fmt};
    csv_string(
        "solve",
        &["alpha", "lambda_alpha", "v_change", "T", "n_paths"],
        record.iter().map(|e| {
            vec![
                fmt(e.alpha),
                fmt(e.lambda_alpha),
                fmt(e.v_change),
                fmt(e.horizon_t),
                e.n_paths.to_string(),
            ]
        }),
    )
}

/// Solves every scheduled discount rate on a shared design and extrapolates
/// `lambda` linearly in `alpha` through the last three points.
pub fn run_schedule(
    model: &ModelSpec,
    ham: &HamiltonianSpec,
    cfg: &RunConfig,
    test_points: &[StateVec],
) -> Result<EbsdeSolution> {
    if cfg.alpha_schedule.len() < 3 {
        return Err(Error::Config(format!(
            "alpha schedule needs at least 3 entries, got {}",
            cfg.alpha_schedule.len()
        )));
    }
    let scheme = DiscountScheme::build(model, ham, cfg, test_points)?;
    let sols: Vec<DiscountSolution> = cfg
        .alpha_schedule
        .iter()
        .map(|&a| scheme.solve(a))
        .collect::<Result<_>>()?;
    assemble(model, ham, cfg, test_points, sols)
}

/// Builds the solution from per-alpha solves ordered by decreasing `alpha`.
pub fn assemble(
    model: &ModelSpec,
    ham: &HamiltonianSpec,
    cfg: &RunConfig,
    test_points: &[StateVec],
    sols: Vec<DiscountSolution>,
) -> Result<EbsdeSolution> {
    let origin = StateVec::zeros(model.dim);
    let mut record = Vec::with_capacity(sols.len());
    let mut prev: Option<Vec<f64>> = None;
    for s in &sols {
        let v0 = s.value_at(&origin);
        let vals: Vec<f64> = test_points.iter().map(|x| s.value_at(x) - v0).collect();
        let v_change = match &prev {
            Some(p) => p.iter().zip(&vals).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())),
            None => f64::NAN,
        };
        record.push(ScheduleEntry {
            alpha: s.alpha,
            lambda_alpha: s.alpha * v0,
            v_change,
            horizon_t: s.horizon_t,
            n_paths: s.diagnostics.n_paths,
        });
        prev = Some(vals);
    }

    let tail: Vec<(f64, f64)> = record[record.len() - 3..]
        .iter()
        .map(|e| (e.alpha, e.lambda_alpha))
        .collect();
    let (lambda, _) = linear_fit(&tail);
    if !lambda.is_finite() {
        return Err(Error::ConvergenceFailure {
            reason: "extrapolated lambda is not finite".into(),
            record,
        });
    }
    let gaps: Vec<f64> = tail.iter().map(|(_, l)| (l - lambda).abs()).collect();
    let slack = 1e-3 * (1.0 + lambda.abs());
    if gaps.windows(2).any(|w| w[1] > w[0] + slack) {
        return Err(Error::ConvergenceFailure {
            reason: format!("|lambda_alpha - lambda| is not decreasing along the schedule: {gaps:?}"),
            record,
        });
    }

    let last = sols.last().expect("schedule is non-empty");
    let vbar = ValueFunction::centered(last.value.clone());
    let zetabar = last.zeta.clone();
    let d = &last.diagnostics;

    let inv = estimate_invariant_default(model, cfg.sim_dt(), 2000, cfg.seed ^ 0x1a)?;
    let mut psis = Vec::with_capacity(inv.samples.len());
    for x in &inv.samples {
        psis.push(psi(ham, x.as_slice(), &zetabar.eval(x.as_slice()))?.psi);
    }
    let (_, lambda_stderr) = mean_stderr(psis.into_iter());

    Ok(EbsdeSolution {
        vbar,
        zetabar,
        lambda,
        lambda_stderr,
        schedule_record: record,
        test_points: test_points.to_vec(),
        m_const: d.m_const,
        k_x: d.k_x,
        eta: d.eta,
    })
}

/// Finite-difference `grad vbar . G` against `zetabar` at one point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZPoint {
    pub x: Vec<f64>,
    pub zeta: Vec<f64>,
    pub fd: Vec<f64>,
    pub in_hull: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZIdentificationReport {
    pub points: Vec<ZPoint>,
    /// `sup |zeta - fd| / sup |fd|` over points inside the training hull.
    pub relative_sup_error: f64,
    pub abs_sup_error: f64,
}

pub fn check_z_identification(
    sol: &EbsdeSolution,
    model: &ModelSpec,
    test_points: &[StateVec],
    fd_step: f64,
) -> ZIdentificationReport {
    let d = model.dim;
    let mut points = Vec::with_capacity(test_points.len());
    let mut err: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for x in test_points {
        let xs = x.as_slice();
        let mut grad = vec![0.0; d];
        let mut xp = xs.to_vec();
        for i in 0..d {
            xp[i] = xs[i] + fd_step;
            let up = sol.vbar.eval(&xp);
            xp[i] = xs[i] - fd_step;
            let down = sol.vbar.eval(&xp);
            xp[i] = xs[i];
            grad[i] = (up - down) / (2.0 * fd_step);
        }
        let fd: Vec<f64> = (0..model.noise_dim)
            .map(|j| (0..d).map(|i| grad[i] * model.noise_map[(i, j)]).sum())
            .collect();
        let zeta = sol.zetabar.eval(xs);
        let in_hull = sol.zetabar.hull.contains(xs);
        if in_hull {
            let diff = zeta.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            err = err.max(diff);
            scale = scale.max(fd.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        points.push(ZPoint {
            x: xs.to_vec(),
            zeta,
            fd,
            in_hull,
        });
    }
    let relative_sup_error = if scale > 1e-12 { err / scale } else { err };
    ZIdentificationReport {
        points,
        relative_sup_error,
        abs_sup_error: err,
    }
}

/// Per-point Monte Carlo estimate of
/// `E vbar(X_T) + E int_0^T (psi(X, zetabar(X)) - lambda) ds - vbar(x)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathResidual {
    pub x: Vec<f64>,
    pub horizon: f64,
    pub residual: f64,
    pub stderr: f64,
    pub vbar_x: f64,
}

/// Left-point rule on the simulation grid with paths under the uncontrolled
/// dynamics.
pub(crate) fn path_residual(
    sol: &EbsdeSolution,
    model: &ModelSpec,
    ham: &HamiltonianSpec,
    x: &StateVec,
    horizon: f64,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<PathResidual> {
    let n_steps = (horizon / dt).round() as usize;
    let vbar_x = sol.vbar_at(x);
    if n_steps == 0 {
        return Ok(PathResidual {
            x: x.as_slice().to_vec(),
            horizon: 0.0,
            residual: 0.0,
            stderr: 0.0,
            vbar_x,
        });
    }
    let err = std::sync::Mutex::new(None);
    let per_path = run_paths(
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
                *acc += sol.vbar.eval(s);
            } else {
                match psi(ham, s, &sol.zetabar.eval(s)) {
                    Ok(v) => *acc += (v.psi - sol.lambda) * dt,
                    Err(e) => {
                        err.lock().unwrap().get_or_insert(e);
                    }
                }
            }
        },
    )?;
    if let Some(e) = err.into_inner().unwrap() {
        return Err(e);
    }
    let (mean, stderr) = mean_stderr(per_path.into_iter());
    Ok(PathResidual {
        x: x.as_slice().to_vec(),
        horizon: n_steps as f64 * dt,
        residual: mean - vbar_x,
        stderr,
        vbar_x,
    })
}

/// Evaluates `vbar` at `xs` through the mild representation
/// `vbar(x) = E[int_0^T psi(X_s, zetabar(X_s)) ds + vbar(X_T)] - lambda T`,
/// reported relative to the same quantity at the origin. Paths from every
/// start share noise streams. Forward steps are refined where the nonlinear
/// drift is stiff, so starts far from the attractor are admissible.
pub fn mild_values(
    sol: &EbsdeSolution,
    model: &ModelSpec,
    ham: &HamiltonianSpec,
    xs: &[StateVec],
    horizon: f64,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_paths == 0 || !(horizon > 0.0 && dt > 0.0) {
        return Err(Error::Config("mild_values needs n_paths > 0 and positive horizon and dt".into()));
    }
    let n_steps = ((horizon / dt).round() as usize).max(1);
    let mut points = vec![vec![0.0; model.dim]];
    points.extend(xs.iter().map(|x| x.as_slice().to_vec()));
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(points.len() * n_paths);
    let mut streams: Vec<u64> = Vec::with_capacity(points.len() * n_paths);
    for p in &points {
        for j in 0..n_paths {
            states.push(p.clone());
            streams.push(j as u64);
        }
    }
    let mut acc = vec![0.0; states.len()];
    let integrate = |states: &[Vec<f64>], acc: &mut [f64], weight: f64, terminal: bool| -> Result<()> {
        let vals: Result<Vec<f64>> = states
            .par_iter()
            .map(|s| {
                if terminal {
                    Ok(sol.vbar.eval(s))
                } else {
                    psi(ham, s, &sol.zetabar.eval(s)).map(|v| v.psi)
                }
            })
            .collect();
        for (a, v) in acc.iter_mut().zip(vals?) {
            *a += weight * v;
        }
        Ok(())
    };
    for k in 0..n_steps {
        integrate(&states, &mut acc, dt, false)?;
        let step_seed = seed.wrapping_add(k as u64);
        states = transition_sample_streams(model, &states, Some(&streams), dt, 1, step_seed, 1e6)?.next;
    }
    integrate(&states, &mut acc, 1.0, true)?;
    let means: Vec<f64> = acc.chunks(n_paths).map(|c| c.iter().sum::<f64>() / n_paths as f64).collect();
    Ok(means[1..].iter().map(|m| m - means[0]).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MildResidualReport {
    pub points: Vec<PathResidual>,
    /// `max |residual| / (1 + |vbar(x)|)`.
    pub max_relative: f64,
}

pub fn mild_hjb_residual(
    sol: &EbsdeSolution,
    model: &ModelSpec,
    ham: &HamiltonianSpec,
    t_check: f64,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<MildResidualReport> {
    let mut points = Vec::with_capacity(sol.test_points.len());
    for (i, x) in sol.test_points.iter().enumerate() {
        points.push(path_residual(sol, model, ham, x, t_check, n_paths, dt, seed.wrapping_add(i as u64))?);
    }
    let max_relative = points
        .iter()
        .map(|p| p.residual.abs() / (1.0 + p.vbar_x.abs()))
        .fold(0.0, f64::max);
    Ok(MildResidualReport { points, max_relative })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSpec;
    use crate::hamiltonian::{registry_hamiltonian, ControlSet, StateCost};

    fn cfg() -> RunConfig {
        let mut cfg = RunConfig::default_for(1);
        cfg.n_paths = 4000;
        cfg.basis = BasisSpec::polynomial(6, 3.0);
        cfg
    }

    fn pts() -> Vec<StateVec> {
        [-1.5, -0.5, 0.5, 1.0, 1.5].iter().map(|v| StateVec::scalar(*v)).collect()
    }

    #[test]
    fn constant_driver() {
        let model = ModelSpec::ornstein_uhlenbeck(1.0).unwrap();
        let ham = registry_hamiltonian(1, 1, StateCost::Constant { value: 3.0 }, 0.0, &ControlSet::None).unwrap();
        let mut c = cfg();
        c.tail_eps = 1e-12;
        let sol = run_schedule(&model, &ham, &c, &pts()).unwrap();
        assert!((sol.lambda - 3.0).abs() < 1e-9, "{}", sol.lambda);
        assert_eq!(sol.vbar_at(&StateVec::scalar(0.0)), 0.0);
        for x in pts() {
            assert!(sol.vbar_at(&x).abs() < 1e-8);
        }
        let z = check_z_identification(&sol, &model, &pts(), 1e-3);
        assert!(z.abs_sup_error < 1e-6);
        let r = mild_hjb_residual(&sol, &model, &ham, 1.0, 200, 0.01, 3).unwrap();
        assert!(r.max_relative < 1e-8);
    }

    #[test]
    fn zero_horizon_residual_is_exactly_zero() {
        let model = ModelSpec::ornstein_uhlenbeck(1.0).unwrap();
        let ham = registry_hamiltonian(1, 1, StateCost::Cos, 0.0, &ControlSet::None).unwrap();
        let sol = run_schedule(&model, &ham, &cfg(), &pts()).unwrap();
        let r = mild_hjb_residual(&sol, &model, &ham, 0.0, 100, 0.01, 1).unwrap();
        assert!(r.points.iter().all(|p| p.residual == 0.0));
        assert_eq!(sol.vbar_at(&StateVec::scalar(0.0)), 0.0);
    }

    #[test]
    fn mild_values_agree_with_fit_inside_hull() {
        let model = ModelSpec::ornstein_uhlenbeck(1.0).unwrap();
        let ham = registry_hamiltonian(1, 1, StateCost::Cos, 0.0, &ControlSet::None).unwrap();
        let sol = run_schedule(&model, &ham, &cfg(), &pts()).unwrap();
        let xs = [StateVec::scalar(1.0), StateVec::scalar(-0.5)];
        let mild = mild_values(&sol, &model, &ham, &xs, 1.0, 400, 0.01, 4).unwrap();
        for (x, m) in xs.iter().zip(&mild) {
            assert!((m - sol.vbar_at(x)).abs() < 0.03, "{m} vs {}", sol.vbar_at(x));
        }
    }

    #[test]
    fn solution_survives_json() {
        let model = ModelSpec::ornstein_uhlenbeck(1.0).unwrap();
        let ham = registry_hamiltonian(1, 1, StateCost::Cos, 0.0, &ControlSet::None).unwrap();
        let sol = run_schedule(&model, &ham, &cfg(), &pts()).unwrap();
        let text = serde_json::to_string(&sol).unwrap();
        let mut back: EbsdeSolution = serde_json::from_str(&text).unwrap();
        back.prepare().unwrap();
        assert!(back.schedule_record[0].v_change.is_nan());
        assert_eq!(back.lambda, sol.lambda);
        let x = StateVec::scalar(0.7);
        assert_eq!(back.vbar_at(&x), sol.vbar_at(&x));
        assert_eq!(back.zetabar_at(&x), sol.zetabar_at(&x));
    }

    #[test]
    fn short_schedule_is_rejected() {
        let model = ModelSpec::ornstein_uhlenbeck(1.0).unwrap();
        let ham = registry_hamiltonian(1, 1, StateCost::Cos, 0.0, &ControlSet::None).unwrap();
        let mut c = cfg();
        c.alpha_schedule = vec![0.2, 0.1];
        assert!(matches!(run_schedule(&model, &ham, &c, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn schedule_csv_has_header() {
        let rec = vec![ScheduleEntry {
            alpha: 0.1,
            lambda_alpha: 0.8,
            v_change: f64::NAN,
            horizon_t: 92.1,
            n_paths: 10,
        }];
        let s = schedule_csv(&rec);
        assert!(s.lines().nth(1).unwrap() == "alpha,lambda_alpha,v_change,T,n_paths");
    }
}
