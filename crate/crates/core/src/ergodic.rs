//! Ergodic cost of feedback controls and verification of a computed
//! `(vbar, zetabar, lambda)`.

use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{estimate_invariant_default, mean_stderr, Stepper};
use crate::hamiltonian::psi;
use crate::model::{dot, HamiltonianSpec, ModelSpec, RunConfig, StateVec};
use crate::rng::{self, Domain};
use crate::vanishing::{path_residual, run_schedule, EbsdeSolution, PathResidual};

pub type FeedbackRule = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub struct Feedback {
    pub label: String,
    pub rule: FeedbackRule,
}

impl std::fmt::Debug for Feedback {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Feedback").field("label", &self.label).finish()
    }
}

impl Feedback {
    pub fn new(label: impl Into<String>, rule: FeedbackRule) -> Self {
        Self {
            label: label.into(),
            rule,
        }
    }

    pub fn constant(label: impl Into<String>, u: Vec<f64>) -> Self {
        Self::new(label, Arc::new(move |_: &[f64]| u.clone()))
    }

    /// Checks that the rule returns finite controls of the right length.
    pub fn check(&self, ham: &HamiltonianSpec, probes: &[Vec<f64>]) -> Result<()> {
        let len = ham.control_grid[0].len();
        for x in probes {
            let u = (self.rule)(x);
            if u.len() != len || u.iter().any(|v| !v.is_finite()) {
                return Err(Error::Evaluation(format!(
                    "feedback {} returned {u:?} at x={x:?}",
                    self.label
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of a long-run Monte Carlo average.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub horizon: f64,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub horizon: f64,
    pub n_paths: usize,
    /// Average over `[T/2, T]` minus average over `[0, T]`.
    pub stationarity_gap: f64,
    /// Set when the stationarity gap exceeds three standard errors.
    pub not_stationary: bool,
}

struct PathStats {
    cost: f64,
    cost_late: f64,
    slack: f64,
}

/// Simulates the drift-shifted dynamics under `fb` and returns time averages
/// of `L` and, when `sol` is given, of the Hamiltonian slack
/// `L + zetabar R(u) - psi(x, zetabar)`.
fn controlled_averages(
    model: &ModelSpec,
    ham: &HamiltonianSpec,
    fb: &Feedback,
    x0: &StateVec,
    p: EvalParams,
    sol: Option<&EbsdeSolution>,
) -> Result<Vec<PathStats>> {
    let eta = model.eta;
    if p.horizon < 20.0 / eta * (1.0 - 1e-12) {
        return Err(Error::Config(format!(
            "ergodic horizon {} is shorter than 20/eta = {}",
            p.horizon,
            20.0 / eta
        )));
    }
    if p.n_paths == 0 {
        return Err(Error::Config("n_paths must be positive".into()));
    }
    let n_steps = (p.horizon / p.dt).round() as usize;
    let half = n_steps / 2;
    let stepper = Stepper::new(model, p.dt)?;
    let err: Mutex<Option<Error>> = Mutex::new(None);
    let out: Result<Vec<PathStats>> = (0..p.n_paths as u64)
        .into_par_iter()
        .map(|path| {
            let mut r = rng::stream(p.seed, Domain::Paths, path);
            let mut x = x0.as_slice().to_vec();
            let mut next = vec![0.0; model.dim];
            let mut scratch = vec![0.0; model.dim];
            let mut dw = vec![0.0; model.noise_dim];
            let mut s = PathStats {
                cost: 0.0,
                cost_late: 0.0,
                slack: 0.0,
            };
            for k in 0..n_steps {
                let u = (fb.rule)(&x);
                let ru = (ham.control_map)(&u);
                let l = (ham.cost)(&x, &u);
                s.cost += l;
                if k >= half {
                    s.cost_late += l;
                }
                if let Some(sol) = sol {
                    let z = sol.zetabar.eval(&x);
                    match psi(ham, &x, &z) {
                        Ok(v) => s.slack += l + dot(&z, &ru) - v.psi,
                        Err(e) => {
                            err.lock().unwrap().get_or_insert(e);
                        }
                    }
                }
                rng::fill_normal(&mut r, stepper.sqrt_h(), &mut dw);
                stepper.step(&x, &dw, Some(&ru), &mut next, &mut scratch);
                stepper.check(&next, k + 1)?;
                std::mem::swap(&mut x, &mut next);
            }
            s.cost /= n_steps as f64;
            s.cost_late /= (n_steps - half) as f64;
            s.slack /= n_steps as f64;
            Ok(s)
        })
        .collect();
    if let Some(e) = err.into_inner().unwrap() {
        return Err(e);
    }
    out
}

fn estimate_from(stats: &[PathStats], p: EvalParams) -> CostEstimate {
    let (mean, stderr) = mean_stderr(stats.iter().map(|s| s.cost));
    let (late, _) = mean_stderr(stats.iter().map(|s| s.cost_late));
    let gap = late - mean;
    CostEstimate {
        mean,
        stderr,
        horizon: (p.horizon / p.dt).round() * p.dt,
        n_paths: stats.len(),
        stationarity_gap: gap,
        not_stationary: gap.abs() > 3.0 * stderr && gap.abs() > 1e-12 * (1.0 + mean.abs()),
    }
}

/// Long-run average cost of `fb`, left-point rule in time.
pub fn evaluate_j(
    model: &ModelSpec,
    ham: &HamiltonianSpec,
    fb: &Feedback,
    x0: &StateVec,
    params: EvalParams,
) -> Result<CostEstimate> {
    let stats = controlled_averages(model, ham, fb, x0, params, None)?;
    Ok(estimate_from(&stats, params))
}

/// `x -> argmin_u { L(x,u) + zetabar(x) R(u) }`.
pub fn optimal_feedback(sol: &EbsdeSolution, ham: &HamiltonianSpec) -> Feedback {
    let sol = sol.clone();
    let ham = ham.clone();
    let label = format!("optimal ({})", ham.label);
    Feedback::new(
        label,
        Arc::new(move |x: &[f64]| match psi(&ham, x, &sol.zetabar.eval(x)) {
            Ok(v) => v.argmin_u,
            Err(_) => vec![f64::NAN; ham.control_grid[0].len()],
        }),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackResult {
    pub label: String,
    pub cost: CostEstimate,
    pub slack_mean: f64,
    pub slack_stderr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimalityReport {
    pub lambda: f64,
    pub optimal: FeedbackResult,
    pub perturbations: Vec<FeedbackResult>,
    pub failures: Vec<String>,
    pub passed: bool,
}

fn feedback_result(
    model: &ModelSpec,
    ham: &HamiltonianSpec,
    sol: &EbsdeSolution,
    fb: &Feedback,
    x0: &StateVec,
    p: EvalParams,
) -> Result<FeedbackResult> {
    let stats = controlled_averages(model, ham, fb, x0, p, Some(sol))?;
    let (slack_mean, slack_stderr) = mean_stderr(stats.iter().map(|s| s.slack));
    Ok(FeedbackResult {
        label: fb.label.clone(),
        cost: estimate_from(&stats, p),
        slack_mean,
        slack_stderr,
    })
}

/// `J(optimal) <= lambda + max(3% |lambda|, 4 se)` and
/// `J(p) >= lambda - 4 se` for each perturbation, with `se` combining the
/// cost standard error and the solution's `lambda_stderr`.
pub fn verify_optimality(
    model: &ModelSpec,
    ham: &HamiltonianSpec,
    sol: &EbsdeSolution,
    x0: &StateVec,
    perturbations: &[Feedback],
    params: EvalParams,
) -> Result<OptimalityReport> {
    let lambda = sol.lambda;
    let opt = optimal_feedback(sol, ham);
    let optimal = feedback_result(model, ham, sol, &opt, x0, params)?;
    let mut failures = Vec::new();
    let se = |c: &CostEstimate| (c.stderr.powi(2) + sol.lambda_stderr.powi(2)).sqrt();
    let allowance = (0.03 * lambda.abs()).max(4.0 * se(&optimal.cost));
    if optimal.cost.mean > lambda + allowance {
        failures.push(format!(
            "J(optimal) = {:.6} exceeds lambda + {allowance:.6} = {:.6}",
            optimal.cost.mean,
            lambda + allowance
        ));
    }
    let mut results = Vec::with_capacity(perturbations.len());
    for (i, fb) in perturbations.iter().enumerate() {
        let r = feedback_result(model, ham, sol, fb, x0, EvalParams {
            seed: params.seed.wrapping_add(i as u64 + 1),
            ..params
        })?;
        if r.cost.mean < lambda - 4.0 * se(&r.cost) {
            failures.push(format!(
                "J({}) = {:.6} is below lambda - 4 se = {:.6}",
                r.label,
                r.cost.mean,
                lambda - 4.0 * se(&r.cost)
            ));
        }
        results.push(r);
    }
    Ok(OptimalityReport {
        lambda,
        passed: failures.is_empty(),
        optimal,
        perturbations: results,
        failures,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualReport {
    pub points: Vec<PathResidual>,
    /// Discretization allowance per unit `dt`.
    pub c_disc: f64,
    pub dt: f64,
    pub failures: Vec<String>,
    pub passed: bool,
}

pub const C_DISC: f64 = 2.0;

/// Expectation form of the EBSDE along uncontrolled paths, per starting
/// point; passes iff `|residual| <= 4 se + C_DISC dt` everywhere.
pub fn ebsde_residual(
    model: &ModelSpec,
    ham: &HamiltonianSpec,
    sol: &EbsdeSolution,
    x0_list: &[StateVec],
    horizon: f64,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<ResidualReport> {
    let mut points = Vec::with_capacity(x0_list.len());
    let mut failures = Vec::new();
    for (i, x) in x0_list.iter().enumerate() {
        let r = path_residual(sol, model, ham, x, horizon, n_paths, dt, seed.wrapping_add(i as u64))?;
        let allowed = 4.0 * r.stderr + C_DISC * dt;
        if r.residual.abs() > allowed {
            failures.push(format!(
                "residual at x={:?}, T={}: {:.6} exceeds {allowed:.6}",
                r.x, r.horizon, r.residual
            ));
        }
        points.push(r);
    }
    Ok(ResidualReport {
        points,
        c_disc: C_DISC,
        dt,
        passed: failures.is_empty(),
        failures,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CharacterizationReport {
    pub lambda: f64,
    pub psi_mean: f64,
    pub stderr: f64,
    pub gap: f64,
    pub allowed: f64,
    pub passed: bool,
}

/// `lambda` against the mean of `psi(X, zetabar(X))` over invariant samples.
pub fn lambda_characterization(
    model: &ModelSpec,
    ham: &HamiltonianSpec,
    sol: &EbsdeSolution,
    n_samples: usize,
    dt: f64,
    seed: u64,
) -> Result<CharacterizationReport> {
    let inv = estimate_invariant_default(model, dt, n_samples, seed)?;
    let mut vals = Vec::with_capacity(inv.samples.len());
    for x in &inv.samples {
        vals.push(psi(ham, x.as_slice(), &sol.zetabar.eval(x.as_slice()))?.psi);
    }
    let (psi_mean, stderr) = mean_stderr(vals.into_iter());
    let gap = (psi_mean - sol.lambda).abs();
    let allowed = 4.0 * stderr + 0.02 * sol.lambda.abs();
    Ok(CharacterizationReport {
        lambda: sol.lambda,
        psi_mean,
        stderr,
        gap,
        allowed,
        passed: gap <= allowed,
    })
}

/// One rerun of the solver for the uniqueness check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub seed: u64,
    pub init_center: Vec<f64>,
    pub alpha_schedule: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UniquenessReport {
    /// `(variant, lambda, lambda_stderr)`.
    pub lambdas: Vec<(Variant, f64, f64)>,
    pub spread: f64,
    pub allowed: f64,
    pub passed: bool,
}

/// Largest admissible spread of `lambda` across variants, relative to their mean.
pub const UNIQUENESS_TOL: f64 = 0.01;

pub fn lambda_uniqueness(
    model: &ModelSpec,
    ham: &HamiltonianSpec,
    cfg: &RunConfig,
    variants: &[Variant],
    test_points: &[StateVec],
) -> Result<UniquenessReport> {
    if variants.len() < 3 {
        return Err(Error::Config(format!(
            "uniqueness check needs at least 3 variants, got {}",
            variants.len()
        )));
    }
    let mut lambdas = Vec::with_capacity(variants.len());
    for v in variants {
        let mut c = cfg.clone();
        c.seed = v.seed;
        c.init.center = v.init_center.clone();
        c.alpha_schedule = v.alpha_schedule.clone();
        let sol = run_schedule(model, ham, &c, test_points)?;
        lambdas.push((v.clone(), sol.lambda, sol.lambda_stderr));
    }
    let mean = lambdas.iter().map(|l| l.1).sum::<f64>() / lambdas.len() as f64;
    let hi = lambdas.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
    let lo = lambdas.iter().map(|l| l.1).fold(f64::INFINITY, f64::min);
    let spread = hi - lo;
    let allowed = UNIQUENESS_TOL * mean.abs();
    Ok(UniquenessReport {
        lambdas,
        spread,
        allowed,
        passed: spread <= allowed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSpec;
    use crate::hamiltonian::{registry_hamiltonian, ControlSet, StateCost};
    use crate::model::ClosedForm;

    fn params() -> EvalParams {
        EvalParams {
            horizon: 20.0,
            n_paths: 400,
            dt: 0.02,
            seed: 5,
        }
    }

    #[test]
    fn constant_cost_is_exact() {
        let model = ModelSpec::ornstein_uhlenbeck(1.0).unwrap();
        let ham = registry_hamiltonian(1, 1, StateCost::Constant { value: 3.0 }, 0.0, &ControlSet::None).unwrap();
        let j = evaluate_j(&model, &ham, &Feedback::constant("zero", vec![0.0]), &StateVec::scalar(0.0), params()).unwrap();
        assert!((j.mean - 3.0).abs() < 1e-12);
        assert!(j.stderr < 1e-12);
    }

    #[test]
    fn zero_feedback_ou_cos() {
        let model = ModelSpec::ornstein_uhlenbeck(1.0).unwrap();
        let ham = registry_hamiltonian(1, 1, StateCost::Cos, 0.0, &ControlSet::None).unwrap();
        let j = evaluate_j(&model, &ham, &Feedback::constant("zero", vec![0.0]), &StateVec::scalar(0.0), params()).unwrap();
        let lam = (-0.25f64).exp();
        assert!((j.mean - lam).abs() < 3.0 * j.stderr + 0.01, "{j:?}");
    }

    #[test]
    fn short_horizon_is_rejected() {
        let model = ModelSpec::ornstein_uhlenbeck(1.0).unwrap();
        let ham = registry_hamiltonian(1, 1, StateCost::Cos, 0.0, &ControlSet::None).unwrap();
        let p = EvalParams { horizon: 5.0, ..params() };
        assert!(evaluate_j(&model, &ham, &Feedback::constant("zero", vec![0.0]), &StateVec::scalar(0.0), p).is_err());
    }

    #[test]
    fn ball_feedback_is_bang_bang() {
        let model = ModelSpec::ornstein_uhlenbeck(1.0).unwrap();
        let ham = registry_hamiltonian(1, 1, StateCost::Cos, 0.0, &ControlSet::Ball { delta: 0.5, points: 3 })
            .unwrap()
            .with_closed_form(ClosedForm::BallLinear { delta: 0.5 })
            .unwrap();
        let mut cfg = RunConfig::default_for(1);
        cfg.n_paths = 4000;
        cfg.basis = BasisSpec::polynomial(6, 3.0);
        let sol = run_schedule(&model, &ham, &cfg, &[]).unwrap();
        let fb = optimal_feedback(&sol, &ham);
        for x in [-1.0, -0.3, 0.4, 1.2] {
            let z = sol.zetabar.eval(&[x])[0];
            let u = (fb.rule)(&[x])[0];
            if z.abs() > 0.0 {
                assert_eq!(u, -0.5 * z.signum());
            }
        }
    }
}
