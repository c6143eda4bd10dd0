//! Forward-equation and control-problem data shared by every solver.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// A point of the discretized state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVec(Vec<f64>);

impl StateVec {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if let Some(i) = coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "state coordinate {i} is not finite ({})",
                coords[i]
            )));
        }
        Ok(Self(coords))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn scalar(x: f64) -> Self {
        Self(vec![x])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl From<StateVec> for Vec<f64> {
    fn from(s: StateVec) -> Self {
        s.0
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `F: R^n -> R^n`, writing into the output slice.
pub type DriftFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Named nonlinear drift.
#[derive(Clone)]
pub struct Nonlinearity {
    pub name: String,
    pub func: DriftFn,
}

impl fmt::Debug for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Nonlinearity({})", self.name)
    }
}

impl Nonlinearity {
    pub fn zero() -> Self {
        Self {
            name: "zero".into(),
            func: Arc::new(|_, out: &mut [f64]| out.fill(0.0)),
        }
    }

    /// Coordinatewise `F(x)_i = -c x_i^3`.
    pub fn cubic(coefficient: f64) -> Self {
        Self {
            name: format!("cubic({coefficient})"),
            func: Arc::new(move |x: &[f64], out: &mut [f64]| {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = -coefficient * v * v * v;
                }
            }),
        }
    }

    /// Coordinatewise `F(x)_i = sum_k a_k x_i^k`.
    pub fn polynomial(coefficients: Vec<f64>) -> Self {
        Self {
            name: format!("custom-polynomial({coefficients:?})"),
            func: Arc::new(move |x: &[f64], out: &mut [f64]| {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = coefficients.iter().rev().fold(0.0, |acc, a| acc * v + a);
                }
            }),
        }
    }

    pub fn custom(name: impl Into<String>, func: DriftFn) -> Self {
        Self {
            name: name.into(),
            func,
        }
    }

    /// Registry lookup used by configuration files.
    pub fn from_registry(name: &str, coefficients: &[f64]) -> Result<Self> {
        match name {
            "zero" => Ok(Self::zero()),
            "cubic" => Ok(Self::cubic(coefficients.first().copied().unwrap_or(1.0))),
            "custom-polynomial" => Ok(Self::polynomial(coefficients.to_vec())),
            other => Err(Error::Config(format!(
                "unknown nonlinearity '{other}' (expected zero, cubic, custom-polynomial)"
            ))),
        }
    }
}

/// The forward equation `dX = (AX + F(X)) dt + G dW`.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub dim: usize,
    pub noise_dim: usize,
    pub linear_drift: DMatrix<f64>,
    pub nonlinear_drift: Nonlinearity,
    pub noise_map: DMatrix<f64>,
    pub eta: f64,
    pub poly_growth_k: u32,
}

impl ModelSpec {
    pub fn new(
        linear_drift: DMatrix<f64>,
        nonlinear_drift: Nonlinearity,
        noise_map: DMatrix<f64>,
        eta: f64,
        poly_growth_k: u32,
    ) -> Result<Self> {
        let dim = linear_drift.nrows();
        if dim == 0 || linear_drift.ncols() != dim {
            return Err(Error::InvalidModel(format!(
                "linear drift must be square and nonempty, got {}x{}",
                linear_drift.nrows(),
                linear_drift.ncols()
            )));
        }
        if noise_map.nrows() != dim || noise_map.ncols() == 0 {
            return Err(Error::InvalidModel(format!(
                "noise map must be {dim}xm with m >= 1, got {}x{}",
                noise_map.nrows(),
                noise_map.ncols()
            )));
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::InvalidModel(format!("eta must be positive, got {eta}")));
        }
        if linear_drift.iter().chain(noise_map.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("non-finite matrix entry".into()));
        }
        Ok(Self {
            dim,
            noise_dim: noise_map.ncols(),
            linear_drift,
            nonlinear_drift,
            noise_map,
            eta,
            poly_growth_k,
        })
    }

    /// `dX = (-eta X + F(X)) dt + g dW` in one dimension.
    pub fn scalar(eta: f64, nonlinear: Nonlinearity, g: f64, poly_growth_k: u32) -> Result<Self> {
        Self::new(
            DMatrix::from_element(1, 1, -eta),
            nonlinear,
            DMatrix::from_element(1, 1, g),
            eta,
            poly_growth_k,
        )
    }

    /// The one-dimensional Ornstein-Uhlenbeck process `dX = -X dt + g dW`.
    pub fn ornstein_uhlenbeck(g: f64) -> Result<Self> {
        Self::scalar(1.0, Nonlinearity::zero(), g, 0)
    }

    pub fn eval_nonlinear(&self, x: &[f64], out: &mut [f64]) {
        (self.nonlinear_drift.func)(x, out)
    }

    /// `AX + F(X)`.
    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_nonlinear(x, &mut out);
        for i in 0..self.dim {
            for j in 0..self.dim {
                out[i] += self.linear_drift[(i, j)] * x[j];
            }
        }
        out
    }

    pub fn apply_noise(&self, w: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| (0..self.noise_dim).map(|j| self.noise_map[(i, j)] * w[j]).sum())
            .collect()
    }

    pub fn is_linear_diagonal(&self) -> bool {
        (0..self.dim).all(|i| (0..self.dim).all(|j| i == j || self.linear_drift[(i, j)] == 0.0))
    }

    /// Largest eigenvalue modulus of `A`, for stiffness diagnostics.
    pub fn spectral_radius(&self) -> f64 {
        self.linear_drift
            .complex_eigenvalues()
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max)
    }

    /// Operator norm of `G`.
    pub fn noise_norm(&self) -> f64 {
        self.noise_map.clone().svd(false, false).singular_values.max()
    }
}

/// Measured constants plus a pass flag.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub constants: BTreeMap<String, f64>,
    pub notes: Vec<String>,
    /// `(x, z, psi)` samples recorded by Hamiltonian validation.
    pub psi_samples: Vec<(Vec<f64>, Vec<f64>, f64)>,
}

impl ValidationReport {
    pub fn constant(&self, key: &str) -> Option<f64> {
        self.constants.get(key).copied()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "status: {}", if self.passed { "PASS" } else { "FAIL" })?;
        for (k, v) in &self.constants {
            writeln!(f, "  {k} = {v:.6e}")?;
        }
        for n in &self.notes {
            writeln!(f, "  note: {n}")?;
        }
        Ok(())
    }
}

/// Probe points: `0`, `radius * e_1`, then uniform draws from the ball.
pub(crate) fn probe_points(dim: usize, n_probe: usize, radius: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; dim]];
    let mut e1 = vec![0.0; dim];
    e1[0] = radius;
    pts.push(e1);
    let center = vec![0.0; dim];
    let mut rng = rng::stream(seed, Domain::Probes, 0);
    while pts.len() < n_probe.max(2) {
        pts.push(rng::uniform_ball(&mut rng, &center, radius));
    }
    pts
}

/// Index pairs over the probe set: all pairs when cheap, else cyclic neighbours.
pub(crate) fn probe_pairs(n: usize) -> Vec<(usize, usize)> {
    if n * (n - 1) / 2 <= 50_000 {
        (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect()
    } else {
        (0..n)
            .flat_map(|i| (1..=32).map(move |k| (i, (i + k) % n)))
            .collect()
    }
}

/// Checks dissipativity of `A + F + eta I` on sampled pairs and fits the
/// polynomial growth constant of `F`.
pub fn validate_model(model: &ModelSpec, n_probe: usize, radius: f64, seed: u64) -> Result<ValidationReport> {
    if n_probe < 2 {
        return Err(Error::Config(format!("n_probe must be >= 2, got {n_probe}")));
    }
    if !(radius > 0.0) {
        return Err(Error::Config(format!("probe radius must be positive, got {radius}")));
    }
    let pts = probe_points(model.dim, n_probe, radius, seed);
    let mut f_vals = Vec::with_capacity(pts.len());
    let mut growth: f64 = 0.0;
    for p in &pts {
        let mut out = vec![0.0; model.dim];
        model.eval_nonlinear(p, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "nonlinearity {} is not finite at {p:?}",
                model.nonlinear_drift.name
            )));
        }
        let bound = 1.0 + norm(p).powi(model.poly_growth_k as i32);
        growth = growth.max(norm(&out) / bound);
        f_vals.push(out);
    }

    let mut worst_slack = f64::NEG_INFINITY;
    let mut worst_margin = f64::NEG_INFINITY;
    for (i, j) in probe_pairs(pts.len()) {
        let dx: Vec<f64> = pts[i].iter().zip(&pts[j]).map(|(a, b)| a - b).collect();
        let df: Vec<f64> = f_vals[i].iter().zip(&f_vals[j]).map(|(a, b)| a - b).collect();
        let mut inner = dot(&dx, &df);
        for r in 0..model.dim {
            let adx: f64 = (0..model.dim).map(|c| model.linear_drift[(r, c)] * dx[c]).sum();
            inner += dx[r] * adx;
        }
        let sq = dot(&dx, &dx);
        let slack = inner + model.eta * sq;
        worst_slack = worst_slack.max(slack);
        worst_margin = worst_margin.max(slack - 1e-9 * (1.0 + sq));
    }

    let passed = worst_margin <= 0.0;
    let mut report = ValidationReport {
        passed,
        ..Default::default()
    };
    report.constants.insert("worst_slack".into(), worst_slack);
    report.constants.insert("growth_constant".into(), growth);
    report.constants.insert("eta".into(), model.eta);
    report.constants.insert("n_probe".into(), pts.len() as f64);
    if !passed {
        report.notes.push(format!(
            "dissipativity violated: max <dx, A dx + dF> + eta|dx|^2 = {worst_slack:.6e}"
        ));
    }
    Ok(report)
}

/// Cost `L(x, u)`.
pub type CostFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
/// Control-to-noise map `R(u)`.
pub type ControlMapFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Analytic Hamiltonians that bypass grid enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ClosedForm {
    /// Enumerate the control grid.
    Grid,
    /// `U` is the `delta`-ball, `R` the identity, `L` independent of `u`.
    BallLinear { delta: f64 },
}

/// Control set, cost and control map of the ergodic control problem.
#[derive(Clone)]
pub struct HamiltonianSpec {
    pub label: String,
    pub state_dim: usize,
    pub control_grid: Vec<Vec<f64>>,
    pub cost: CostFn,
    pub control_map: ControlMapFn,
    pub noise_dim: usize,
    pub bound_c: f64,
    pub lip_lx: f64,
    pub closed_form: ClosedForm,
    /// `R` evaluated on the grid.
    pub(crate) r_grid: Vec<Vec<f64>>,
}

impl fmt::Debug for HamiltonianSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HamiltonianSpec")
            .field("label", &self.label)
            .field("state_dim", &self.state_dim)
            .field("n_controls", &self.control_grid.len())
            .field("noise_dim", &self.noise_dim)
            .field("bound_c", &self.bound_c)
            .field("lip_lx", &self.lip_lx)
            .field("closed_form", &self.closed_form)
            .finish()
    }
}

impl HamiltonianSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        label: impl Into<String>,
        state_dim: usize,
        control_grid: Vec<Vec<f64>>,
        noise_dim: usize,
        cost: CostFn,
        control_map: ControlMapFn,
        bound_c: f64,
        lip_lx: f64,
    ) -> Result<Self> {
        if control_grid.is_empty() {
            return Err(Error::Config("control grid is empty".into()));
        }
        let mut r_grid = Vec::with_capacity(control_grid.len());
        for u in &control_grid {
            let r = control_map(u);
            if r.len() != noise_dim {
                return Err(Error::Config(format!(
                    "control map returned length {} for control {u:?}, expected {noise_dim}",
                    r.len()
                )));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Evaluation(format!("R({u:?}) is not finite")));
            }
            r_grid.push(r);
        }
        Ok(Self {
            label: label.into(),
            state_dim,
            control_grid,
            cost,
            control_map,
            noise_dim,
            bound_c,
            lip_lx,
            closed_form: ClosedForm::Grid,
            r_grid,
        })
    }

    /// Select the ball closed form; checks that `L` ignores `u` on probes and
    /// that `R` is the identity on the grid.
    pub fn with_closed_form(mut self, closed_form: ClosedForm) -> Result<Self> {
        let state_dim = self.state_dim;
        if let ClosedForm::BallLinear { delta } = closed_form {
            if !(delta > 0.0) {
                return Err(Error::Config(format!("ball radius must be positive, got {delta}")));
            }
            for x in probe_points(state_dim, 16, 3.0, 0x5eed) {
                let l0 = (self.cost)(&x, &self.control_grid[0]);
                for u in &self.control_grid {
                    if ((self.cost)(&x, u) - l0).abs() > 1e-12 * (1.0 + l0.abs()) {
                        return Err(Error::ContractViolation(format!(
                            "ball closed form needs u-independent L; L(x,{u:?}) differs at x={x:?}"
                        )));
                    }
                }
            }
            for (u, r) in self.control_grid.iter().zip(&self.r_grid) {
                if u.len() != r.len() || u.iter().zip(r).any(|(a, b)| (a - b).abs() > 1e-12) {
                    return Err(Error::ContractViolation(format!(
                        "ball closed form needs R = identity, got R({u:?}) = {r:?}"
                    )));
                }
            }
        }
        self.closed_form = closed_form;
        Ok(self)
    }

    pub fn r_of_grid(&self, index: usize) -> &[f64] {
        &self.r_grid[index]
    }

    /// Whether `psi` actually depends on `z`.
    pub fn depends_on_z(&self) -> bool {
        match self.closed_form {
            ClosedForm::BallLinear { .. } => true,
            ClosedForm::Grid => self.r_grid.iter().any(|r| r.iter().any(|v| *v != 0.0)),
        }
    }

    /// A copy with `L` replaced by `L + shift`.
    pub fn shifted(&self, shift: f64) -> Self {
        let cost = self.cost.clone();
        let mut out = self.clone();
        out.cost = Arc::new(move |x: &[f64], u: &[f64]| cost(x, u) + shift);
        out.bound_c = self.bound_c + shift.abs();
        out.label = format!("{} + {shift}", self.label);
        out
    }
}

/// Initial-point law for the regression sample: half invariant samples,
/// half uniform in a ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSampling {
    pub center: Vec<f64>,
    pub radius: f64,
    #[serde(default = "default_invariant_fraction")]
    pub invariant_fraction: f64,
    #[serde(default)]
    pub radial_law: RadialLaw,
}

/// How the radius of a ball sample is distributed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RadialLaw {
    /// Uniform in volume.
    #[default]
    Uniform,
    /// Radius uniform on `[0, R]`, direction uniform on the sphere.
    UniformRadius,
}

fn default_invariant_fraction() -> f64 {
    0.5
}

/// Numerical run parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Backward time step of the BSDE scheme.
    pub dt: f64,
    /// Forward sub-steps per backward step.
    pub substeps: usize,
    /// Step count for forward evaluation horizons.
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub basis: BasisSpec,
    pub alpha_schedule: Vec<f64>,
    pub tail_eps: f64,
    pub init: InitSampling,
    pub blowup_guard: f64,
    pub tolerances: BTreeMap<String, f64>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.substeps == 0 || self.n_steps == 0 || self.n_paths == 0 {
            return Err(Error::Config("substeps, n_steps and n_paths must be positive".into()));
        }
        if self.alpha_schedule.is_empty() {
            return Err(Error::Config("alpha schedule is empty".into()));
        }
        if self.alpha_schedule.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::Config(format!(
                "alpha schedule entries must be positive: {:?}",
                self.alpha_schedule
            )));
        }
        if self.alpha_schedule.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(format!(
                "alpha schedule must be strictly decreasing: {:?}",
                self.alpha_schedule
            )));
        }
        if !(self.tail_eps > 0.0 && self.tail_eps < 1.0) {
            return Err(Error::Config(format!("tail_eps must lie in (0,1), got {}", self.tail_eps)));
        }
        if !(self.init.radius > 0.0) {
            return Err(Error::Config("initial ball radius must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.init.invariant_fraction) {
            return Err(Error::Config("invariant_fraction must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// Forward sub-step.
    pub fn sim_dt(&self) -> f64 {
        self.dt / self.substeps as f64
    }

    /// `h * rho(A)` for the forward sub-step.
    pub fn stiffness(&self, model: &ModelSpec) -> f64 {
        self.sim_dt() * model.spectral_radius()
    }

    pub fn tolerance(&self, key: &str, default: f64) -> f64 {
        self.tolerances.get(key).copied().unwrap_or(default)
    }

    /// Desk-scale defaults for a model of the given dimension.
    pub fn default_for(dim: usize) -> Self {
        Self {
            dt: 0.05,
            substeps: 5,
            n_steps: 2000,
            n_paths: 20_000,
            seed: 1,
            basis: BasisSpec::polynomial(8, 3.0),
            alpha_schedule: vec![0.2, 0.1, 0.05, 0.025],
            tail_eps: 1e-4,
            init: InitSampling {
                center: vec![0.0; dim],
                radius: 3.0,
                invariant_fraction: 0.5,
                radial_law: RadialLaw::Uniform,
            },
            blowup_guard: 1e6,
            tolerances: BTreeMap::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(f: Nonlinearity) -> ModelSpec {
        ModelSpec::scalar(1.0, f, 1.0, 3).unwrap()
    }

    #[test]
    fn linear_model_has_zero_slack() {
        let r = validate_model(&model(Nonlinearity::zero()), 50, 2.0, 3).unwrap();
        assert!(r.passed);
        assert_eq!(r.constant("worst_slack").unwrap(), 0.0);
    }

    #[test]
    fn monotone_cubic_passes() {
        let r = validate_model(&model(Nonlinearity::cubic(1.0)), 50, 2.0, 3).unwrap();
        assert!(r.passed);
        assert!(r.constant("worst_slack").unwrap() <= 0.0);
    }

    #[test]
    fn anti_dissipative_fails_with_slack_two_dx_squared() {
        let m = model(Nonlinearity::polynomial(vec![0.0, 2.0]));
        let r = validate_model(&m, 50, 2.0, 3).unwrap();
        assert!(!r.passed);
        // Worst pair is the widest one; slack = 2 |dx|^2 <= 2 (2 radius)^2.
        let s = r.constant("worst_slack").unwrap();
        assert!(s > 0.0 && s <= 2.0 * 16.0 + 1e-9);
    }

    #[test]
    fn radius_scaling_keeps_verdict() {
        for f in [Nonlinearity::zero(), Nonlinearity::cubic(1.0), Nonlinearity::polynomial(vec![0.0, 2.0])] {
            let m = model(f);
            let v: Vec<bool> = [0.1, 1.0, 10.0]
                .iter()
                .map(|r| validate_model(&m, 30, *r, 9).unwrap().passed)
                .collect();
            assert!(v.iter().all(|p| *p == v[0]), "{v:?}");
        }
    }

    #[test]
    fn non_finite_nonlinearity_is_rejected() {
        let f = Nonlinearity::custom(
            "log",
            Arc::new(|x: &[f64], out: &mut [f64]| out[0] = x[0].ln()),
        );
        let err = validate_model(&model(f), 10, 1.0, 1).unwrap_err();
        assert!(matches!(err, Error::InvalidModel(msg) if msg.contains("not finite")));
    }

    #[test]
    fn validation_is_deterministic() {
        let m = model(Nonlinearity::cubic(1.0));
        let a = validate_model(&m, 40, 2.0, 11).unwrap();
        let b = validate_model(&m, 40, 2.0, 11).unwrap();
        assert_eq!(a.constants, b.constants);
    }

    #[test]
    fn schedule_must_decrease() {
        let mut cfg = RunConfig::default_for(1);
        assert!(cfg.validate().is_ok());
        cfg.alpha_schedule = vec![0.1, 0.2];
        assert!(cfg.validate().is_err());
        cfg.alpha_schedule = vec![0.1, -0.05];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn growth_constant_for_cubic() {
        let r = validate_model(&model(Nonlinearity::cubic(1.0)), 100, 2.0, 5).unwrap();
        let c = r.constant("growth_constant").unwrap();
        assert!(c > 0.0 && c <= 1.0);
    }
}
