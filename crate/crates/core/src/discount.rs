//! Discounted infinite-horizon BSDE by truncated backward regression.
//!
//! The regression design is fixed: `n` starting points `X_i`, one backward
//! step of length `dt` each (`X'_i`, `dW_i`), and the feature matrices
//! `Phi = phi(X)`, `Phi' = phi(X')`. Because the forward dynamics are time
//! homogeneous, every backward step regresses on the same design, so the
//! step operators below are assembled once and reused for every `alpha`.
//!
//! With `Y_{k+1} = Phi' c_{k+1}` the scheme reads
//!
//! ```text
//! zeta_k = Proj(Y_{k+1} dW / dt)          = [B_1 c, ..., B_m c]
//! Y_k    = (Proj(Y_{k+1}) + dt Proj(psi(X, zeta_k))) / (1 + alpha dt)
//! ```
//!
//! where `P = Proj(Phi')` and `B_j = Proj(diag(dW_j / dt) (Phi' - Phi P))`.
//! Subtracting the fitted `Phi P c` inside `B_j` does not change the
//! conditional expectation since `E[dW | X] = 0`, but removes most of the
//! variance of the `Z` regression.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{Basis, Evaluated, FittedFunction, Hull, LeastSquares};
use crate::error::{Error, Result};
use crate::forward::{estimate_invariant, transition_sample};
use crate::hamiltonian::{lipschitz_constants, PsiBatch};
use crate::model::{dist, HamiltonianSpec, ModelSpec, RadialLaw, RunConfig, StateVec};
use crate::rng::{self, Domain};

/// One recorded backward step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Backward step index, `N - 1` down to `0`.
    pub step: usize,
    /// Root mean square of `Y_{k+1}(X') - Proj(Y_{k+1})(X)` over the sample.
    pub residual: f64,
    pub condition_number: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscountDiagnostics {
    pub steps: Vec<StepRecord>,
    /// `(M / alpha) tail_eps`, the bound on the truncation error.
    pub tail_bound: f64,
    pub m_const: f64,
    pub k_x: f64,
    pub k_z: f64,
    pub eta: f64,
    pub n_paths: usize,
    pub n_features: usize,
    pub n_steps: usize,
    pub dt: f64,
    /// Spectral radius of the one-step regression operator `P`.
    pub step_operator_radius: f64,
    /// `sup |v^alpha|` over the training sample.
    pub sup_abs_training: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscountSolution {
    pub alpha: f64,
    pub value: FittedFunction,
    pub zeta: FittedFunction,
    pub horizon_t: f64,
    pub diagnostics: DiscountDiagnostics,
    /// Ball the uniform part of the training sample was drawn from.
    pub sample_center: Vec<f64>,
    pub sample_radius: f64,
}

impl DiscountSolution {
    pub fn value_at(&self, x: &StateVec) -> f64 {
        self.value.eval_scalar(x.as_slice())
    }

    pub fn zeta_at(&self, x: &StateVec) -> Vec<f64> {
        self.zeta.eval(x.as_slice())
    }

    /// Value with a flag set when `x` lies outside the training hull.
    pub fn value_at_flagged(&self, x: &StateVec) -> Evaluated<f64> {
        let e = self.value.eval_flagged(x.as_slice());
        Evaluated {
            value: e.value[0],
            extrapolated: e.extrapolated,
        }
    }

    pub fn zeta_at_flagged(&self, x: &StateVec) -> Evaluated<Vec<f64>> {
        self.zeta.eval_flagged(x.as_slice())
    }

    /// Diagnostics as CSV rows `(step, residual, condition_number)`.
    pub fn diagnostics_csv(&self) -> String {
        crate::export::csv_string(
            "solve",
            &["step", "residual", "condition_number"],
            self.diagnostics.steps.iter().map(|s| {
                vec![
                    s.step.to_string(),
                    crate::export::fmt(s.residual),
                    crate::export::fmt(s.condition_number),
                ]
            }),
        )
    }
}

pub fn value_at(sol: &DiscountSolution, x: &StateVec) -> f64 {
    sol.value_at(x)
}

pub fn zeta_at(sol: &DiscountSolution, x: &StateVec) -> Vec<f64> {
    sol.zeta_at(x)
}

/// Regression design shared by all discount rates.
pub struct DiscountScheme {
    ham: HamiltonianSpec,
    basis: Basis,
    ls: LeastSquares,
    xs: Vec<Vec<f64>>,
    phi: DMatrix<f64>,
    phi_next: DMatrix<f64>,
    p_mat: DMatrix<f64>,
    b_mats: Vec<DMatrix<f64>>,
    psi: PsiBatch,
    /// `Proj(psi(X, .))` when `psi` ignores `z`.
    psi_proj_fixed: Option<DVector<f64>>,
    hull: Hull,
    dt: f64,
    tail_eps: f64,
    eta: f64,
    m_const: f64,
    k_x: f64,
    k_z: f64,
    p_radius: f64,
    sample_center: Vec<f64>,
    sample_radius: f64,
}

impl DiscountScheme {
    /// Draws the training sample and assembles the step operators.
    /// `query` points are always part of the sample.
    pub fn build(model: &ModelSpec, ham: &HamiltonianSpec, cfg: &RunConfig, query: &[StateVec]) -> Result<Self> {
        cfg.validate()?;
        if ham.state_dim != model.dim || ham.noise_dim != model.noise_dim {
            return Err(Error::Config(format!(
                "Hamiltonian dimensions ({}, {}) do not match the model ({}, {})",
                ham.state_dim, ham.noise_dim, model.dim, model.noise_dim
            )));
        }
        if cfg.init.center.len() != model.dim {
            return Err(Error::Config(format!(
                "initial ball center has length {}, expected {}",
                cfg.init.center.len(),
                model.dim
            )));
        }
        if let Some(q) = query.iter().find(|q| q.len() != model.dim) {
            return Err(Error::Config(format!("query point {q:?} has the wrong dimension")));
        }
        let basis = Basis::new(cfg.basis.clone(), model.dim)?;
        let n = cfg.n_paths;
        if basis.len() * 10 > n {
            return Err(Error::Basis(format!(
                "{} features need at least {} paths, got {n}",
                basis.len(),
                basis.len() * 10
            )));
        }

        let xs = initial_points(model, cfg, query)?;
        let h = cfg.sim_dt();
        let trans = transition_sample(model, &xs, h, cfg.substeps, cfg.seed, cfg.blowup_guard)?;
        let dt = cfg.dt;

        let phi = basis.design(&xs);
        let phi_next = basis.design(&trans.next);
        let ls = LeastSquares::new(&phi, cfg.basis.ridge)?;
        let (first, second, along) = ito_terms(&basis, model, &xs, &trans.dw, dt);
        let target = &phi_next - &first - &second;
        let p_mat = ls.fit_matrix(&target);
        let resid = target - &phi * &p_mat;
        let b_mats: Vec<DMatrix<f64>> = (0..model.noise_dim)
            .map(|j| {
                let mut w = resid.clone();
                for (i, mut row) in w.row_iter_mut().enumerate() {
                    row *= trans.dw[i][j] / dt;
                }
                ls.fit_matrix(&(w + &along[j]))
            })
            .collect();

        let psi = PsiBatch::new(ham, &xs)?;
        let psi_proj_fixed = if ham.depends_on_z() {
            None
        } else {
            let mut vals = vec![0.0; n];
            psi.eval(&DMatrix::zeros(n, model.noise_dim), &mut vals);
            Some(ls.fit(&vals))
        };

        let radius = cfg.init.radius.max(cfg.init.center.iter().map(|v| v.abs()).fold(0.0, f64::max));
        let (m_const, k_x, k_z) = lipschitz_constants(ham, 200, radius, cfg.seed)?;
        let p_radius = p_mat
            .clone()
            .complex_eigenvalues()
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max);

        Ok(Self {
            ham: ham.clone(),
            basis,
            ls,
            hull: Hull::of(&xs),
            xs,
            phi,
            phi_next,
            p_mat,
            b_mats,
            psi,
            psi_proj_fixed,
            dt,
            tail_eps: cfg.tail_eps,
            eta: model.eta,
            m_const,
            k_x,
            k_z,
            p_radius,
            sample_center: cfg.init.center.clone(),
            sample_radius: cfg.init.radius,
        })
    }

    pub fn training_points(&self) -> &[Vec<f64>] {
        &self.xs
    }

    pub fn hamiltonian(&self) -> &HamiltonianSpec {
        &self.ham
    }

    /// `(M, K_x, K_z)` measured for the Hamiltonian.
    pub fn constants(&self) -> (f64, f64, f64) {
        (self.m_const, self.k_x, self.k_z)
    }

    pub fn condition_number(&self) -> f64 {
        self.ls.condition_number()
    }

    fn zeta_coefficients(&self, c: &DVector<f64>) -> DMatrix<f64> {
        let p = c.len();
        let mut zc = DMatrix::zeros(p, self.b_mats.len());
        for (j, b) in self.b_mats.iter().enumerate() {
            zc.set_column(j, &(b * c));
        }
        zc
    }

    /// Runs the backward recursion for one discount rate.
    pub fn solve(&self, alpha: f64) -> Result<DiscountSolution> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        let dt = self.dt;
        let horizon_t = (1.0 / self.tail_eps).ln() / alpha;
        let n_steps = (horizon_t / dt).ceil() as usize;
        let p = self.basis.len();
        let n = self.xs.len();
        let shrink = 1.0 / (1.0 + alpha * dt);
        let blowup = 1e6 * (1.0 + self.m_const / alpha);
        let stride = (n_steps / 200).max(1);

        let mut c = DVector::<f64>::zeros(p);
        let mut zc = DMatrix::<f64>::zeros(p, self.b_mats.len());
        let mut psi_vals = vec![0.0; n];
        let mut records = Vec::new();
        for k in (0..n_steps).rev() {
            let proj_psi = match &self.psi_proj_fixed {
                Some(fixed) => fixed.clone(),
                None => {
                    zc = self.zeta_coefficients(&c);
                    let z = &self.phi * &zc;
                    self.psi.eval(&z, &mut psi_vals);
                    self.ls.fit(&psi_vals)
                }
            };
            if k % stride == 0 || k + 1 == n_steps {
                let resid = &self.phi_next * &c - &self.phi * (&self.p_mat * &c);
                records.push(StepRecord {
                    step: k,
                    residual: resid.norm() / (n as f64).sqrt(),
                    condition_number: self.ls.condition_number(),
                });
            }
            let next = (&self.p_mat * &c + proj_psi * dt) * shrink;
            if k == 0 && self.psi_proj_fixed.is_some() {
                zc = self.zeta_coefficients(&c);
            }
            c = next;
            let sup = c.amax();
            if !sup.is_finite() || sup > blowup {
                return Err(Error::Numerical(format!(
                    "backward recursion diverged at step {k} (coefficient size {sup:e}); \
                     step operator spectral radius {:.6}",
                    self.p_radius
                )));
            }
        }

        let value = FittedFunction::new(&self.basis, &DMatrix::from_column_slice(p, 1, c.as_slice()), self.hull.clone());
        let zeta = FittedFunction::new(&self.basis, &zc, self.hull.clone());
        let fitted = &self.phi * &c;
        let sup_abs_training = fitted.amax();
        Ok(DiscountSolution {
            alpha,
            value,
            zeta,
            horizon_t,
            diagnostics: DiscountDiagnostics {
                steps: records,
                tail_bound: self.m_const / alpha * self.tail_eps,
                m_const: self.m_const,
                k_x: self.k_x,
                k_z: self.k_z,
                eta: self.eta,
                n_paths: n,
                n_features: p,
                n_steps,
                dt,
                step_operator_radius: self.p_radius,
                sup_abs_training,
            },
            sample_center: self.sample_center.clone(),
            sample_radius: self.sample_radius,
        })
    }
}

/// Itô expansion terms of `phi(X') - phi(X)` with zero conditional mean given
/// `X`: `grad phi . G dW` and `(phi''[G dW, G dW] - dt sum_k phi''[g_k, g_k]) / 2`,
/// by central differences, together with the directional derivatives
/// `grad phi . g_k` along each noise column.
fn ito_terms(
    basis: &Basis,
    model: &ModelSpec,
    xs: &[Vec<f64>],
    dws: &[Vec<f64>],
    dt: f64,
) -> (DMatrix<f64>, DMatrix<f64>, Vec<DMatrix<f64>>) {
    use rayon::prelude::*;
    let p = basis.len();
    let d = model.dim;
    let ell = 1e-3 * basis.length_scale();
    let g_cols: Vec<Vec<f64>> = (0..model.noise_dim)
        .map(|k| (0..d).map(|i| model.noise_map[(i, k)]).collect())
        .collect();
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> = xs
        .par_iter()
        .zip(dws)
        .map(|(x, dw)| {
            let mut f0 = vec![0.0; p];
            let mut fp = vec![0.0; p];
            let mut fm = vec![0.0; p];
            basis.eval(x, &mut f0);
            let shifted = |dir: &[f64], eps: f64, fp: &mut [f64], fm: &mut [f64]| {
                let xp: Vec<f64> = x.iter().zip(dir).map(|(a, v)| a + eps * v).collect();
                let xm: Vec<f64> = x.iter().zip(dir).map(|(a, v)| a - eps * v).collect();
                basis.eval(&xp, fp);
                basis.eval(&xm, fm);
            };
            let gdw = model.apply_noise(dw);
            let nv = crate::model::norm(&gdw);
            let mut first = vec![0.0; p];
            let mut second = vec![0.0; p];
            if nv > 0.0 {
                let eps = ell / nv;
                shifted(&gdw, eps, &mut fp, &mut fm);
                for j in 0..p {
                    first[j] = (fp[j] - fm[j]) / (2.0 * eps);
                    second[j] = 0.5 * (fp[j] - 2.0 * f0[j] + fm[j]) / (eps * eps);
                }
            }
            let mut along = vec![vec![0.0; p]; g_cols.len()];
            for (gk, dk) in g_cols.iter().zip(along.iter_mut()) {
                let ng = crate::model::norm(gk);
                if ng == 0.0 {
                    continue;
                }
                let eps = ell / ng;
                shifted(gk, eps, &mut fp, &mut fm);
                for j in 0..p {
                    second[j] -= 0.5 * dt * (fp[j] - 2.0 * f0[j] + fm[j]) / (eps * eps);
                    dk[j] = (fp[j] - fm[j]) / (2.0 * eps);
                }
            }
            (first, second, along)
        })
        .collect();
    let n = xs.len();
    let first = DMatrix::from_fn(n, p, |i, j| rows[i].0[j]);
    let second = DMatrix::from_fn(n, p, |i, j| rows[i].1[j]);
    let along = (0..g_cols.len())
        .map(|k| DMatrix::from_fn(n, p, |i, j| rows[i].2[k][j]))
        .collect();
    (first, second, along)
}

/// `0`, the query points, invariant samples, then uniform ball draws.
fn initial_points(model: &ModelSpec, cfg: &RunConfig, query: &[StateVec]) -> Result<Vec<Vec<f64>>> {
    let n = cfg.n_paths;
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(n);
    xs.push(vec![0.0; model.dim]);
    xs.extend(query.iter().map(|q| q.as_slice().to_vec()));
    xs.truncate(n);
    let remaining = n - xs.len();
    let n_inv = ((remaining as f64) * cfg.init.invariant_fraction).round() as usize;
    if n_inv > 0 {
        let h = cfg.sim_dt();
        let burn = (10.0 / model.eta / h).ceil() as usize;
        let thin = ((0.25 / model.eta / h).round() as usize).max(1);
        let inv = estimate_invariant(model, h, burn, n_inv, thin, cfg.seed)?;
        xs.extend(inv.samples.into_iter().map(StateVec::into_inner));
    }
    let mut rng = rng::stream(cfg.seed, Domain::InitialPoints, 0);
    while xs.len() < n {
        xs.push(match cfg.init.radial_law {
            RadialLaw::Uniform => rng::uniform_ball(&mut rng, &cfg.init.center, cfg.init.radius),
            RadialLaw::UniformRadius => rng::uniform_radius_ball(&mut rng, &cfg.init.center, cfg.init.radius),
        });
    }
    Ok(xs)
}

/// Builds the design and solves for a single `alpha`.
pub fn solve_discounted(model: &ModelSpec, ham: &HamiltonianSpec, alpha: f64, cfg: &RunConfig) -> Result<DiscountSolution> {
    DiscountScheme::build(model, ham, cfg, &[])?.solve(alpha)
}

/// Measured ratios against the a-priori bounds `M / alpha` and `K_x / eta`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscountBoundsReport {
    pub alpha: f64,
    pub sup_value: f64,
    /// `sup |v^alpha| / (M / alpha)`.
    pub bound_ratio: f64,
    pub lipschitz: f64,
    /// Empirical Lipschitz constant over `K_x / eta`.
    pub lipschitz_ratio: f64,
    pub bound_ok: bool,
    pub lipschitz_ok: bool,
    pub n_points: usize,
}

pub const TOL_BOUND: f64 = 0.05;
pub const TOL_LIP: f64 = 0.15;

/// Re-checks the two a-priori bounds on fresh points drawn uniformly from the
/// training ball.
pub fn check_discount_bounds(sol: &DiscountSolution, n_points: usize, seed: u64) -> DiscountBoundsReport {
    let mut rng = rng::stream(seed, Domain::TestPoints, 0);
    let mut pts = vec![sol.sample_center.clone()];
    while pts.len() < n_points.max(2) {
        pts.push(rng::uniform_ball(&mut rng, &sol.sample_center, sol.sample_radius));
    }
    let vals: Vec<f64> = pts.iter().map(|x| sol.value.eval_scalar(x)).collect();
    let sup_value = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut lip: f64 = 0.0;
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            let d = dist(&pts[i], &pts[j]);
            if d > 1e-12 {
                lip = lip.max((vals[i] - vals[j]).abs() / d);
            }
        }
    }
    let d = &sol.diagnostics;
    let bound = d.m_const / sol.alpha;
    let bound_ratio = if bound > 0.0 { sup_value / bound } else if sup_value == 0.0 { 0.0 } else { f64::INFINITY };
    let lip_bound = d.k_x / d.eta;
    let lipschitz_ratio = if lip_bound > 0.0 { lip / lip_bound } else if lip < 1e-9 { 0.0 } else { f64::INFINITY };
    DiscountBoundsReport {
        alpha: sol.alpha,
        sup_value,
        bound_ratio,
        lipschitz: lip,
        lipschitz_ratio,
        bound_ok: bound_ratio <= 1.0 + TOL_BOUND,
        lipschitz_ok: lipschitz_ratio <= 1.0 + TOL_LIP,
        n_points: pts.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSpec;
    use crate::hamiltonian::{registry_hamiltonian, ControlSet, StateCost};

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default_for(1);
        cfg.n_paths = 4000;
        cfg.basis = BasisSpec::polynomial(6, 3.0);
        cfg
    }

    #[test]
    fn constant_driver_gives_c_over_alpha() {
        let model = ModelSpec::ornstein_uhlenbeck(1.0).unwrap();
        let ham = registry_hamiltonian(1, 1, StateCost::Constant { value: 3.0 }, 0.0, &ControlSet::None).unwrap();
        let mut cfg = small_cfg();
        cfg.tail_eps = 1e-12;
        let sol = solve_discounted(&model, &ham, 0.1, &cfg).unwrap();
        for x in [-2.0, 0.0, 0.7, 2.5] {
            let v = sol.value_at(&StateVec::scalar(x));
            assert!((v - 30.0).abs() < 1e-8, "v({x}) = {v}");
            assert!(sol.zeta_at(&StateVec::scalar(x))[0].abs() < 1e-8);
        }
        let r = check_discount_bounds(&sol, 50, 1);
        assert!((r.bound_ratio - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ou_cos_matches_gaussian_value() {
        // alpha v^alpha(0) = alpha int e^{-alpha t} exp(-(1 - e^{-2t})/4) dt
        let alpha = 0.2f64;
        let mut exact = 0.0f64;
        let h = 1e-4;
        let mut t: f64 = h / 2.0;
        while t < 200.0 {
            exact += alpha * (-alpha * t).exp() * (-(1.0 - (-2.0 * t).exp()) / 4.0).exp() * h;
            t += h;
        }
        let model = ModelSpec::ornstein_uhlenbeck(1.0).unwrap();
        let ham = registry_hamiltonian(1, 1, StateCost::Cos, 0.0, &ControlSet::None).unwrap();
        let cfg = small_cfg();
        let sol = solve_discounted(&model, &ham, alpha, &cfg).unwrap();
        let got = alpha * sol.value_at(&StateVec::scalar(0.0));
        assert!((got - exact).abs() < 0.02 * exact, "{got} vs {exact}");
        let r = check_discount_bounds(&sol, 60, 2);
        assert!(r.bound_ok && r.lipschitz_ok, "{r:?}");
        assert!(sol.diagnostics.step_operator_radius <= 1.0 + 1e-6);
    }

    #[test]
    fn deterministic_and_alpha_reuses_design() {
        let model = ModelSpec::ornstein_uhlenbeck(1.0).unwrap();
        let ham = registry_hamiltonian(1, 1, StateCost::Cos, 0.0, &ControlSet::Ball { delta: 0.5, points: 3 }).unwrap();
        let cfg = small_cfg();
        let scheme = DiscountScheme::build(&model, &ham, &cfg, &[StateVec::scalar(1.5)]).unwrap();
        assert_eq!(scheme.training_points()[1], vec![1.5]);
        let a = scheme.solve(0.2).unwrap();
        let b = solve_discounted(&model, &ham, 0.2, &cfg).unwrap();
        let x = StateVec::scalar(0.3);
        assert!((a.value_at(&x) - b.value_at(&x)).abs() < 0.05);
        let c = scheme.solve(0.2).unwrap();
        assert_eq!(a.value_at(&x), c.value_at(&x));
    }

    #[test]
    fn rejects_bad_alpha_and_oversized_basis() {
        let model = ModelSpec::ornstein_uhlenbeck(1.0).unwrap();
        let ham = registry_hamiltonian(1, 1, StateCost::Cos, 0.0, &ControlSet::None).unwrap();
        let mut cfg = small_cfg();
        cfg.n_paths = 40;
        assert!(matches!(solve_discounted(&model, &ham, 0.1, &cfg), Err(Error::Basis(_))));
        let cfg = small_cfg();
        let scheme = DiscountScheme::build(&model, &ham, &cfg, &[]).unwrap();
        assert!(scheme.solve(0.0).is_err());
    }
}
