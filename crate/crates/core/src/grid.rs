//! One-dimensional finite-difference HJB solver used as an independent oracle.
//!
//! `alpha v = (g^2/2) v'' + b v' + psi(x, v' g)` is discretized with upwind
//! first differences, chosen per control from the sign of the controlled
//! drift `b + g R(u)`, and solved by policy iteration. Every linear solve is a
//! tridiagonal M-matrix system. At both ends the ghost node is extrapolated
//! linearly (`v'' = 0`), which requires the controlled drift to point inward
//! there.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HamiltonianSpec, ModelSpec};
use crate::stats::linear_fit;

/// Uniform grid with a node at exactly `0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub x_min: f64,
    pub x_max: f64,
    pub n_nodes: usize,
    pub h: f64,
    /// Index of the node at the origin.
    pub zero_index: usize,
}

impl Grid1D {
    /// Spacing `(x_max - x_min) / (n_nodes - 1)`, then shifted so that a node
    /// sits at the origin.
    pub fn new(x_min: f64, x_max: f64, n_nodes: usize) -> Result<Self> {
        if !(x_min < 0.0 && 0.0 < x_max) {
            return Err(Error::Config(format!("grid must straddle 0, got [{x_min}, {x_max}]")));
        }
        if n_nodes < 101 {
            return Err(Error::Config(format!("grid needs at least 101 nodes, got {n_nodes}")));
        }
        let h = (x_max - x_min) / (n_nodes - 1) as f64;
        let zero_index = (-x_min / h).round() as usize;
        let x_min = -(zero_index as f64) * h;
        Ok(Self {
            x_min,
            x_max: x_min + (n_nodes - 1) as f64 * h,
            n_nodes,
            h,
            zero_index,
        })
    }

    /// Symmetric grid `[-half_width, half_width]`.
    pub fn symmetric(half_width: f64, n_nodes: usize) -> Result<Self> {
        Self::new(-half_width, half_width, n_nodes)
    }

    pub fn node(&self, i: usize) -> f64 {
        (i as f64 - self.zero_index as f64) * self.h
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_nodes).map(|i| self.node(i)).collect()
    }

    /// Same interval with twice the resolution.
    pub fn refined(&self) -> Result<Self> {
        Self::new(self.x_min, self.x_max, 2 * self.n_nodes - 1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSolution {
    pub x: Vec<f64>,
    pub values: Vec<f64>,
    /// Upwind derivative along the optimal policy's drift.
    pub derivative: Vec<f64>,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    /// Control chosen at each node.
    pub policy: Vec<Vec<f64>>,
    pub policy_index: Vec<usize>,
    /// Controlled drift `b + g R(u)` at each node.
    pub policy_drift: Vec<f64>,
    /// Sup-norm residual of the discrete HJB at the final iterate.
    pub residual: f64,
    pub iterations: usize,
    /// Extrapolation points `(alpha, alpha v^alpha(0))` in the ergodic case.
    pub lambda_points: Vec<(f64, f64)>,
}

impl GridSolution {
    /// Linear interpolation of the values.
    pub fn value_at(&self, x: f64) -> f64 {
        interp(&self.x, &self.values, x)
    }

    pub fn derivative_at(&self, x: f64) -> f64 {
        interp(&self.x, &self.derivative, x)
    }

    pub fn csv(&self) -> String {
        use crate::export::{csv_string, fmt};
        csv_string(
            "oracle",
            &["x", "v", "dv", "policy"],
            (0..self.x.len()).map(|i| {
                vec![
                    fmt(self.x[i]),
                    fmt(self.values[i]),
                    fmt(self.derivative[i]),
                    fmt(self.policy[i].first().copied().unwrap_or(0.0)),
                ]
            }),
        )
    }
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    let n = xs.len();
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let h = xs[1] - xs[0];
    let i = (((x - xs[0]) / h).floor() as usize).min(n - 2);
    let t = (x - xs[i]) / h;
    ys[i] * (1.0 - t) + ys[i + 1] * t
}

/// `b(x) = A x + F(x)` and `g` of a scalar model.
pub fn scalar_coefficients(model: &ModelSpec) -> Result<(impl Fn(f64) -> f64 + '_, f64)> {
    if model.dim != 1 || model.noise_dim != 1 {
        return Err(Error::Config("oracle is 1-D only".into()));
    }
    let a = model.linear_drift[(0, 0)];
    let g = model.noise_map[(0, 0)];
    Ok((
        move |x: f64| {
            let mut f = [0.0];
            model.eval_nonlinear(&[x], &mut f);
            a * x + f[0]
        },
        g,
    ))
}

struct Tables {
    /// `L(x_i, u_k)`, node-major.
    cost: Vec<f64>,
    /// `b(x_i) + g R(u_k)`, node-major.
    beta: Vec<f64>,
    n_u: usize,
}

fn tables(grid: &Grid1D, drift: &dyn Fn(f64) -> f64, g: f64, ham: &HamiltonianSpec) -> Result<Tables> {
    if ham.state_dim != 1 || ham.noise_dim != 1 {
        return Err(Error::Config("oracle is 1-D only".into()));
    }
    let n_u = ham.control_grid.len();
    let mut cost = Vec::with_capacity(grid.n_nodes * n_u);
    let mut beta = Vec::with_capacity(grid.n_nodes * n_u);
    for i in 0..grid.n_nodes {
        let x = grid.node(i);
        let b = drift(x);
        if !b.is_finite() {
            return Err(Error::Evaluation(format!("drift is not finite at x={x}")));
        }
        for (k, u) in ham.control_grid.iter().enumerate() {
            let l = (ham.cost)(&[x], u);
            if !l.is_finite() {
                return Err(Error::Evaluation(format!("L(x, {u:?}) is not finite at x={x}")));
            }
            cost.push(l);
            beta.push(b + g * ham.r_of_grid(k)[0]);
        }
    }
    let n = grid.n_nodes;
    for k in 0..n_u {
        if !(beta[k] > 0.0 && beta[(n - 1) * n_u + k] < 0.0) {
            return Err(Error::Config(format!(
                "controlled drift must point inward at both ends of [{}, {}] (control {:?})",
                grid.x_min, grid.x_max, ham.control_grid[k]
            )));
        }
    }
    Ok(Tables { cost, beta, n_u })
}

/// Row `i` for drift `beta`: `(lower, diag, upper)` of the operator
/// `alpha I - generator`.
fn row(grid: &Grid1D, diff: f64, alpha: f64, i: usize, beta: f64) -> (f64, f64, f64) {
    let h = grid.h;
    let bp = beta.max(0.0) / h;
    let bm = beta.min(0.0) / h;
    if i == 0 {
        (0.0, alpha + bp, -bp)
    } else if i == grid.n_nodes - 1 {
        (bm, alpha - bm, 0.0)
    } else {
        (-diff + bm, alpha + 2.0 * diff + bp - bm, -diff - bp)
    }
}

/// `generator v` at node `i` under drift `beta`.
fn generator(grid: &Grid1D, diff: f64, v: &[f64], i: usize, beta: f64) -> f64 {
    let (lo, d, up) = row(grid, diff, 0.0, i, beta);
    let mut s = d * v[i];
    if i > 0 {
        s += lo * v[i - 1];
    }
    if i + 1 < v.len() {
        s += up * v[i + 1];
    }
    -s
}

fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * c[i - 1];
        c[i] = upper[i] / m;
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

pub const MAX_POLICY_SWEEPS: usize = 200;

fn solve_with_tables(grid: &Grid1D, g: f64, ham: &HamiltonianSpec, t: &Tables, alpha: f64) -> Result<GridSolution> {
    let n = grid.n_nodes;
    let diff = 0.5 * g * g / (grid.h * grid.h);
    let n_u = t.n_u;
    // start from the pointwise cheapest control
    let mut policy: Vec<usize> = (0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..n_u {
                if t.cost[i * n_u + k] < t.cost[i * n_u + best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    let mut lower = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    let mut trace = Vec::new();
    for sweep in 1..=MAX_POLICY_SWEEPS {
        for i in 0..n {
            let k = policy[i];
            let (lo, d, up) = row(grid, diff, alpha, i, t.beta[i * n_u + k]);
            lower[i] = lo;
            diag[i] = d;
            upper[i] = up;
            rhs[i] = t.cost[i * n_u + k];
        }
        let v = thomas(&lower, &diag, &upper, &rhs);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::OracleFailure {
                reason: "tridiagonal solve produced non-finite values".into(),
                residuals: trace,
            });
        }
        // improvement step over the full discrete row
        let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let bmax = t.beta.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let tol = 64.0 * f64::EPSILON * (1.0 + vmax * (4.0 * diff + 2.0 * bmax / grid.h));
        let mut changed = false;
        let mut residual: f64 = 0.0;
        for i in 0..n {
            let q = |k: usize| t.cost[i * n_u + k] + generator(grid, diff, &v, i, t.beta[i * n_u + k]);
            let cur = q(policy[i]);
            let mut best = policy[i];
            let mut best_q = cur;
            for k in 0..n_u {
                let qk = q(k);
                if qk < best_q - tol {
                    best = k;
                    best_q = qk;
                }
            }
            if best != policy[i] {
                policy[i] = best;
                changed = true;
            }
            residual = residual.max((alpha * v[i] - best_q).abs());
        }
        trace.push(residual);
        if !changed {
            let derivative = (0..n)
                .map(|i| {
                    let beta = t.beta[i * n_u + policy[i]];
                    if i == 0 || (beta > 0.0 && i + 1 < n) {
                        (v[i + 1] - v[i]) / grid.h
                    } else {
                        (v[i] - v[i - 1]) / grid.h
                    }
                })
                .collect();
            return Ok(GridSolution {
                x: grid.nodes(),
                derivative,
                lambda: None,
                alpha: Some(alpha),
                policy: policy.iter().map(|k| ham.control_grid[*k].clone()).collect(),
                policy_drift: (0..n).map(|i| t.beta[i * n_u + policy[i]]).collect(),
                policy_index: policy,
                residual,
                iterations: sweep,
                values: v,
                lambda_points: Vec::new(),
            });
        }
    }
    Err(Error::OracleFailure {
        reason: format!("policy iteration did not converge in {MAX_POLICY_SWEEPS} sweeps"),
        residuals: trace,
    })
}

/// Discounted HJB on the grid.
pub fn solve_discounted_hjb_1d(
    grid: &Grid1D,
    drift: &dyn Fn(f64) -> f64,
    g: f64,
    ham: &HamiltonianSpec,
    alpha: f64,
) -> Result<GridSolution> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    let t = tables(grid, drift, g, ham)?;
    solve_with_tables(grid, g, ham, &t, alpha)
}

pub const ERGODIC_ALPHAS: [f64; 3] = [1e-2, 5e-3, 2.5e-3];

/// Ergodic HJB by vanishing discount on the grid, `lambda` extrapolated
/// linearly in `alpha`, values normalized to `v(0) = 0`.
pub fn solve_ergodic_hjb_1d(
    grid: &Grid1D,
    drift: &dyn Fn(f64) -> f64,
    g: f64,
    ham: &HamiltonianSpec,
) -> Result<GridSolution> {
    let t = tables(grid, drift, g, ham)?;
    let mut points = Vec::with_capacity(ERGODIC_ALPHAS.len());
    let mut last = None;
    for &a in &ERGODIC_ALPHAS {
        let s = solve_with_tables(grid, g, ham, &t, a)?;
        points.push((a, a * s.values[grid.zero_index]));
        last = Some(s);
    }
    let mut sol = last.expect("alpha list is non-empty");
    let (lambda, _) = linear_fit(&points);
    let v0 = sol.values[grid.zero_index];
    for v in sol.values.iter_mut() {
        *v -= v0;
    }
    sol.lambda = Some(lambda);
    sol.alpha = None;
    sol.lambda_points = points;
    Ok(sol)
}

/// `rho(x) ~ exp((2/g^2) int_0^x b)`, normalized by the trapezoid rule.
pub fn invariant_density_1d(drift: &dyn Fn(f64) -> f64, g: f64, grid: &Grid1D) -> Result<Vec<f64>> {
    if !(g != 0.0) {
        return Err(Error::Config("noise coefficient must be nonzero".into()));
    }
    let n = grid.n_nodes;
    let h = grid.h;
    let scale = 2.0 / (g * g);
    // Simpson on each cell, exact for cubic drifts
    let cell = |a: f64| h / 6.0 * (drift(a) + 4.0 * drift(a + 0.5 * h) + drift(a + h));
    let mut expo = vec![0.0; n];
    for i in grid.zero_index + 1..n {
        expo[i] = expo[i - 1] + scale * cell(grid.node(i - 1));
    }
    for i in (0..grid.zero_index).rev() {
        expo[i] = expo[i + 1] - scale * cell(grid.node(i));
    }
    let top = expo.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::OracleFailure {
            reason: "density exponent is not finite".into(),
            residuals: vec![],
        });
    }
    let mut rho: Vec<f64> = expo.iter().map(|e| (e - top).exp()).collect();
    if rho[0] > 1e-8 || rho[n - 1] > 1e-8 {
        return Err(Error::OracleFailure {
            reason: format!(
                "density is not normalizable on [{}, {}]: relative edge mass {:e}, {:e}",
                grid.x_min,
                grid.x_max,
                rho[0],
                rho[n - 1]
            ),
            residuals: vec![rho[0], rho[n - 1]],
        });
    }
    let total = trapezoid(&rho, h);
    for r in rho.iter_mut() {
        *r /= total;
    }
    Ok(rho)
}

pub fn trapezoid(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    h * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1]))
}

/// Stationary law of the upwind chain with node drifts `beta`
/// (detailed balance), as probability weights summing to one.
pub fn stationary_weights(grid: &Grid1D, beta: &[f64], g: f64) -> Vec<f64> {
    let diff = 0.5 * g * g / (grid.h * grid.h);
    let h = grid.h;
    let n = grid.n_nodes;
    let mut logw = vec![0.0; n];
    for i in 0..n - 1 {
        let up = if i == 0 { beta[0].max(0.0) / h } else { diff + beta[i].max(0.0) / h };
        let down = if i + 1 == n - 1 {
            (-beta[i + 1]).max(0.0) / h
        } else {
            diff + (-beta[i + 1]).max(0.0) / h
        };
        logw[i + 1] = logw[i] + (up / down).ln();
    }
    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
    let s: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x /= s;
    }
    w
}

/// `sum_i w_i psi(x_i, v'(x_i) g)` with `w` the uncontrolled stationary
/// weights, and `sum_i w^u_i L(x_i, u_i)` under the solution's policy.
pub fn lambda_identities(
    grid: &Grid1D,
    drift: &dyn Fn(f64) -> f64,
    g: f64,
    ham: &HamiltonianSpec,
    sol: &GridSolution,
) -> Result<(f64, f64)> {
    let b: Vec<f64> = grid.nodes().iter().map(|x| drift(*x)).collect();
    let w0 = stationary_weights(grid, &b, g);
    let wu = stationary_weights(grid, &sol.policy_drift, g);
    let mut psi_mean = 0.0;
    let mut cost_mean = 0.0;
    for i in 0..grid.n_nodes {
        let x = [grid.node(i)];
        let z = [sol.derivative[i] * g];
        psi_mean += w0[i] * crate::hamiltonian::psi_eval(ham, &x, &z)?.psi;
        cost_mean += wu[i] * (ham.cost)(&x, &sol.policy[i]);
    }
    Ok((psi_mean, cost_mean))
}
