//! Controlled stochastic heat equation on `(0, 1)` with Dirichlet boundary
//! conditions, truncated to the first `N` sine modes.
//!
//! State coordinates are amplitudes of `e_k(xi) = sqrt(2) sin(k pi xi)`. The
//! reaction term is evaluated on `2N + 1` interior nodes and projected back
//! with the discrete sine transform, which is exact for cubic reactions.

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::StateCost;
use crate::model::{dot, norm, HamiltonianSpec, ModelSpec, Nonlinearity};
use crate::rng::{self, Domain};

/// Pointwise reaction `f(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Reaction {
    /// `f(x) = -c x^3`.
    Cubic { coefficient: f64 },
    /// `f(x) = sum_k a_k x^k`.
    Polynomial { coefficients: Vec<f64> },
}

impl Reaction {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Reaction::Cubic { coefficient } => -coefficient * x * x * x,
            Reaction::Polynomial { coefficients } => coefficients.iter().rev().fold(0.0, |acc, a| acc * x + a),
        }
    }

    pub fn degree(&self) -> u32 {
        match self {
            Reaction::Cubic { .. } => 3,
            Reaction::Polynomial { coefficients } => coefficients.len().saturating_sub(1) as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatConfig {
    pub n_modes: usize,
    pub reaction: Reaction,
    /// Control and noise window `[a, b]`.
    pub a: f64,
    pub b: f64,
    pub delta: f64,
    /// State part `l(x(xi))` of the running cost.
    pub cost: StateCost,
    #[serde(default)]
    pub control_weight: f64,
    /// Nodes and weights `(xi_i, w_i)` of the cost measure; empty means the
    /// midpoint rule with `4N` nodes.
    #[serde(default)]
    pub mu_weights: Vec<(f64, f64)>,
    pub control_bins: usize,
    /// Number of control levels per bin, odd so that `0` is included.
    #[serde(default = "default_levels")]
    pub control_levels: usize,
}

fn default_levels() -> usize {
    3
}

impl HeatConfig {
    /// Cubic benchmark: `f = -x^3`, window `[0.25, 0.75]`, `delta = 0.5`,
    /// cost `cos(x(xi))` under Lebesgue measure, two control bins.
    pub fn cubic_benchmark(n_modes: usize) -> Self {
        Self {
            n_modes,
            reaction: Reaction::Cubic { coefficient: 1.0 },
            a: 0.25,
            b: 0.75,
            delta: 0.5,
            cost: StateCost::Cos,
            control_weight: 0.0,
            mu_weights: Vec::new(),
            control_bins: 2,
            control_levels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_modes < 4 {
            return Err(Error::Config(format!("n_modes must be >= 4, got {}", self.n_modes)));
        }
        if !(0.0 <= self.a && self.a <= self.b && self.b <= 1.0) {
            return Err(Error::Config(format!(
                "window must satisfy 0 <= a <= b <= 1, got [{}, {}]",
                self.a, self.b
            )));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta must be positive, got {}", self.delta)));
        }
        if self
            .mu_weights
            .iter()
            .any(|(xi, w)| !(0.0..=1.0).contains(xi) || !(*w >= 0.0 && w.is_finite()))
        {
            return Err(Error::Config("cost measure needs nodes in [0,1] and finite nonnegative weights".into()));
        }
        if self.control_bins == 0 {
            return Err(Error::Config("control_bins must be positive".into()));
        }
        if self.control_levels < 3 || self.control_levels % 2 == 0 {
            return Err(Error::Config(format!(
                "control_levels must be odd and >= 3, got {}",
                self.control_levels
            )));
        }
        Ok(())
    }

    fn weights(&self) -> Vec<(f64, f64)> {
        if self.mu_weights.is_empty() {
            let k = 4 * self.n_modes;
            (0..k).map(|i| ((i as f64 + 0.5) / k as f64, 1.0 / k as f64)).collect()
        } else {
            self.mu_weights.clone()
        }
    }
}

pub fn mode(k: usize, xi: f64) -> f64 {
    SQRT_2 * (k as f64 * PI * xi).sin()
}

/// `sum_k x_k e_k(xi)` at each `xi`.
pub fn point_values(x: &[f64], xis: &[f64]) -> Vec<f64> {
    xis.iter()
        .map(|&xi| {
            if xi == 0.0 || xi == 1.0 {
                0.0
            } else {
                x.iter().enumerate().map(|(k, a)| a * mode(k + 1, xi)).sum()
            }
        })
        .collect()
}

/// `int_a^b e_j e_k`.
pub fn window_gram(n: usize, a: f64, b: f64) -> DMatrix<f64> {
    let prim = |j: usize, k: usize, xi: f64| {
        let (j, k) = (j as f64, k as f64);
        if j == k {
            xi - (2.0 * k * PI * xi).sin() / (2.0 * k * PI)
        } else {
            ((j - k) * PI * xi).sin() / ((j - k) * PI) - ((j + k) * PI * xi).sin() / ((j + k) * PI)
        }
    };
    DMatrix::from_fn(n, n, |j, k| prim(j + 1, k + 1, b) - prim(j + 1, k + 1, a))
}

/// `int_lo^hi e_k` for `k = 1..n`.
fn mode_integrals(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (1..=n)
        .map(|k| {
            let w = k as f64 * PI;
            SQRT_2 * ((w * lo).cos() - (w * hi).cos()) / w
        })
        .collect()
}

/// Sine-transform quadrature: values at `m - 1` interior nodes of a uniform
/// grid with `m` cells and projection back onto `n` modes.
struct SineQuadrature {
    n: usize,
    m: usize,
    /// `table[q * n + k] = e_{k+1}(q'/m)` for interior node `q' = q + 1`.
    table: Vec<f64>,
}

impl SineQuadrature {
    fn new(n: usize, m: usize) -> Self {
        let mut table = Vec::with_capacity((m - 1) * n);
        for q in 1..m {
            let xi = q as f64 / m as f64;
            for k in 1..=n {
                table.push(mode(k, xi));
            }
        }
        Self { n, m, table }
    }

    fn apply(&self, f: &Reaction, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for row in self.table.chunks_exact(self.n) {
            let v: f64 = row.iter().zip(x).map(|(e, a)| e * a).sum();
            let fv = f.eval(v) / self.m as f64;
            for (o, e) in out.iter_mut().zip(row) {
                *o += fv * e;
            }
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HeatReport {
    pub eta: f64,
    pub eigenvalues: Vec<f64>,
    /// Partial sums of `(G G*)_kk / (2 k^2 pi^2)`.
    pub trace_partial_sums: Vec<f64>,
    /// Last increment over the previous partial sum.
    pub trace_ratio: f64,
    pub aliasing_change: f64,
    /// Fitted `c` in `<F(x) - F(y), x - y> <= -c |x - y|^{2 + eps}` on
    /// one-mode probes; absent for non-cubic reactions.
    pub dissipativity_c: Option<f64>,
    pub dissipativity_eps: Option<f64>,
    pub n_controls: usize,
}

pub const ALIASING_TOL: f64 = 0.05;

/// Galerkin model, Hamiltonian and construction report.
pub fn build(hc: &HeatConfig) -> Result<(ModelSpec, HamiltonianSpec, HeatReport)> {
    hc.validate()?;
    let n = hc.n_modes;
    let eig: Vec<f64> = (1..=n).map(|k| -((k * k) as f64) * PI * PI).collect();
    let a_mat = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eig.clone()));
    let g_mat = window_gram(n, hc.a, hc.b);

    let quad = Arc::new(SineQuadrature::new(n, 2 * n + 2));
    let reaction = hc.reaction.clone();
    let aliasing_change = aliasing_check(&reaction, n)?;
    let q2 = quad.clone();
    let r2 = reaction.clone();
    let nonlinear = Nonlinearity::custom(
        format!("galerkin {:?}", hc.reaction),
        Arc::new(move |x: &[f64], out: &mut [f64]| q2.apply(&r2, x, out)),
    );
    let eta = PI * PI;
    let model = ModelSpec::new(a_mat, nonlinear, g_mat.clone(), eta, hc.reaction.degree().max(1))?;

    let (ham, n_controls) = hamiltonian(hc)?;

    let gg = &g_mat * g_mat.transpose();
    let mut partial = Vec::with_capacity(n);
    let mut acc = 0.0;
    for k in 0..n {
        acc += gg[(k, k)] / (2.0 * ((k + 1) * (k + 1)) as f64 * PI * PI);
        partial.push(acc);
    }
    let trace_ratio = if n >= 2 && partial[n - 2] > 0.0 {
        (partial[n - 1] - partial[n - 2]) / partial[n - 2]
    } else {
        0.0
    };

    let (dissipativity_c, dissipativity_eps) = match hc.reaction {
        Reaction::Cubic { .. } => {
            let (c, eps) = dissipativity_probe(&model);
            (Some(c), Some(eps))
        }
        _ => (None, None),
    };

    Ok((
        model,
        ham,
        HeatReport {
            eta,
            eigenvalues: eig,
            trace_partial_sums: partial,
            trace_ratio,
            aliasing_change,
            dissipativity_c,
            dissipativity_eps,
            n_controls,
        },
    ))
}

fn aliasing_check(f: &Reaction, n: usize) -> Result<f64> {
    let coarse = SineQuadrature::new(n, 2 * n + 2);
    let fine = SineQuadrature::new(n, 4 * n + 4);
    let mut rng = rng::stream(0xa11a5, Domain::Probes, n as u64);
    let center = vec![0.0; n];
    let mut worst: f64 = 0.0;
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for i in 0..16 {
        let mut x = rng::uniform_ball(&mut rng, &center, 3.0);
        if i == 0 {
            x = center.clone();
            x[0] = 3.0;
        }
        coarse.apply(f, &x, &mut a);
        fine.apply(f, &x, &mut b);
        let nb = norm(&b);
        if nb > 1e-12 {
            let d: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p - q).collect();
            worst = worst.max(norm(&d) / nb);
        }
    }
    if worst > ALIASING_TOL {
        return Err(Error::Numerical(format!(
            "quadrature resolution too low: projection of the reaction changes by {:.1}% when nodes double",
            100.0 * worst
        )));
    }
    Ok(worst)
}

/// `c = min -<dF, dx> / |dx|^4` over one-mode pairs, and `eps` from the
/// log-log slope on symmetric pairs `(s e_1, -s e_1)`.
fn dissipativity_probe(model: &ModelSpec) -> (f64, f64) {
    let n = model.dim;
    let amps: Vec<f64> = (0..21).map(|i| -2.0 + 0.2 * i as f64).collect();
    let f_of = |s: f64| {
        let mut x = vec![0.0; n];
        x[0] = s;
        let mut out = vec![0.0; n];
        model.eval_nonlinear(&x, &mut out);
        out[0]
    };
    let fs: Vec<f64> = amps.iter().map(|s| f_of(*s)).collect();
    let mut c = f64::INFINITY;
    for i in 0..amps.len() {
        for j in (i + 1)..amps.len() {
            let dx = amps[i] - amps[j];
            let inner = (fs[i] - fs[j]) * dx;
            c = c.min(-inner / dx.powi(4));
        }
    }
    let pts: Vec<(f64, f64)> = [0.25, 0.5, 1.0, 2.0]
        .iter()
        .map(|s: &f64| {
            let dx = 2.0 * s;
            let inner = (f_of(*s) - f_of(-*s)) * dx;
            (dx.ln(), (-inner).ln())
        })
        .collect();
    let (_, slope) = crate::stats::linear_fit(&pts);
    (c, slope - 2.0)
}

fn hamiltonian(hc: &HeatConfig) -> Result<(HamiltonianSpec, usize)> {
    let n = hc.n_modes;
    let bins = hc.control_bins;
    let width = (hc.b - hc.a) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| hc.a + width * i as f64).collect();
    let r_cols: Vec<Vec<f64>> = (0..bins).map(|i| mode_integrals(n, edges[i], edges[i + 1])).collect();

    let half = (hc.control_levels / 2) as i64;
    let levels: Vec<f64> = (-half..=half).map(|i| hc.delta * i as f64 / half as f64).collect();
    let mut grid: Vec<Vec<f64>> = vec![vec![]];
    for _ in 0..bins {
        grid = grid
            .into_iter()
            .flat_map(|g| {
                levels.iter().map(move |l| {
                    let mut h = g.clone();
                    h.push(*l);
                    h
                })
            })
            .collect();
    }

    let weights = hc.weights();
    let xis: Vec<f64> = weights.iter().map(|w| w.0).collect();
    let ws: Vec<f64> = weights.iter().map(|w| w.1).collect();
    // bin containing each cost node, if any
    let node_bin: Vec<Option<usize>> = xis
        .iter()
        .map(|&xi| {
            if xi < hc.a || xi > hc.b || bins == 0 {
                None
            } else {
                Some((((xi - hc.a) / width).floor() as usize).min(bins - 1))
            }
        })
        .collect();
    let table: Vec<Vec<f64>> = xis.iter().map(|&xi| (1..=n).map(|k| mode(k, xi)).collect()).collect();
    let total_w: f64 = ws.iter().sum();

    let cost = hc.cost.clone();
    let cw = hc.control_weight;
    let cost_fn = Arc::new(move |x: &[f64], u: &[f64]| {
        let mut s = 0.0;
        for i in 0..ws.len() {
            let v = dot(&table[i], x);
            let ui = node_bin[i].map(|b| u[b]).unwrap_or(0.0);
            s += ws[i] * (cost.eval(&[v]) + cw * ui * ui);
        }
        s
    });
    let map = Arc::new(move |u: &[f64]| {
        let mut r = vec![0.0; n];
        for (ub, col) in u.iter().zip(&r_cols) {
            for (rk, c) in r.iter_mut().zip(col) {
                *rk += ub * c;
            }
        }
        r
    });
    let l_bound = total_w * (hc.cost.bound() + cw.abs() * hc.delta * hc.delta);
    let r_bound = hc.delta * (hc.b - hc.a).sqrt();
    let lip_l = hc.cost.lipschitz(1) * total_w * (2.0 * n as f64).sqrt();
    let n_controls = grid.len();
    let ham = HamiltonianSpec::new(
        format!("heat N={n} [{}, {}] delta={}", hc.a, hc.b, hc.delta),
        n,
        grid,
        n,
        cost_fn,
        map,
        l_bound.max(r_bound),
        lip_l.max(f64::MIN_POSITIVE),
    )?;
    Ok((ham, n_controls))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::validate_hamiltonian;
    use crate::model::validate_model;

    #[test]
    fn spectrum_and_window() {
        let (m, _, rep) = build(&HeatConfig::cubic_benchmark(8)).unwrap();
        assert!((m.linear_drift[(0, 0)] + 9.8696).abs() < 1e-4);
        assert!((m.linear_drift[(2, 2)] + 9.0 * PI * PI).abs() < 1e-9);
        assert!((rep.eta - PI * PI).abs() < 1e-12);
        let g = window_gram(6, 0.0, 1.0);
        for j in 0..6 {
            for k in 0..6 {
                let e = if j == k { 1.0 } else { 0.0 };
                assert!((g[(j, k)] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn window_gram_matches_quadrature() {
        let g = window_gram(5, 0.25, 0.75);
        let m = 20000;
        for j in 1..=5 {
            for k in 1..=5 {
                let h = 0.5 / m as f64;
                let s: f64 = (0..m).map(|i| {
                    let xi = 0.25 + (i as f64 + 0.5) * h;
                    mode(j, xi) * mode(k, xi) * h
                }).sum();
                assert!((s - g[(j - 1, k - 1)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn point_values_basics() {
        let x = [1.0, 0.0, 0.0, 0.0];
        let v = point_values(&x, &[0.0, 0.5, 1.0]);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[2], 0.0);
        assert!((v[1] - SQRT_2).abs() < 1e-15);
        let x = [0.3, -0.7, 0.2, 1.1];
        let k = 4000;
        let xis: Vec<f64> = (0..k).map(|i| (i as f64 + 0.5) / k as f64).collect();
        let vals = point_values(&x, &xis);
        let l2: f64 = vals.iter().map(|v| v * v).sum::<f64>() / k as f64;
        assert!((l2 - x.iter().map(|v| v * v).sum::<f64>()).abs() < 1e-6);
    }

    #[test]
    fn cubic_projection_is_exact() {
        let (m, _, rep) = build(&HeatConfig::cubic_benchmark(6)).unwrap();
        assert!(rep.aliasing_change < 1e-10);
        // brute-force projection by fine midpoint quadrature
        let x = [0.4, -0.3, 0.8, 0.1, 0.0, -0.5];
        let mut out = vec![0.0; 6];
        m.eval_nonlinear(&x, &mut out);
        let k = 20000;
        for j in 1..=6 {
            let s: f64 = (0..k)
                .map(|i| {
                    let xi = (i as f64 + 0.5) / k as f64;
                    let v = point_values(&x, &[xi])[0];
                    -v * v * v * mode(j, xi) / k as f64
                })
                .sum();
            assert!((s - out[j - 1]).abs() < 1e-6, "mode {j}: {s} vs {}", out[j - 1]);
        }
    }

    #[test]
    fn high_degree_reaction_trips_aliasing() {
        let mut hc = HeatConfig::cubic_benchmark(4);
        hc.reaction = Reaction::Polynomial {
            coefficients: vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0],
        };
        assert!(matches!(build(&hc), Err(Error::Numerical(_))));
    }

    #[test]
    fn validations_pass() {
        let (m, h, rep) = build(&HeatConfig::cubic_benchmark(8)).unwrap();
        let r = validate_model(&m, 60, 2.0, 1).unwrap();
        assert!(r.passed, "{r}");
        assert!(m.eta >= PI * PI * (1.0 - 1e-6));
        let hr = validate_hamiltonian(&h, 40, 2).unwrap();
        assert!(hr.passed, "{hr}");
        assert_eq!(rep.n_controls, 9);
        let c = rep.dissipativity_c.unwrap();
        assert!((c - 0.375).abs() < 1e-6, "{c}");
        assert!((rep.dissipativity_eps.unwrap() - 2.0).abs() < 1e-9);
        assert!(rep.trace_ratio < 0.05);
    }

    #[test]
    fn bad_configs() {
        let mut hc = HeatConfig::cubic_benchmark(8);
        hc.a = 0.8;
        assert!(build(&hc).is_err());
        let mut hc = HeatConfig::cubic_benchmark(3);
        hc.a = 0.1;
        assert!(build(&hc).is_err());
        let mut hc = HeatConfig::cubic_benchmark(8);
        hc.control_levels = 4;
        assert!(build(&hc).is_err());
    }
}
