//! `psi(x, z) = inf_u { L(x, u) + z R(u) }` over a finite control grid, the
//! ball closed form, and empirical Lipschitz constants.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dist, dot, norm, probe_pairs, probe_points, ClosedForm, HamiltonianSpec, ValidationReport};
use crate::rng::{self, Domain};

/// Minimum value, the minimizing control and the gap to the runner-up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianValue {
    pub psi: f64,
    pub argmin_u: Vec<f64>,
    /// Grid index of `argmin_u`, absent for closed forms off the grid.
    pub argmin_index: Option<usize>,
    /// Second-best minus best; `inf` for a single control.
    pub gap: f64,
}

/// Exact minimum over the control grid, ties to the smallest index.
pub fn psi_eval(ham: &HamiltonianSpec, x: &[f64], z: &[f64]) -> Result<HamiltonianValue> {
    if z.len() != ham.noise_dim {
        return Err(Error::Evaluation(format!(
            "z has length {}, expected {}",
            z.len(),
            ham.noise_dim
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation(format!("z is not finite: {z:?}")));
    }
    let mut best = f64::INFINITY;
    let mut second = f64::INFINITY;
    let mut best_idx = 0;
    for (k, u) in ham.control_grid.iter().enumerate() {
        let l = (ham.cost)(x, u);
        if !l.is_finite() {
            return Err(Error::Evaluation(format!("L(x, {u:?}) is not finite at x={x:?}")));
        }
        let val = l + dot(z, &ham.r_grid[k]);
        if val < best {
            second = best;
            best = val;
            best_idx = k;
        } else if val < second {
            second = val;
        }
    }
    Ok(HamiltonianValue {
        psi: best,
        argmin_u: ham.control_grid[best_idx].clone(),
        argmin_index: Some(best_idx),
        gap: second - best,
    })
}

/// `psi = l - delta |z|`, `gamma = -delta z/|z|` (zero at `z = 0`).
pub fn psi_ball_closed_form(l_of_x: f64, z: &[f64], delta: f64) -> Result<HamiltonianValue> {
    if !(delta > 0.0) {
        return Err(Error::ContractViolation(format!("ball radius must be positive, got {delta}")));
    }
    let nz = norm(z);
    let argmin_u = if nz > 0.0 {
        z.iter().map(|v| -delta * v / nz).collect()
    } else {
        vec![0.0; z.len()]
    };
    Ok(HamiltonianValue {
        psi: l_of_x - delta * nz,
        argmin_u,
        argmin_index: None,
        gap: 0.0,
    })
}

/// Dispatch on the Hamiltonian's closed-form tag.
pub fn psi(ham: &HamiltonianSpec, x: &[f64], z: &[f64]) -> Result<HamiltonianValue> {
    match ham.closed_form {
        ClosedForm::Grid => psi_eval(ham, x, z),
        ClosedForm::BallLinear { delta } => {
            let l = (ham.cost)(x, &ham.control_grid[0]);
            if !l.is_finite() {
                return Err(Error::Evaluation(format!("L is not finite at x={x:?}")));
            }
            psi_ball_closed_form(l, z, delta)
        }
    }
}

/// Empirical `(M, K_x, K_z)`: `M = sup |psi(x,0)|` and sup difference
/// quotients over sampled pairs plus nearby pairs.
pub fn lipschitz_constants(
    ham: &HamiltonianSpec,
    n_probe: usize,
    radius: f64,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    let xs = probe_points(ham.state_dim, n_probe, radius, seed);
    let zs = probe_points(ham.noise_dim, n_probe, radius, seed ^ 0x9e37_79b9);
    let zero_z = vec![0.0; ham.noise_dim];
    let mut m_const: f64 = 0.0;
    let mut psi_x0 = Vec::with_capacity(xs.len());
    for x in &xs {
        let v = psi(ham, x, &zero_z)?.psi;
        m_const = m_const.max(v.abs());
        psi_x0.push(v);
    }

    let mut kx: f64 = 0.0;
    let mut kz: f64 = 0.0;
    let pairs = probe_pairs(xs.len());
    for &(i, j) in pairs.iter().take(20_000) {
        let z = &zs[i % zs.len()];
        let d = dist(&xs[i], &xs[j]);
        if d > 0.0 {
            let a = psi(ham, &xs[i], z)?.psi;
            let b = psi(ham, &xs[j], z)?.psi;
            kx = kx.max((a - b).abs() / d);
        }
        let x = &xs[j];
        let dz = dist(&zs[i], &zs[j % zs.len()]);
        if dz > 0.0 {
            let a = psi(ham, x, &zs[i])?.psi;
            let b = psi(ham, x, &zs[j % zs.len()])?.psi;
            kz = kz.max((a - b).abs() / dz);
        }
    }

    // nearby pairs resolve the local slope
    let h = 1e-4 * radius;
    let mut rng = rng::stream(seed, Domain::Probes, 1);
    for (x, z) in xs.iter().zip(&zs) {
        let mut dir = vec![0.0; x.len()];
        rng::fill_normal(&mut rng, 1.0, &mut dir);
        let nd = norm(&dir).max(1e-300);
        let x2: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + h * d / nd).collect();
        let a = psi(ham, x, z)?.psi;
        let b = psi(ham, &x2, z)?.psi;
        kx = kx.max((a - b).abs() / h);

        let mut dz = vec![0.0; z.len()];
        rng::fill_normal(&mut rng, 1.0, &mut dz);
        let ndz = norm(&dz).max(1e-300);
        let z2: Vec<f64> = z.iter().zip(&dz).map(|(a, d)| a + h * d / ndz).collect();
        let b = psi(ham, x, &z2)?.psi;
        kz = kz.max((a - b).abs() / h);
    }
    Ok((m_const, kx, kz))
}

/// Checks `|R| <= c`, `|L| <= c` and the `x`-Lipschitz bound of `L`; reports
/// `M`, `K_x`, `K_z` and a few `(x, z, psi)` samples.
pub fn validate_hamiltonian(ham: &HamiltonianSpec, n_probe: usize, seed: u64) -> Result<ValidationReport> {
    if ham.control_grid.is_empty() {
        return Err(Error::Config("control grid is empty".into()));
    }
    let radius = 3.0;
    let mut report = ValidationReport {
        passed: true,
        ..Default::default()
    };
    let tol = 1e-9 * (1.0 + ham.bound_c);
    let r_max = ham.r_grid.iter().map(|r| norm(r)).fold(0.0, f64::max);
    if r_max > ham.bound_c + tol {
        report.passed = false;
        report.notes.push(format!("max |R(u)| = {r_max} exceeds c = {}", ham.bound_c));
    }
    let xs = probe_points(ham.state_dim, n_probe.max(2), radius, seed);
    let mut l_max: f64 = 0.0;
    for x in &xs {
        for u in &ham.control_grid {
            let l = (ham.cost)(x, u);
            if !l.is_finite() {
                return Err(Error::Evaluation(format!("L(x, {u:?}) is not finite at x={x:?}")));
            }
            l_max = l_max.max(l.abs());
        }
    }
    if l_max > ham.bound_c + tol {
        report.passed = false;
        report.notes.push(format!("max |L| = {l_max} exceeds c = {}", ham.bound_c));
    }
    let mut lip_l: f64 = 0.0;
    for (i, j) in probe_pairs(xs.len()).into_iter().take(20_000) {
        let d = dist(&xs[i], &xs[j]);
        if d == 0.0 {
            continue;
        }
        for u in &ham.control_grid {
            lip_l = lip_l.max(((ham.cost)(&xs[i], u) - (ham.cost)(&xs[j], u)).abs() / d);
        }
    }
    if lip_l > ham.lip_lx * (1.0 + 1e-9) + 1e-12 {
        report.passed = false;
        report.notes.push(format!(
            "empirical Lipschitz constant of L {lip_l} exceeds declared {}",
            ham.lip_lx
        ));
    }

    let (m, kx, kz) = lipschitz_constants(ham, n_probe.max(2), radius, seed)?;
    report.constants.insert("M".into(), m);
    report.constants.insert("K_x".into(), kx);
    report.constants.insert("K_z".into(), kz);
    report.constants.insert("max_R".into(), r_max);
    report.constants.insert("max_L".into(), l_max);
    report.constants.insert("lip_L".into(), lip_l);

    let zs = probe_points(ham.noise_dim, n_probe.max(2), radius, seed ^ 0x51);
    for (x, z) in xs.iter().zip(&zs).take(16) {
        let v = psi(ham, x, z)?;
        report.psi_samples.push((x.clone(), z.clone(), v.psi));
    }
    Ok(report)
}

/// State part of the registry costs, `L(x, u) = s(x) + w |u|^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum StateCost {
    Constant { value: f64 },
    /// Mean of `cos(x_i)`.
    Cos,
    /// Mean of `x_i^2 / (1 + x_i^2)`.
    SaturatedQuadratic,
    /// Mean of `|x_i| / (1 + |x_i|)`.
    SaturatedAbs,
}

impl StateCost {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let n = x.len().max(1) as f64;
        match self {
            StateCost::Constant { value } => *value,
            StateCost::Cos => x.iter().map(|v| v.cos()).sum::<f64>() / n,
            StateCost::SaturatedQuadratic => x.iter().map(|v| v * v / (1.0 + v * v)).sum::<f64>() / n,
            StateCost::SaturatedAbs => x.iter().map(|v| v.abs() / (1.0 + v.abs())).sum::<f64>() / n,
        }
    }

    pub fn bound(&self) -> f64 {
        match self {
            StateCost::Constant { value } => value.abs(),
            _ => 1.0,
        }
    }

    /// Euclidean Lipschitz constant in `dim` dimensions.
    pub fn lipschitz(&self, dim: usize) -> f64 {
        let s = (dim.max(1) as f64).sqrt();
        match self {
            StateCost::Constant { .. } => 0.0,
            StateCost::Cos | StateCost::SaturatedAbs => 1.0 / s,
            // max of 2x/(1+x^2)^2 at x = 1/sqrt(3)
            StateCost::SaturatedQuadratic => 3.0 * 3f64.sqrt() / 8.0 / s,
        }
    }
}

/// Control sets with `R` the identity embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ControlSet {
    /// `U = {0}`, `R = 0`: no control authority.
    None,
    /// Grid with `points` nodes per axis on `[-delta, delta]^m`, restricted to the ball.
    Ball { delta: f64, points: usize },
    Explicit { points: Vec<Vec<f64>> },
}

impl ControlSet {
    pub fn grid(&self, noise_dim: usize) -> Result<Vec<Vec<f64>>> {
        match self {
            ControlSet::None => Ok(vec![vec![0.0; noise_dim]]),
            ControlSet::Ball { delta, points } => {
                if *points < 2 || !(*delta > 0.0) {
                    return Err(Error::Config("ball control grid needs delta > 0 and >= 2 points".into()));
                }
                let axis: Vec<f64> = (0..*points)
                    .map(|i| -delta + 2.0 * delta * i as f64 / (*points - 1) as f64)
                    .collect();
                let mut grid: Vec<Vec<f64>> = vec![vec![]];
                for _ in 0..noise_dim {
                    grid = grid
                        .into_iter()
                        .flat_map(|g| {
                            axis.iter().map(move |a| {
                                let mut h = g.clone();
                                h.push(*a);
                                h
                            })
                        })
                        .collect();
                }
                grid.retain(|u| norm(u) <= delta * (1.0 + 1e-12));
                Ok(grid)
            }
            ControlSet::Explicit { points } => {
                if points.iter().any(|p| p.len() != noise_dim) {
                    return Err(Error::Config(format!("explicit controls must have length {noise_dim}")));
                }
                Ok(points.clone())
            }
        }
    }
}

/// Registry Hamiltonian `L(x,u) = s(x) + w|u|^2`, `R(u) = u` (or `0` for [`ControlSet::None`]).
pub fn registry_hamiltonian(
    state_dim: usize,
    noise_dim: usize,
    cost: StateCost,
    control_weight: f64,
    controls: &ControlSet,
) -> Result<HamiltonianSpec> {
    let grid = controls.grid(noise_dim)?;
    let u_max = grid.iter().map(|u| norm(u)).fold(0.0, f64::max);
    let bound_l = cost.bound() + control_weight.abs() * u_max * u_max;
    let r_bound = if matches!(controls, ControlSet::None) { 0.0 } else { u_max };
    let lip = cost.lipschitz(state_dim);
    let label = format!("{cost:?} + {control_weight}|u|^2 over {controls:?}");
    let c2 = cost.clone();
    let cost_fn = Arc::new(move |x: &[f64], u: &[f64]| c2.eval(x) + control_weight * dot(u, u));
    let map: crate::model::ControlMapFn = if matches!(controls, ControlSet::None) {
        Arc::new(move |_u: &[f64]| vec![0.0; noise_dim])
    } else {
        Arc::new(|u: &[f64]| u.to_vec())
    };
    HamiltonianSpec::new(
        label,
        state_dim,
        grid,
        noise_dim,
        cost_fn,
        map,
        bound_l.max(r_bound).max(f64::MIN_POSITIVE),
        lip.max(f64::MIN_POSITIVE),
    )
}

/// Batched evaluation of `psi(X_i, z_i)` over a fixed sample, caching `L`.
pub(crate) struct PsiBatch {
    kind: BatchKind,
}

enum BatchKind {
    /// `n x |U|` cost table and `m x |U|` control map.
    Grid { l_table: DMatrix<f64>, r: DMatrix<f64> },
    Ball { l: Vec<f64>, delta: f64 },
}

impl PsiBatch {
    pub fn new(ham: &HamiltonianSpec, xs: &[Vec<f64>]) -> Result<Self> {
        match ham.closed_form {
            ClosedForm::BallLinear { delta } => {
                let l: Vec<f64> = xs.iter().map(|x| (ham.cost)(x, &ham.control_grid[0])).collect();
                if let Some(i) = l.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Evaluation(format!("L is not finite at x={:?}", xs[i])));
                }
                Ok(Self {
                    kind: BatchKind::Ball { l, delta },
                })
            }
            ClosedForm::Grid => {
                let nu = ham.control_grid.len();
                let mut l_table = DMatrix::zeros(xs.len(), nu);
                for (i, x) in xs.iter().enumerate() {
                    for (k, u) in ham.control_grid.iter().enumerate() {
                        let l = (ham.cost)(x, u);
                        if !l.is_finite() {
                            return Err(Error::Evaluation(format!(
                                "L(x, {u:?}) is not finite at x={x:?}"
                            )));
                        }
                        l_table[(i, k)] = l;
                    }
                }
                let r = DMatrix::from_fn(ham.noise_dim, nu, |j, k| ham.r_grid[k][j]);
                Ok(Self {
                    kind: BatchKind::Grid { l_table, r },
                })
            }
        }
    }

    /// `out[i] = psi(X_i, z_i)`, with `z` an `n x m` matrix.
    pub fn eval(&self, z: &DMatrix<f64>, out: &mut [f64]) {
        match &self.kind {
            BatchKind::Ball { l, delta } => {
                for (i, o) in out.iter_mut().enumerate() {
                    let nz = z.row(i).norm();
                    *o = l[i] - delta * nz;
                }
            }
            BatchKind::Grid { l_table, r } => {
                // zr[i, k] = z_i . R(u_k)
                let zr = z * r;
                for (i, o) in out.iter_mut().enumerate() {
                    let mut best = f64::INFINITY;
                    for k in 0..l_table.ncols() {
                        let v = l_table[(i, k)] + zr[(i, k)];
                        if v < best {
                            best = v;
                        }
                    }
                    *o = best;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cos_ball(points: usize) -> HamiltonianSpec {
        registry_hamiltonian(1, 1, StateCost::Cos, 0.0, &ControlSet::Ball { delta: 0.5, points }).unwrap()
    }

    fn three_point(weight: f64) -> HamiltonianSpec {
        registry_hamiltonian(
            1,
            1,
            StateCost::Constant { value: 0.0 },
            weight,
            &ControlSet::Explicit {
                points: vec![vec![-1.0], vec![0.0], vec![1.0]],
            },
        )
        .unwrap()
    }

    #[test]
    fn interval_minimization() {
        let h = cos_ball(101);
        let v = psi_eval(&h, &[0.0], &[1.0]).unwrap();
        assert!((v.psi - 0.5).abs() < 1e-12);
        assert_eq!(v.argmin_u, vec![-0.5]);
    }

    #[test]
    fn zero_z_ties_pick_first_control() {
        let h = cos_ball(11);
        let v = psi_eval(&h, &[0.3], &[0.0]).unwrap();
        assert!((v.psi - 0.3f64.cos()).abs() < 1e-15);
        assert_eq!(v.argmin_index, Some(0));
        assert_eq!(v.gap, 0.0);
    }

    #[test]
    fn three_candidate_enumeration() {
        let h = three_point(1.0);
        // candidates {1 - 0.5, 0, 1 + 0.5}
        let v = psi_eval(&h, &[7.0], &[0.5]).unwrap();
        assert_eq!(v.psi, 0.0);
        assert_eq!(v.argmin_u, vec![0.0]);
        assert_eq!(v.gap, 0.5);
    }

    #[test]
    fn ball_closed_form_values() {
        let v = psi_ball_closed_form(0.0, &[3.0, 4.0], 1.0).unwrap();
        assert_eq!(v.psi, -5.0);
        assert!((v.argmin_u[0] + 0.6).abs() < 1e-15 && (v.argmin_u[1] + 0.8).abs() < 1e-15);
        let v = psi_ball_closed_form(2.0, &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(v.psi, 2.0);
        assert_eq!(v.argmin_u, vec![0.0, 0.0]);
    }

    #[test]
    fn closed_form_matches_grid_within_resolution() {
        let delta = 0.7;
        let h = registry_hamiltonian(2, 2, StateCost::Cos, 0.0, &ControlSet::Ball { delta, points: 101 }).unwrap();
        let gap = 2.0 * delta / 100.0;
        let mut rng = rng::stream(3, Domain::Probes, 0);
        for _ in 0..50 {
            let x = rng::uniform_ball(&mut rng, &[0.0, 0.0], 3.0);
            let z = rng::uniform_ball(&mut rng, &[0.0, 0.0], 3.0);
            let g = psi_eval(&h, &x, &z).unwrap().psi;
            let c = psi_ball_closed_form(StateCost::Cos.eval(&x), &z, delta).unwrap().psi;
            assert!(g >= c - 1e-12);
            assert!(g - c <= delta * gap * norm(&z) + 1e-12, "{g} {c}");
        }
    }

    #[test]
    fn closed_form_rejects_control_dependent_cost() {
        let h = registry_hamiltonian(1, 1, StateCost::Cos, 1.0, &ControlSet::Ball { delta: 1.0, points: 3 }).unwrap();
        let err = h.with_closed_form(ClosedForm::BallLinear { delta: 1.0 }).unwrap_err();
        assert!(matches!(err, Error::ContractViolation(_)));
    }

    #[test]
    fn cos_ball_constants() {
        let h = cos_ball(41);
        let (m, kx, kz) = lipschitz_constants(&h, 400, 3.0, 1).unwrap();
        assert!((m - 1.0).abs() < 1e-12);
        assert!((kz - 0.5).abs() < 1e-3, "{kz}");
        assert!(kx <= 1.0 + 1e-6 && kx > 0.99, "{kx}");
    }

    #[test]
    fn constant_hamiltonian_constants() {
        let h = registry_hamiltonian(1, 1, StateCost::Constant { value: 3.0 }, 0.0, &ControlSet::None).unwrap();
        let r = validate_hamiltonian(&h, 50, 2).unwrap();
        assert!(r.passed);
        assert_eq!(r.constant("M"), Some(3.0));
        assert_eq!(r.constant("K_x"), Some(0.0));
        assert_eq!(r.constant("K_z"), Some(0.0));
    }

    #[test]
    fn validation_samples_match_brute_force() {
        let h = registry_hamiltonian(
            1,
            1,
            StateCost::Cos,
            1.0,
            &ControlSet::Explicit {
                points: vec![vec![-1.0], vec![0.0], vec![1.0]],
            },
        )
        .unwrap();
        let r = validate_hamiltonian(&h, 40, 4).unwrap();
        assert!(r.passed, "{r}");
        assert!(!r.psi_samples.is_empty());
        for (x, z, p) in &r.psi_samples {
            let brute = [-1.0f64, 0.0, 1.0]
                .iter()
                .map(|u| x[0].cos() + u * u + z[0] * u)
                .fold(f64::INFINITY, f64::min);
            assert_eq!(*p, brute);
        }
    }

    #[test]
    fn empty_grid_is_a_config_error() {
        let err = registry_hamiltonian(1, 1, StateCost::Cos, 0.0, &ControlSet::Explicit { points: vec![] }).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn non_finite_cost_names_control() {
        let h = HamiltonianSpec::new(
            "bad",
            1,
            vec![vec![0.0], vec![1.0]],
            1,
            Arc::new(|_x: &[f64], u: &[f64]| if u[0] > 0.5 { f64::NAN } else { 0.0 }),
            Arc::new(|u: &[f64]| u.to_vec()),
            1.0,
            1.0,
        )
        .unwrap();
        let err = psi_eval(&h, &[0.0], &[1.0]).unwrap_err();
        assert!(err.to_string().contains("[1.0]"));
    }

    #[test]
    fn batch_matches_pointwise() {
        for h in [three_point(1.0), cos_ball(21), cos_ball(21).with_closed_form(ClosedForm::BallLinear { delta: 0.5 }).unwrap()] {
            let xs: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 * 0.3 - 3.0]).collect();
            let z = DMatrix::from_fn(20, 1, |i, _| (i as f64 * 0.77).sin());
            let batch = PsiBatch::new(&h, &xs).unwrap();
            let mut out = vec![0.0; 20];
            batch.eval(&z, &mut out);
            for i in 0..20 {
                let p = psi(&h, &xs[i], &[z[(i, 0)]]).unwrap().psi;
                assert!((p - out[i]).abs() < 1e-14);
            }
        }
    }

    proptest! {
        #[test]
        fn concave_in_z(x in -3.0f64..3.0, z1 in -5.0f64..5.0, z2 in -5.0f64..5.0) {
            let h = three_point(1.0);
            let mid = psi_eval(&h, &[x], &[(z1 + z2) / 2.0]).unwrap().psi;
            let a = psi_eval(&h, &[x], &[z1]).unwrap().psi;
            let b = psi_eval(&h, &[x], &[z2]).unwrap().psi;
            prop_assert!(mid >= (a + b) / 2.0 - 1e-12);
        }

        #[test]
        fn infimum_property(x in -3.0f64..3.0, z in -5.0f64..5.0) {
            let h = cos_ball(21);
            let v = psi_eval(&h, &[x], &[z]).unwrap();
            for u in &h.control_grid {
                prop_assert!(v.psi <= x.cos() + z * u[0] + 1e-15);
            }
            let again = psi_eval(&h, &[x], &[z]).unwrap();
            prop_assert_eq!(v, again);
        }

        #[test]
        fn kz_bounded_by_max_r(x in -3.0f64..3.0, z1 in -5.0f64..5.0, z2 in -5.0f64..5.0) {
            let h = cos_ball(21);
            let a = psi_eval(&h, &[x], &[z1]).unwrap().psi;
            let b = psi_eval(&h, &[x], &[z2]).unwrap().psi;
            prop_assert!((a - b).abs() <= 0.5 * (z1 - z2).abs() + 1e-12);
        }
    }
}
