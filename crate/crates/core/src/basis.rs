//! Regression bases, centered ridge least squares and fitted functions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature family. The first feature is always the constant `1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BasisKind {
    /// Monomials of `x / scale` of total degree `<= degree` in the first
    /// `active_dims` coordinates (all when absent), linear in the rest,
    /// plus `|x / scale|^(2k)` for `2 <= k <= radial_degree`.
    Polynomial {
        degree: u32,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        active_dims: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        radial_degree: Option<u32>,
    },
    /// Tensor products of `{1, cos(k pi x / half_period), sin(k pi x / half_period)}`, `k <= modes`.
    Fourier { modes: u32, half_period: f64 },
    /// Gaussian bumps `exp(-|x - c|^2 / (2 bandwidth^2))`.
    Radial { centers: Vec<Vec<f64>>, bandwidth: f64 },
}

fn one() -> f64 {
    1.0
}

fn default_ridge() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    #[serde(flatten)]
    pub kind: BasisKind,
    /// Ridge penalty relative to the trace of the normalized Gram matrix.
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

impl BasisSpec {
    pub fn polynomial(degree: u32, scale: f64) -> Self {
        Self {
            kind: BasisKind::Polynomial {
                degree,
                scale,
                active_dims: None,
                radial_degree: None,
            },
            ridge: default_ridge(),
        }
    }

    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }
}

/// A basis bound to a state dimension.
#[derive(Debug, Clone)]
pub struct Basis {
    spec: BasisSpec,
    dim: usize,
    /// Exponent vectors for polynomial bases, frequency vectors for Fourier
    /// (`+k` cosine, `-k` sine, `0` constant).
    indices: Vec<Vec<i32>>,
    /// Number of trailing radial features of a polynomial basis.
    radial: usize,
}

fn multi_indices(dims: usize, degree: u32) -> Vec<Vec<i32>> {
    let mut out = vec![vec![0i32; dims]];
    for total in 1..=degree as i32 {
        let mut level = Vec::new();
        fill_level(dims, total, &mut vec![0; dims], 0, &mut level);
        out.extend(level);
    }
    out
}

fn fill_level(dims: usize, remaining: i32, cur: &mut Vec<i32>, pos: usize, out: &mut Vec<Vec<i32>>) {
    if pos == dims - 1 {
        cur[pos] = remaining;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    for k in (0..=remaining).rev() {
        cur[pos] = k;
        fill_level(dims, remaining - k, cur, pos + 1, out);
    }
    cur[pos] = 0;
}

impl Basis {
    pub fn new(spec: BasisSpec, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Basis("state dimension must be positive".into()));
        }
        if !(spec.ridge >= 0.0) {
            return Err(Error::Basis(format!("ridge must be nonnegative, got {}", spec.ridge)));
        }
        let indices = match &spec.kind {
            BasisKind::Polynomial {
                degree,
                scale,
                active_dims,
                ..
            } => {
                if !(*scale > 0.0) {
                    return Err(Error::Basis("polynomial scale must be positive".into()));
                }
                let active = active_dims.unwrap_or(dim).min(dim).max(1);
                let mut idx: Vec<Vec<i32>> = multi_indices(active, *degree)
                    .into_iter()
                    .map(|mut v| {
                        v.resize(dim, 0);
                        v
                    })
                    .collect();
                if *degree >= 1 {
                    for j in active..dim {
                        let mut v = vec![0; dim];
                        v[j] = 1;
                        idx.push(v);
                    }
                }
                idx
            }
            BasisKind::Fourier { modes, half_period } => {
                if !(*half_period > 0.0) {
                    return Err(Error::Basis("Fourier half period must be positive".into()));
                }
                let per_axis: Vec<i32> = std::iter::once(0)
                    .chain((1..=*modes as i32).flat_map(|k| [k, -k]))
                    .collect();
                let mut idx: Vec<Vec<i32>> = vec![vec![]];
                for _ in 0..dim {
                    idx = idx
                        .into_iter()
                        .flat_map(|v| {
                            per_axis.iter().map(move |k| {
                                let mut w = v.clone();
                                w.push(*k);
                                w
                            })
                        })
                        .collect();
                }
                idx
            }
            BasisKind::Radial { centers, bandwidth } => {
                if !(*bandwidth > 0.0) {
                    return Err(Error::Basis("radial bandwidth must be positive".into()));
                }
                if centers.iter().any(|c| c.len() != dim) {
                    return Err(Error::Basis(format!("radial centers must have length {dim}")));
                }
                Vec::new()
            }
        };
        let radial = match &spec.kind {
            BasisKind::Polynomial { radial_degree: Some(r), .. } => (*r as usize).saturating_sub(1),
            _ => 0,
        };
        Ok(Self { spec, dim, indices, radial })
    }

    /// Typical length over which the features vary.
    pub fn length_scale(&self) -> f64 {
        match &self.spec.kind {
            BasisKind::Polynomial { scale, .. } => *scale,
            BasisKind::Fourier { modes, half_period } => half_period / (std::f64::consts::PI * (*modes).max(1) as f64),
            BasisKind::Radial { bandwidth, .. } => *bandwidth,
        }
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        match &self.spec.kind {
            BasisKind::Radial { centers, .. } => 1 + centers.len(),
            _ => self.indices.len() + self.radial,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes the feature vector of `x` into `out` (length `len()`).
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        match &self.spec.kind {
            BasisKind::Polynomial { degree, scale, .. } => {
                let d = *degree as usize;
                let mut powers = vec![1.0; self.dim * (d + 1)];
                for (j, xj) in x.iter().enumerate() {
                    let s = xj / scale;
                    for k in 1..=d {
                        powers[j * (d + 1) + k] = powers[j * (d + 1) + k - 1] * s;
                    }
                }
                for (o, e) in out.iter_mut().zip(&self.indices) {
                    let mut v = 1.0;
                    for (j, &p) in e.iter().enumerate() {
                        if p > 0 {
                            v *= powers[j * (d + 1) + p as usize];
                        }
                    }
                    *o = v;
                }
                if self.radial > 0 {
                    let r2: f64 = x.iter().map(|v| (v / scale) * (v / scale)).sum();
                    let tail = &mut out[self.indices.len()..];
                    let mut v = r2;
                    for o in tail.iter_mut() {
                        v *= r2;
                        *o = v;
                    }
                }
            }
            BasisKind::Fourier { half_period, .. } => {
                let w = std::f64::consts::PI / half_period;
                for (o, e) in out.iter_mut().zip(&self.indices) {
                    let mut v = 1.0;
                    for (j, &k) in e.iter().enumerate() {
                        if k > 0 {
                            v *= (k as f64 * w * x[j]).cos();
                        } else if k < 0 {
                            v *= (-k as f64 * w * x[j]).sin();
                        }
                    }
                    *o = v;
                }
            }
            BasisKind::Radial { centers, bandwidth } => {
                out[0] = 1.0;
                let inv = 1.0 / (2.0 * bandwidth * bandwidth);
                for (o, c) in out[1..].iter_mut().zip(centers) {
                    let d2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                    *o = (-d2 * inv).exp();
                }
            }
        }
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval(x, &mut out);
        out
    }

    /// `n x p` design matrix.
    pub fn design(&self, xs: &[Vec<f64>]) -> DMatrix<f64> {
        let p = self.len();
        let mut m = DMatrix::zeros(xs.len(), p);
        let mut buf = vec![0.0; p];
        for (i, x) in xs.iter().enumerate() {
            self.eval(x, &mut buf);
            for (j, v) in buf.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        m
    }
}

/// Ridge regression on centered, column-normalized features; the intercept
/// (first feature) is not penalized, so constants are reproduced exactly.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    n: usize,
    p: usize,
    means: DVector<f64>,
    scales: DVector<f64>,
    /// Centered and normalized non-constant features, `n x (p-1)`.
    centered: DMatrix<f64>,
    chol: Option<nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>>,
    condition: f64,
}

/// Largest condition number accepted for the regularized normal matrix.
pub const CONDITION_GUARD: f64 = 1e12;

impl LeastSquares {
    pub fn new(design: &DMatrix<f64>, ridge: f64) -> Result<Self> {
        let (n, p) = design.shape();
        if p == 0 {
            return Err(Error::Basis("empty basis".into()));
        }
        if p * 10 > n {
            return Err(Error::Basis(format!(
                "{p} features need at least {} samples, got {n}",
                p * 10
            )));
        }
        let q = p - 1;
        let mut means = DVector::zeros(q);
        let mut scales = DVector::zeros(q);
        let mut centered = design.columns(1, q).into_owned();
        for j in 0..q {
            let mut col = centered.column_mut(j);
            let m = col.mean();
            col.add_scalar_mut(-m);
            let s = col.norm();
            if !(s > 1e-12 * (n as f64).sqrt() * (1.0 + m.abs())) {
                return Err(Error::Basis(format!("feature {} is constant on the sample", j + 1)));
            }
            col /= s;
            means[j] = m;
            scales[j] = s;
        }
        let (chol, condition) = if q == 0 {
            (None, 1.0)
        } else {
            let mut gram = centered.tr_mul(&centered);
            let shift = ridge * gram.trace();
            for j in 0..q {
                gram[(j, j)] += shift;
            }
            let eig = gram.clone().symmetric_eigenvalues();
            let lo = eig.min();
            let hi = eig.max();
            let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
            if !(condition <= CONDITION_GUARD) {
                return Err(Error::Basis(format!(
                    "ill-conditioned regression: condition number {condition:e} exceeds {CONDITION_GUARD:e}"
                )));
            }
            let chol = gram
                .cholesky()
                .ok_or_else(|| Error::Basis("normal matrix is not positive definite".into()))?;
            (Some(chol), condition)
        };
        Ok(Self {
            n,
            p,
            means,
            scales,
            centered,
            chol,
            condition,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn n_features(&self) -> usize {
        self.p
    }

    pub fn condition_number(&self) -> f64 {
        self.condition
    }

    /// Coefficients (in raw feature coordinates) for each column of `y`.
    pub fn fit_matrix(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(y.nrows(), self.n);
        let k = y.ncols();
        let mut out = DMatrix::zeros(self.p, k);
        let ybar: Vec<f64> = (0..k).map(|c| y.column(c).mean()).collect();
        if let Some(chol) = &self.chol {
            let rhs = self.centered.tr_mul(y);
            let beta = chol.solve(&rhs);
            for c in 0..k {
                let mut intercept = ybar[c];
                for j in 0..self.p - 1 {
                    let b = beta[(j, c)] / self.scales[j];
                    out[(j + 1, c)] = b;
                    intercept -= b * self.means[j];
                }
                out[(0, c)] = intercept;
            }
        } else {
            for c in 0..k {
                out[(0, c)] = ybar[c];
            }
        }
        out
    }

    pub fn fit(&self, y: &[f64]) -> DVector<f64> {
        let m = self.fit_matrix(&DMatrix::from_column_slice(self.n, 1, y));
        m.column(0).into_owned()
    }
}

/// Axis-aligned box around the training points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hull {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Hull {
    pub fn of(xs: &[Vec<f64>]) -> Self {
        let n = xs.first().map(|x| x.len()).unwrap_or(0);
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for x in xs {
            for j in 0..n {
                lo[j] = lo[j].min(x[j]);
                hi[j] = hi[j].max(x[j]);
            }
        }
        Self { lo, hi }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }
}

/// Value returned with an extrapolation flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluated<T> {
    pub value: T,
    pub extrapolated: bool,
}

/// `x -> sum_j c_j phi_j(x)` for `m` outputs, serializable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedFunction {
    pub basis: BasisSpec,
    pub dim: usize,
    /// `p x m`, row-major.
    pub coefficients: Vec<Vec<f64>>,
    pub hull: Hull,
    #[serde(skip)]
    cache: Option<Basis>,
}

impl FittedFunction {
    pub fn new(basis: &Basis, coefficients: &DMatrix<f64>, hull: Hull) -> Self {
        let rows = (0..coefficients.nrows())
            .map(|i| coefficients.row(i).iter().copied().collect())
            .collect();
        Self {
            basis: basis.spec().clone(),
            dim: basis.dim(),
            coefficients: rows,
            hull,
            cache: Some(basis.clone()),
        }
    }

    fn basis(&self) -> Basis {
        match &self.cache {
            Some(b) => b.clone(),
            None => Basis::new(self.basis.clone(), self.dim).expect("stored basis spec is valid"),
        }
    }

    /// Rebuilds the cached basis after deserialization.
    pub fn prepare(&mut self) -> Result<()> {
        self.cache = Some(Basis::new(self.basis.clone(), self.dim)?);
        Ok(())
    }

    pub fn outputs(&self) -> usize {
        self.coefficients.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let feats = match &self.cache {
            Some(b) => b.features(x),
            None => self.basis().features(x),
        };
        let m = self.outputs();
        let mut out = vec![0.0; m];
        for (f, row) in feats.iter().zip(&self.coefficients) {
            for (o, c) in out.iter_mut().zip(row) {
                *o += f * c;
            }
        }
        out
    }

    pub fn eval_scalar(&self, x: &[f64]) -> f64 {
        self.eval(x)[0]
    }

    pub fn eval_flagged(&self, x: &[f64]) -> Evaluated<Vec<f64>> {
        Evaluated {
            value: self.eval(x),
            extrapolated: !self.hull.contains(x),
        }
    }

    /// Adds `shift` to the constant coefficient of output `k`.
    pub fn shift_constant(&mut self, k: usize, shift: f64) {
        self.coefficients[0][k] += shift;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Domain};

    #[test]
    fn polynomial_feature_counts() {
        let b = Basis::new(BasisSpec::polynomial(3, 1.0), 2).unwrap();
        assert_eq!(b.len(), 10);
        let b = Basis::new(
            BasisSpec {
                kind: BasisKind::Polynomial {
                    degree: 2,
                    scale: 1.0,
                    active_dims: Some(2),
                    radial_degree: None,
                },
                ridge: 0.0,
            },
            5,
        )
        .unwrap();
        assert_eq!(b.len(), 6 + 3);
        let r = Basis::new(
            BasisSpec {
                kind: BasisKind::Polynomial {
                    degree: 2,
                    scale: 2.0,
                    active_dims: None,
                    radial_degree: Some(3),
                },
                ridge: 0.0,
            },
            2,
        )
        .unwrap();
        assert_eq!(r.len(), 6 + 2);
        assert_eq!(&r.features(&[2.0, 2.0])[6..], &[4.0, 8.0]);
        let f = Basis::new(
            BasisSpec {
                kind: BasisKind::Fourier {
                    modes: 2,
                    half_period: 3.0,
                },
                ridge: 0.0,
            },
            2,
        )
        .unwrap();
        assert_eq!(f.len(), 25);
        assert_eq!(f.features(&[0.4, -1.0])[0], 1.0);
    }

    #[test]
    fn polynomial_values() {
        let b = Basis::new(BasisSpec::polynomial(2, 2.0), 2).unwrap();
        let f = b.features(&[2.0, 4.0]);
        // 1, then degree one (x, y), then (x^2, xy, y^2) in scaled units
        assert_eq!(f, vec![1.0, 1.0, 2.0, 1.0, 2.0, 4.0]);
    }

    fn sample(n: usize) -> Vec<Vec<f64>> {
        let mut r = rng::stream(4, Domain::Probes, 0);
        (0..n).map(|_| rng::uniform_ball(&mut r, &[0.0], 2.0)).collect()
    }

    #[test]
    fn recovers_polynomials_and_constants() {
        let xs = sample(500);
        let b = Basis::new(BasisSpec::polynomial(3, 1.0), 1).unwrap();
        let ls = LeastSquares::new(&b.design(&xs), 1e-8).unwrap();
        let y: Vec<f64> = xs.iter().map(|x| 1.0 - 2.0 * x[0] + 0.5 * x[0].powi(3)).collect();
        let c = ls.fit(&y);
        assert!((c[0] - 1.0).abs() < 1e-5 && (c[1] + 2.0).abs() < 1e-5 && (c[3] - 0.5).abs() < 1e-5, "{c}");
        let c = ls.fit(&vec![7.25; xs.len()]);
        assert!((c[0] - 7.25).abs() < 1e-12);
        assert!(c.iter().skip(1).all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn underdetermined_basis_is_rejected() {
        let xs = sample(50);
        let b = Basis::new(BasisSpec::polynomial(8, 1.0), 1).unwrap();
        assert!(matches!(LeastSquares::new(&b.design(&xs), 1e-8), Err(Error::Basis(_))));
    }

    #[test]
    fn collinear_features_trip_the_guard() {
        let xs = sample(400);
        let b = Basis::new(
            BasisSpec {
                kind: BasisKind::Radial {
                    centers: vec![vec![0.5], vec![0.5 + 1e-9]],
                    bandwidth: 1.0,
                },
                ridge: 0.0,
            },
            1,
        )
        .unwrap();
        let err = LeastSquares::new(&b.design(&xs), 0.0).unwrap_err();
        assert!(err.to_string().contains("ill-conditioned"));
        // a ridge restores a usable fit
        assert!(LeastSquares::new(&b.design(&xs), 1e-8).is_ok());
    }

    #[test]
    fn fitted_function_roundtrip_and_hull() {
        let xs = sample(300);
        let b = Basis::new(BasisSpec::polynomial(2, 1.0), 1).unwrap();
        let ls = LeastSquares::new(&b.design(&xs), 1e-8).unwrap();
        let y: Vec<f64> = xs.iter().map(|x| x[0] * x[0]).collect();
        let c = ls.fit(&y);
        let f = FittedFunction::new(&b, &DMatrix::from_column_slice(3, 1, c.as_slice()), Hull::of(&xs));
        let json = serde_json::to_string(&f).unwrap();
        let mut g: FittedFunction = serde_json::from_str(&json).unwrap();
        g.prepare().unwrap();
        assert_eq!(f.eval(&[0.3]), g.eval(&[0.3]));
        assert!(!g.eval_flagged(&[0.5]).extrapolated);
        assert!(g.eval_flagged(&[5.0]).extrapolated);
    }
}
