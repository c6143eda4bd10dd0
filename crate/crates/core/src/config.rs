//! Experiment configuration files.
//!
//! A configuration is a TOML document with a `[model]` table, an optional
//! `[hamiltonian]` table, and optional `[run]`, `[outputs]`, `[verify]` and
//! `[oracle]` tables. Every field of the optional tables has a default that
//! depends on the model. Parse and schema errors report line and column.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::error::{Error, Result};
use crate::hamiltonian::{registry_hamiltonian, ControlSet, StateCost};
use crate::heat::{self, HeatConfig, HeatReport};
use crate::model::{ClosedForm, HamiltonianSpec, InitSampling, ModelSpec, Nonlinearity, RadialLaw, RunConfig, StateVec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub hamiltonian: Option<HamiltonianSection>,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub outputs: OutputSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub oracle: OracleSection,
}

/// Nonlinear drift by registry name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearitySection {
    pub name: String,
    #[serde(default)]
    pub coefficients: Vec<f64>,
}

impl Default for NonlinearitySection {
    fn default() -> Self {
        Self {
            name: "zero".into(),
            coefficients: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSection {
    /// `dX = -X dt + noise dW`.
    OrnsteinUhlenbeck {
        #[serde(default = "one")]
        noise: f64,
    },
    /// `dX = (-eta X + F(X)) dt + noise dW`.
    Scalar {
        eta: f64,
        #[serde(default)]
        nonlinearity: NonlinearitySection,
        #[serde(default = "one")]
        noise: f64,
        #[serde(default = "three")]
        growth: u32,
    },
    /// `dX = (A X + F(X)) dt + G dW` with explicit matrices given by rows.
    Linear {
        drift: Vec<Vec<f64>>,
        noise: Vec<Vec<f64>>,
        eta: f64,
        #[serde(default)]
        nonlinearity: NonlinearitySection,
        #[serde(default = "three")]
        growth: u32,
    },
    /// Spectral Galerkin stochastic heat equation.
    Heat(HeatConfig),
}

fn one() -> f64 {
    1.0
}

fn three() -> u32 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianSection {
    pub cost: StateCost,
    #[serde(default)]
    pub control_weight: f64,
    #[serde(default = "no_controls")]
    pub controls: ControlSet,
    /// `"ball-linear"` selects the closed form over a ball control set.
    #[serde(default)]
    pub closed_form: Option<String>,
    /// Constant added to the running cost.
    #[serde(default)]
    pub shift: f64,
}

fn no_controls() -> ControlSet {
    ControlSet::None
}

/// Optional overrides of [`RunConfig`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub dt: Option<f64>,
    pub substeps: Option<usize>,
    pub n_steps: Option<usize>,
    pub n_paths: Option<usize>,
    pub seed: Option<u64>,
    pub basis: Option<BasisSpec>,
    pub alpha_schedule: Option<Vec<f64>>,
    pub tail_eps: Option<f64>,
    pub blowup_guard: Option<f64>,
    #[serde(default)]
    pub init: InitSection,
    #[serde(default)]
    pub tolerances: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    pub center: Option<Vec<f64>>,
    pub radius: Option<f64>,
    pub invariant_fraction: Option<f64>,
    pub radial_law: Option<RadialLaw>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// Points at which `vbar` is tabulated; a default line through the
    /// training ball is used when empty.
    #[serde(default)]
    pub query_points: Vec<Vec<f64>>,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            query_points: vec![],
        }
    }
}

/// Settings of the evaluation suite run by `verify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub residual_horizons: Vec<f64>,
    pub residual_points: Vec<Vec<f64>>,
    pub residual_paths: usize,
    pub eval_horizon: f64,
    pub eval_paths: usize,
    pub eval_dt: f64,
    pub characterization_samples: usize,
    /// Constant controls compared against the optimal feedback.
    pub constant_controls: Vec<Vec<f64>>,
    /// Seeds of the uniqueness re-solves; empty skips that check.
    pub uniqueness_seeds: Vec<u64>,
    /// Alternative centre of the initial ball for uniqueness re-solves.
    pub uniqueness_center: Option<Vec<f64>>,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            residual_horizons: vec![1.0, 2.0, 4.0],
            residual_points: vec![],
            residual_paths: 4000,
            eval_horizon: 40.0,
            eval_paths: 400,
            eval_dt: 0.01,
            characterization_samples: 4000,
            constant_controls: vec![],
            uniqueness_seeds: vec![],
            uniqueness_center: None,
        }
    }
}

/// Grid for the one-dimensional HJB oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub half_width: f64,
    pub nodes: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            half_width: 8.0,
            nodes: 1201,
        }
    }
}

/// A configuration resolved into library objects.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: ModelSpec,
    pub hamiltonian: HamiltonianSpec,
    pub run: RunConfig,
    pub heat_report: Option<HeatReport>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    pub fn build(&self) -> Result<Experiment> {
        let (model, hamiltonian, heat_report) = match &self.model {
            ModelSection::Heat(hc) => {
                if self.hamiltonian.is_some() {
                    return Err(Error::Config(
                        "the heat model builds its own Hamiltonian; remove the [hamiltonian] table".into(),
                    ));
                }
                let (m, h, rep) = heat::build(hc)?;
                (m, h, Some(rep))
            }
            other => {
                let model = build_model(other)?;
                let section = self
                    .hamiltonian
                    .as_ref()
                    .ok_or_else(|| Error::Config("missing [hamiltonian] table".into()))?;
                (model.clone(), build_hamiltonian(section, &model)?, None)
            }
        };
        let run = self.run_config(&model)?;
        for q in &self.outputs.query_points {
            if q.len() != model.dim {
                return Err(Error::Config(format!(
                    "query point {q:?} has dimension {}, model has {}",
                    q.len(),
                    model.dim
                )));
            }
        }
        Ok(Experiment {
            config: self.clone(),
            model,
            hamiltonian,
            run,
            heat_report,
        })
    }

    fn run_config(&self, model: &ModelSpec) -> Result<RunConfig> {
        let mut cfg = match &self.model {
            ModelSection::Heat(_) => heat_defaults(model.dim),
            _ if model.dim > 1 => {
                let mut c = RunConfig::default_for(model.dim);
                c.basis = BasisSpec::polynomial(4, 3.0);
                c
            }
            _ => RunConfig::default_for(model.dim),
        };
        let r = &self.run;
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = r.$f.clone() { cfg.$f = v; } )* };
        }
        set!(dt, substeps, n_steps, n_paths, seed, basis, alpha_schedule, tail_eps, blowup_guard);
        if let Some(c) = &r.init.center {
            cfg.init.center = c.clone();
        }
        if let Some(v) = r.init.radius {
            cfg.init.radius = v;
        }
        if let Some(v) = r.init.invariant_fraction {
            cfg.init.invariant_fraction = v;
        }
        if let Some(v) = r.init.radial_law {
            cfg.init.radial_law = v;
        }
        cfg.tolerances.extend(r.tolerances.iter().map(|(k, v)| (k.clone(), *v)));
        if cfg.init.center.len() != model.dim {
            return Err(Error::Config(format!(
                "run.init.center has dimension {}, model has {}",
                cfg.init.center.len(),
                model.dim
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn heat_defaults(dim: usize) -> RunConfig {
    RunConfig {
        dt: 0.01,
        substeps: 2,
        n_paths: 8000,
        basis: BasisSpec::polynomial(2, 1.0),
        alpha_schedule: vec![1.0, 0.5, 0.25],
        init: InitSampling {
            center: vec![0.0; dim],
            radius: 5.0,
            invariant_fraction: 0.95,
            radial_law: RadialLaw::Uniform,
        },
        ..RunConfig::default_for(dim)
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(Error::Config(format!("{what} must be a non-empty rectangular list of rows")));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn build_model(section: &ModelSection) -> Result<ModelSpec> {
    match section {
        ModelSection::OrnsteinUhlenbeck { noise } => ModelSpec::ornstein_uhlenbeck(*noise),
        ModelSection::Scalar {
            eta,
            nonlinearity,
            noise,
            growth,
        } => ModelSpec::scalar(
            *eta,
            Nonlinearity::from_registry(&nonlinearity.name, &nonlinearity.coefficients)?,
            *noise,
            *growth,
        ),
        ModelSection::Linear {
            drift,
            noise,
            eta,
            nonlinearity,
            growth,
        } => ModelSpec::new(
            matrix(drift, "model.drift")?,
            Nonlinearity::from_registry(&nonlinearity.name, &nonlinearity.coefficients)?,
            matrix(noise, "model.noise")?,
            *eta,
            *growth,
        ),
        ModelSection::Heat(_) => unreachable!("heat models are built with their Hamiltonian"),
    }
}

fn build_hamiltonian(section: &HamiltonianSection, model: &ModelSpec) -> Result<HamiltonianSpec> {
    let mut ham = registry_hamiltonian(
        model.dim,
        model.noise_dim,
        section.cost.clone(),
        section.control_weight,
        &section.controls,
    )?;
    match section.closed_form.as_deref() {
        None => {}
        Some("ball-linear") => {
            let ControlSet::Ball { delta, .. } = section.controls else {
                return Err(Error::Config("closed_form = \"ball-linear\" needs ball controls".into()));
            };
            ham = ham.with_closed_form(ClosedForm::BallLinear { delta })?;
        }
        Some(other) => {
            return Err(Error::Config(format!(
                "unknown closed form '{other}' (expected ball-linear)"
            )))
        }
    }
    if section.shift != 0.0 {
        ham = ham.shifted(section.shift);
    }
    Ok(ham)
}

impl Experiment {
    /// Query points for `vbar.csv`.
    pub fn query_points(&self) -> Result<Vec<StateVec>> {
        let q = &self.config.outputs.query_points;
        if !q.is_empty() {
            return q.iter().map(|p| StateVec::new(p.clone())).collect();
        }
        let r = self.run.init.radius;
        (0..=40)
            .map(|i| {
                let mut p = self.run.init.center.clone();
                p[0] += r * (i as f64 / 20.0 - 1.0);
                StateVec::new(p)
            })
            .collect()
    }

    pub fn is_one_dimensional(&self) -> bool {
        self.model.dim == 1 && self.model.noise_dim == 1
    }
}
