//! Ergodic BSDEs for dissipative stochastic systems: forward simulation,
//! discounted BSDE regression, the vanishing-discount limit, a 1-D grid
//! oracle, ergodic cost evaluation and a spectral heat-equation model.

pub mod basis;
pub mod config;
pub mod discount;
pub mod ergodic;
pub mod error;
pub mod export;
pub mod forward;
pub mod grid;
pub mod hamiltonian;
pub mod heat;
pub mod model;
pub mod rng;
pub mod stats;
pub mod vanishing;

pub use basis::{Basis, BasisKind, BasisSpec, FittedFunction};
pub use config::{Experiment, ExperimentConfig};
pub use discount::{check_discount_bounds, solve_discounted, DiscountScheme, DiscountSolution};
pub use error::{Error, Result};
pub use hamiltonian::{psi, psi_eval, registry_hamiltonian, validate_hamiltonian, ControlSet, StateCost};
pub use model::{validate_model, ClosedForm, HamiltonianSpec, ModelSpec, Nonlinearity, RunConfig, StateVec, ValidationReport};
pub use vanishing::{run_schedule, EbsdeSolution};
