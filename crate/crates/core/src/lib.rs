//! Sparse latent covariate-driven factorization of symmetric connectivity
//! matrices.
//!
//! Each subject's `V x V` matrix is modeled as `sum_l a_l u_l u_l^T + E`,
//! with scores `a_l = x^T beta_l + delta` that carry covariate and site
//! effects. Estimation is a penalized EM; the loadings `U` are sparse.

pub mod config;
pub mod dataset;
pub mod em;
pub mod error;
pub mod estep;
pub mod harmonize;
pub mod likelihood;
pub mod mstep;
pub mod params;
pub mod selection;
pub mod simulation;
pub mod symmetric;
pub mod ustep;

pub use config::{AdmmConfig, FitConfig, UObjective};
pub use dataset::{ConnectivityDataset, DatasetOptions, ValidationReport, Violation};
pub use em::{canonicalize, fit, fit_fixed_loadings, FitResult, IterationRecord};
pub use error::{Result, SlaccError};
pub use harmonize::{DesignSpec, HarmonizationModel, HarmonizedOutput};
pub use likelihood::{nll, Nll};
pub use params::{ParameterSet, PosteriorMoments};
pub use selection::{degrees_of_freedom, ebic, select_l, Selection};
pub use symmetric::DiagonalMode;
