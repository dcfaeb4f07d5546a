//! Covariate-guided Bayesian product mixture models for populations of dynamic
//! brain networks.
//!
//! Two estimators share one mixture engine: [`idpac`] models edge-wise Fisher-z
//! pairwise correlations and [`idpmac`] models node-wise rows of subject-level
//! precision matrices. Both pool subjects through mixture priors whose atoms are
//! piecewise constant in time (fused lasso) and whose weights depend on
//! subject covariates through a multinomial logistic link. Post-processing
//! ([`changepoint`], [`subgroup`]), evaluation ([`metrics`]) and a synthetic
//! data generator ([`simgen`]) complete the pipeline.

pub mod changepoint;
pub mod data;
pub mod error;
pub mod graphs;
pub mod idpac;
pub mod idpmac;
pub mod io;
pub mod assignment;
pub mod kmeans;
pub mod lasso;
pub mod metrics;
pub mod mixture;
pub mod rng;
pub mod simgen;
pub mod subgroup;
pub mod window;

pub use data::{ClusterAssignment, DynamicNetworkSet, HyperParams, NetworkKind, PanelDataset};
pub use error::{Error, Result};
