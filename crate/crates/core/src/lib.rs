//! Joint Bayesian estimation of age-specific seroprevalence and infection
//! fatality rates from binned serology and death counts.

pub mod age_density;
pub mod data;
pub mod diagnostics;
pub mod model;
pub mod quadrature;
pub mod sampler;
pub mod spline;
pub mod summaries;
pub mod synthetic;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
