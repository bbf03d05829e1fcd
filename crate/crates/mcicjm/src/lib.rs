//! Misclassification-corrected interval-censored cause-specific joint models.
//!
//! A library for jointly modelling a longitudinal biomarker and two competing
//! time-to-event outcomes where the primary event is interval-censored and
//! detected by an imperfect test. The survival likelihood mixes over the
//! scenarios in which earlier examinations missed the event, weighted by the
//! test sensitivity, which may be fixed or given a uniform prior.
//!
//! The crate bundles:
//!
//! * spline bases and P-spline penalties ([`spline`]),
//! * Gauss-Kronrod quadrature ([`quadrature`]),
//! * the data model and hazard evaluations ([`model`]),
//! * the corrected likelihood and priors ([`likelihood`]),
//! * a Metropolis-within-Gibbs sampler ([`sampler`]),
//! * a forward simulator for study-style datasets ([`simulator`]),
//! * nonparametric estimators and simulation metrics ([`metrics`]),
//! * dataset and posterior file I/O ([`io`]).

pub mod error;
pub mod io;
pub mod likelihood;
pub mod metrics;
pub mod model;
pub mod quadrature;
pub mod sampler;
pub mod simulator;
pub mod spline;
pub mod stats;

pub use error::{Error, Result};
