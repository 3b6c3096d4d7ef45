//! Empirical-likelihood comparison of treatments in repeated-measures studies with dropout.
//!
//! Covariate effects and interaction effects are compared across treatments with
//! chi-square calibrated empirical-likelihood ratios; baseline time curves are
//! compared with an integrated local statistic calibrated by a wild bootstrap.
//! Missing responses enter through inverse-probability weights from a fitted
//! dropout model.

pub mod bandwidth;
pub mod bootstrap;
pub mod covariate;
pub mod data;
pub mod dist;
pub mod el;
pub mod error;
pub mod frame;
pub mod kernel;
pub mod propensity;
pub mod quadrature;
pub mod report;
pub mod rng;
pub mod sim;
pub mod time_effect;

pub use bootstrap::{BootstrapConfig, WildDist};
pub use covariate::CovariateConfig;
pub use data::{
    CsvSchema, InteractionRule, ObservationRecord, Study, SubjectTrajectory, TreatmentSample,
};
pub use error::{Error, Result};
pub use kernel::Kernel;
pub use propensity::{FeatureRule, PropensityFit, PropensitySpec};
pub use report::{NullDistribution, ReportMeta, TestReport};
pub use time_effect::{IntegratedStatConfig, WeightFn};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
