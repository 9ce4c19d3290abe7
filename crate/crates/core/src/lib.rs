//! Confidence regions for primary parameters estimated with nuisance
//! parameters fixed at values taken from an independent source.
//!
//! The uncertainty of the nuisance estimate is carried into the primary
//! covariance as `V_θ/n + D₁ (V_α/m) D₁ᵀ`; see [`adjust`]. Three model
//! families use it: exponential regression ([`expreg`]), GARCH(1,1)
//! ([`garch`]) and a bias-free feed-forward network ([`mlp`]).

pub mod adjust;
pub mod backend;
pub mod data;
pub mod error;
pub mod expreg;
pub mod garch;
pub mod harness;
pub mod mlp;
pub mod numcore;

pub use adjust::{
    adjusted_covariance, confidence_ellipse, delta_method_ci, ellipse_contains, sensitivity_d1, CovariancePair,
    EllipseSpec, Interval, ParamPartition, QuantileRule, SensitivityMatrix,
};
pub use backend::ModelBackend;
pub use data::Dataset;
pub use error::{Error, Result};
pub use expreg::{ExpRegData, ExpRegParams};
pub use garch::{GarchParams, ReturnSeries};
pub use harness::{CoverageSummary, GarchCasesReport, NnDepthReport};
pub use mlp::{BiasPosterior, MlpSpec, NetParams, PredictionCi};
pub use numcore::{DiffPlan, Mat, Vector};
