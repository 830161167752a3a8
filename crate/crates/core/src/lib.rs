//! Exact marginal likelihood of two-way tables with fixed margins, and
//! ecological-inference estimators built on it.
//!
//! - [`tables`]: margins, tables and exhaustive enumeration of the fiber.
//! - [`extreme`]: permutation-driven extreme tables and their ε-completion.
//! - [`likelihood`]: parametrization, per-unit likelihood and score.
//! - [`estimators`]: regression, independence and Fisher-scoring fits.
//! - [`scan`] and [`simulate`]: single-unit scans and synthetic data.
//!
//! Heavy loops go through a small data-parallel layer that uses rayon with
//! the default `parallel` feature and plain iterators without it.

pub mod estimators;
pub mod extreme;
pub mod likelihood;
pub mod par;
pub mod scan;
pub mod simulate;
pub mod tables;

pub use estimators::{
    fisher_scoring, goodman, independence_fit, ipf_adjust, metric_m, metric_me, EstimateError,
    FisherOptions, FitResult, GoodmanResult,
};
pub use extreme::{
    build_extreme, enumerate_extremes, epsilon_complete, ExtremeError, ExtremeTable,
    PermutationPair, XiLogOdds,
};
pub use likelihood::{
    dataset_loglik, dataset_score, inverse_link, link, marginal_loglik, unit_score, CondProbMatrix,
    EIDataset, LikelihoodError, ParamVector,
};
pub use tables::{
    count_tables, enumerate_tables, FreqTable, MarginPair, TableCollection, TableError,
};
