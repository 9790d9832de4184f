//! Randomization-based "as-if" analysis of experiments.
//!
//! A [`Design`] is a discrete distribution over treatment assignment vectors.
//! A [`DesignMap`] sends each observed assignment to the design used for
//! analysis. The [`oracle`] module builds confidence intervals from the exact
//! randomization distribution of `tau_hat(Z) - tau` under that analysis design
//! and measures how often they cover over the design that was actually run.
//!
//! Everything is finite and exact where the support is enumerable; Monte Carlo
//! paths take an explicit seed and derive one random stream per work item so
//! results never depend on the number of worker threads.

pub mod design_maps;
pub mod designs;
pub mod error;
pub mod estimators;
pub mod fuzzy;
pub mod matching;
pub mod oracle;
pub mod population;
pub mod relevance;
pub mod rng;

pub use design_maps::{
    is_conditional, partition_from_statistic, unique_balance_violation, Cell, CellKey,
    ConditionalityVerdict, DesignMap, Statistic, StochasticDraw, Violation, ViolationKind,
    WindowSegment,
};
pub use designs::{Admissibility, Design, DesignSpec, DEFAULT_ENUMERATION_CAP};
pub use error::{Error, Result};
pub use estimators::Estimator;
pub use fuzzy::{fuzzy_interval, FuzzyInterval, FuzzyMode};
pub use matching::{GreedyMatcher, Matcher, Matching};
pub use oracle::{
    coverage, coverage_profile, oracle_interval, oracle_quantiles, sampling_distribution,
    variance_decomposition_check, CellRow, CoverageMode, CoverageProfile, CoverageReport,
    DistributionMode, OracleInterval, QuantileInfo, SamplingDistribution,
};
pub use population::{Assignment, Blocks, Covariates, Estimand, Population};

/// Absolute tolerance used when comparing probabilities and tail sums.
pub const PROB_TOL: f64 = 1e-12;
