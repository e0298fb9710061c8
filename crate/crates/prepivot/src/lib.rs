//! Randomization inference with Gaussian prepivoting.
//!
//! This crate implements randomization tests for treatment effects in
//! finite-population experiments. The classical Fisher randomization test
//! holds the observed outcomes fixed and re-randomizes the assignment; it is
//! exact when treatment has exactly no effect on any unit (the sharp null)
//! but can badly over-reject when only the *average* effect is zero and
//! unit-level effects vary (the weak null).
//!
//! The engine here closes that gap by **prepivoting**: instead of ranking a
//! raw statistic T across assignments, it ranks g = G(T), where G is the CDF
//! of the statistic under a mean-zero Gaussian with the estimated covariance
//! of the scaled effect estimate, conditioned on the design's balance
//! criterion. Because G is a fixed monotone transform within each
//! assignment, the test keeps its finite-sample exactness under the sharp
//! null; because g is asymptotically uniform, the same test is
//! asymptotically conservative under the weak null.
//!
//! Supported designs: complete randomization, Mahalanobis-rerandomization,
//! matched pairs, and multi-arm trials with linear contrasts. Supported
//! statistics: studentized and unstudentized absolute differences in means,
//! quadratic forms in pooled or unpooled covariance estimates, studentized
//! maxima, and plain Euclidean norms, with optional regression adjustment.
//!
//! # Quick start
//!
//! ```
//! use nalgebra::DMatrix;
//! use prepivot::{
//!     randomization_test, AssignmentSpace, EstimatorSpec, ObservedStudy, TestConfig,
//! };
//!
//! // Six units, three treated; univariate outcomes, no covariates.
//! let outcomes = DMatrix::from_column_slice(6, 1, &[2.1, 1.4, 2.8, 0.3, 0.9, 0.2]);
//! let study = ObservedStudy::new(outcomes, vec![1, 1, 1, 0, 0, 0], DMatrix::zeros(6, 0))?;
//! let space = AssignmentSpace::cre(6, 3)?;
//! let cfg = TestConfig::new("dim", EstimatorSpec::Dim)?;
//! let report = randomization_test(&study, &space, &cfg)?;
//! assert!(report.p_value > 0.0 && report.p_value <= 1.0);
//! # Ok::<(), prepivot::Error>(())
//! ```
//!
//! Every Monte Carlo quantity is driven by counter-based substreams of a
//! single master seed, so any run is reproducible byte-for-byte at any
//! worker count.

pub mod covariance;
pub mod design;
pub mod error;
pub mod estimator;
pub mod frt;
pub mod gauss;
pub mod population;
pub mod rng;
pub mod sim;
pub mod statistic;

pub use covariance::{CovEstimate, PsdFactor};
pub use design::{AssignmentSpace, BalanceCriterion, SampleBatch};
pub use error::{Error, Result};
pub use estimator::EstimatorSpec;
pub use frt::{
    confidence_set, oracle_randomization_distribution, randomization_test,
    raw_statistic_test, ConfidenceSet, OmegaMode, ReferenceDistribution, TestConfig,
    TestReport,
};
pub use gauss::{GaussEngineConfig, GaussMethod, MethodUsed, PrepivotValue};
pub use population::{FinitePopulation, ObservedStudy};
pub use sim::{
    large_sample_test, run_scenario, EffectVariant, Scenario, ScenarioConfig,
    ScenarioResult,
};
pub use statistic::{Family, StatisticSpec, XiRecipe};
