//! The randomization-test engine.
//!
//! A test of the sharp null with shift c imputes the full potential-outcome
//! schedule from the observed data, then recomputes the (optionally
//! prepivoted) statistic under every assignment of the design — the whole
//! space when it is enumerable, otherwise a uniform sample. The p-value is
//! the fraction of assignments whose value weakly exceeds the observed one;
//! in sampled mode the observed assignment is counted once in both numerator
//! and denominator so the p-value can never be zero.
//!
//! Comparisons use the raw `≥` on floating-point values with no epsilon:
//! the exactness guarantee is a counting argument over ties and any slack
//! would break it.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::design::{AssignmentSpace, DEFAULT_ENUM_CAP};
use crate::error::{Error, Result};
use crate::estimator::EstimatorSpec;
use crate::gauss::{
    prepivot_assignment, statistic_for_assignment, AssignmentProblem, GaussEngineConfig,
    MethodUsed,
};
use crate::population::{FinitePopulation, ObservedStudy};
use crate::statistic::StatisticSpec;

/// How the assignment space is traversed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OmegaMode {
    /// Enumerate the whole space (subject to the enumeration cap).
    Exact,
    /// Draw this many assignments uniformly from the space.
    Sampled { draws: usize },
}

/// Everything a single randomization test needs besides data and design.
#[derive(Debug, Clone)]
pub struct TestConfig {
    pub statistic: StatisticSpec,
    /// User-facing statistic name, echoed into reports.
    pub statistic_name: String,
    pub estimator: EstimatorSpec,
    pub mode: OmegaMode,
    pub alpha: f64,
    pub gauss: GaussEngineConfig,
    /// `true` runs the prepivoted test; `false` compares raw statistics.
    pub prepivot: bool,
    /// Sharp-null shift c per outcome coordinate; `None` means zero.
    pub null_shift: Option<DVector<f64>>,
    /// Upper bound on enumerable cardinality in exact mode.
    pub enum_cap: u128,
}

impl TestConfig {
    /// A prepivoted exact-mode test at level 0.05 with default Gaussian
    /// settings.
    pub fn new(statistic_name: &str, estimator: EstimatorSpec) -> Result<Self> {
        Ok(Self {
            statistic: StatisticSpec::from_name(statistic_name)?,
            statistic_name: statistic_name.to_string(),
            estimator,
            mode: OmegaMode::Exact,
            alpha: 0.05,
            gauss: GaussEngineConfig::default(),
            prepivot: true,
            null_shift: None,
            enum_cap: DEFAULT_ENUM_CAP,
        })
    }
}

/// The per-assignment values the test ranks (g in prepivoted tests, raw T
/// otherwise).
#[derive(Debug, Clone)]
pub struct ReferenceDistribution {
    pub values: Vec<f64>,
    /// "exact" or "sampled".
    pub mode: &'static str,
    /// Whether `values` contains the observed assignment's value.
    pub includes_observed: bool,
}

impl ReferenceDistribution {
    /// The values in nondecreasing order.
    pub fn sorted(&self) -> Vec<f64> {
        let mut v = self.values.clone();
        v.sort_by(f64::total_cmp);
        v
    }
}

/// Five-point summary of the reference distribution for reports.
#[derive(Debug, Clone, Serialize)]
pub struct ReferenceSummary {
    pub mode: String,
    pub size: usize,
    pub includes_observed: bool,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl ReferenceSummary {
    fn from(reference: &ReferenceDistribution) -> Self {
        let sorted = reference.sorted();
        Self {
            mode: reference.mode.to_string(),
            size: sorted.len(),
            includes_observed: reference.includes_observed,
            min: sorted[0],
            median: sorted[sorted.len() / 2],
            max: sorted[sorted.len() - 1],
        }
    }
}

/// Reproducibility and numerical-route bookkeeping for one test run.
#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub seed: u64,
    pub gauss_method: String,
    pub draws_gauss: usize,
    pub draws_omega: Option<usize>,
    /// Cardinality of the traversed space (exact mode), as a string to stay
    /// JSON-safe for very large designs.
    pub omega_cardinality: Option<String>,
    /// Count of pushforward evaluations per computation route.
    pub routes: BTreeMap<String, u64>,
    /// How many covariance estimates needed the eigenvalue-floor repair.
    pub covariance_repairs: u64,
    /// How many statistic parameters η̂ needed the repair.
    pub eta_repairs: u64,
    /// Balance acceptance rate of the design sampler, when sampling ran.
    pub acceptance_rate: Option<f64>,
}

/// The outcome of one randomization test.
#[derive(Debug, Clone, Serialize)]
pub struct TestReport {
    pub design: String,
    pub statistic: String,
    pub estimator: String,
    pub prepivoted: bool,
    pub mode: String,
    pub n_units: usize,
    pub alpha: f64,
    /// Raw statistic T at the observed assignment.
    pub observed_statistic: f64,
    /// Prepivoted value g at the observed assignment (prepivoted tests).
    pub g_observed: Option<f64>,
    /// The large-sample companion p-value 1 − g_z (prepivoted tests).
    pub large_sample_p: Option<f64>,
    pub p_value: f64,
    pub reject: bool,
    pub reference_summary: ReferenceSummary,
    pub diagnostics: Diagnostics,
    /// Full reference distribution, available to library callers but kept
    /// out of serialized reports.
    #[serde(skip)]
    pub reference: ReferenceDistribution,
}

/// Outcomes with the hypothesized constant effect removed: ỹ_i = y_i − c·z_i.
///
/// Testing the shift-c sharp null on y is the same as testing the zero-effect
/// null on ỹ, whose schedule is fixed across assignments; the statistic for
/// the observed assignment then measures τ̂ − c, so test inversion is
/// translation-equivariant by construction.
struct NullOutcomes {
    outcomes: DMatrix<f64>,
}

impl NullOutcomes {
    fn build(study: &ObservedStudy, shift: &DVector<f64>) -> Result<Self> {
        let d = study.outcome_dim();
        if shift.len() != d {
            return Err(Error::Validation(format!(
                "null shift has length {} but outcomes have dimension {d}",
                shift.len()
            )));
        }
        let mut outcomes = study.outcomes().clone();
        if study.is_binary() {
            for i in 0..study.n_units() {
                if study.assignment()[i] == 1 {
                    for j in 0..d {
                        outcomes[(i, j)] -= shift[j];
                    }
                }
            }
        } else if shift.amax() != 0.0 {
            return Err(Error::Unsupported(
                "multi-arm tests support the zero sharp null only".into(),
            ));
        }
        Ok(Self { outcomes })
    }

    fn under(&self, _w: &[u8]) -> &DMatrix<f64> {
        &self.outcomes
    }
}

/// Small per-assignment diagnostic record.
#[derive(Debug, Clone, Copy)]
struct EvalDiag {
    route: Option<MethodUsed>,
    cov_repaired: bool,
    eta_repaired: bool,
}

/// One evaluated assignment: raw statistic, ranked value, diagnostics.
struct Evaluated {
    t: f64,
    value: f64,
    diag: EvalDiag,
}

fn evaluate_assignment(
    outcomes: &DMatrix<f64>,
    prob: &AssignmentProblem<'_>,
    w: &[u8],
    cfg: &TestConfig,
    stream_index: u64,
) -> Result<Evaluated> {
    if cfg.prepivot {
        let (stat, value) = prepivot_assignment(outcomes, prob, w, &cfg.gauss, stream_index)?;
        Ok(Evaluated {
            t: stat.t,
            value: value.g,
            diag: EvalDiag {
                route: Some(value.method_used),
                cov_repaired: value.covariance_repaired,
                eta_repaired: stat.eta_repaired,
            },
        })
    } else {
        let stat = statistic_for_assignment(outcomes, prob, w)?;
        Ok(Evaluated {
            t: stat.t,
            value: stat.t,
            diag: EvalDiag {
                route: None,
                cov_repaired: false,
                eta_repaired: stat.eta_repaired,
            },
        })
    }
}

fn design_label(space: &AssignmentSpace) -> &'static str {
    match space {
        AssignmentSpace::Cre { .. } => "cre",
        AssignmentSpace::Rerandomized { .. } => "rerandomized",
        AssignmentSpace::Paired { .. } => "paired",
        AssignmentSpace::MultiArm { .. } => "multiarm",
    }
}

fn estimator_label(estimator: &EstimatorSpec) -> &'static str {
    match estimator {
        EstimatorSpec::Dim => "dim",
        EstimatorSpec::LinAdjusted => "lin-adjusted",
        EstimatorSpec::Paired => "paired",
        EstimatorSpec::Contrast(_) => "contrast",
    }
}

fn gauss_method_label(cfg: &GaussEngineConfig) -> &'static str {
    match cfg.method {
        crate::gauss::GaussMethod::Auto => "auto",
        crate::gauss::GaussMethod::ClosedForm => "closed",
        crate::gauss::GaussMethod::MonteCarlo => "mc",
    }
}

/// Run a randomization test of the sharp null on the observed study.
///
/// In exact mode every assignment of the space is evaluated and
/// p = |{w : value_w ≥ value_z}| / |Ω|; in sampled mode B draws are
/// evaluated and p = (1 + #{value_w ≥ value_z}) / (B + 1).
pub fn randomization_test(
    study: &ObservedStudy,
    space: &AssignmentSpace,
    cfg: &TestConfig,
) -> Result<TestReport> {
    if study.n_units() != space.n_units() {
        return Err(Error::Validation(format!(
            "study has {} units but the design has {}",
            study.n_units(),
            space.n_units()
        )));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::Validation(format!(
            "alpha {} must lie strictly inside (0, 1)",
            cfg.alpha
        )));
    }
    if !space.is_member(study.assignment())? {
        return Err(Error::InvalidDesign(
            "the observed assignment is not a member of the declared design".into(),
        ));
    }
    let d = study.outcome_dim();
    let shift = cfg
        .null_shift
        .clone()
        .unwrap_or_else(|| DVector::zeros(d));
    let imputed = NullOutcomes::build(study, &shift)?;
    let scale_units = match space {
        AssignmentSpace::Paired { n_pairs } => *n_pairs as f64,
        _ => study.n_units() as f64,
    };
    let prob = AssignmentProblem {
        covariates: study.covariates(),
        criterion: space.criterion(),
        estimator: &cfg.estimator,
        statistic: &cfg.statistic,
        n_arms: study.n_arms(),
        scale_units,
    };

    let mut acceptance_rate = None;
    let (evaluated, observed_pos, mode_label, draws_omega, cardinality, includes_observed);
    match cfg.mode {
        OmegaMode::Exact => {
            let all = space.enumerate(cfg.enum_cap)?;
            let pos = all
                .iter()
                .position(|w| w.as_slice() == study.assignment())
                .ok_or_else(|| {
                    Error::InvalidDesign(
                        "observed assignment missing from the enumerated space".into(),
                    )
                })?;
            // Every assignment, the observed one included, is evaluated at
            // the substream given by its enumeration position, so the map
            // w ↦ value is a fixed function of the seed alone.
            let results: Result<Vec<Evaluated>> = all
                .par_iter()
                .enumerate()
                .map(|(j, w)| {
                    evaluate_assignment(imputed.under(w), &prob, w, cfg, j as u64)
                })
                .collect();
            evaluated = results?;
            observed_pos = pos;
            mode_label = "exact";
            draws_omega = None;
            cardinality = Some(all.len() as u128);
            includes_observed = true;
        }
        OmegaMode::Sampled { draws } => {
            if draws == 0 {
                return Err(Error::Validation(
                    "sampled mode needs at least one draw".into(),
                ));
            }
            let batch = space.sample_uniform(draws, cfg.gauss.seed)?;
            acceptance_rate = Some(batch.acceptance_rate());
            // The observed assignment runs first on substream 0; sampled
            // assignments use substreams 1..=draws.
            let mut work: Vec<(u64, &[u8])> = Vec::with_capacity(draws + 1);
            work.push((0, study.assignment()));
            for (j, w) in batch.assignments.iter().enumerate() {
                work.push((j as u64 + 1, w.as_slice()));
            }
            let results: Result<Vec<Evaluated>> = work
                .par_iter()
                .map(|(idx, w)| {
                    evaluate_assignment(imputed.under(w), &prob, w, cfg, *idx)
                })
                .collect();
            evaluated = results?;
            observed_pos = 0;
            mode_label = "sampled";
            draws_omega = Some(draws);
            cardinality = space.cardinality();
            includes_observed = false;
        }
    }

    let observed = &evaluated[observed_pos];
    let observed_t = observed.t;
    let observed_value = observed.value;

    // Reference values exclude the observed slot in sampled mode.
    let reference_values: Vec<f64> = match cfg.mode {
        OmegaMode::Exact => evaluated.iter().map(|e| e.value).collect(),
        OmegaMode::Sampled { .. } => evaluated[1..].iter().map(|e| e.value).collect(),
    };
    let count = reference_values
        .iter()
        .filter(|&&v| v >= observed_value)
        .count();
    let p_value = match cfg.mode {
        OmegaMode::Exact => count as f64 / reference_values.len() as f64,
        OmegaMode::Sampled { .. } => (1 + count) as f64 / (reference_values.len() + 1) as f64,
    };

    let mut routes = BTreeMap::new();
    let mut covariance_repairs = 0u64;
    let mut eta_repairs = 0u64;
    for e in &evaluated {
        if let Some(route) = e.diag.route {
            *routes.entry(route.as_str().to_string()).or_insert(0) += 1;
        }
        covariance_repairs += u64::from(e.diag.cov_repaired);
        eta_repairs += u64::from(e.diag.eta_repaired);
    }

    let reference = ReferenceDistribution {
        values: reference_values,
        mode: mode_label,
        includes_observed,
    };
    Ok(TestReport {
        design: design_label(space).to_string(),
        statistic: cfg.statistic_name.clone(),
        estimator: estimator_label(&cfg.estimator).to_string(),
        prepivoted: cfg.prepivot,
        mode: mode_label.to_string(),
        n_units: study.n_units(),
        alpha: cfg.alpha,
        observed_statistic: observed_t,
        g_observed: cfg.prepivot.then_some(observed_value),
        large_sample_p: cfg.prepivot.then_some(1.0 - observed_value),
        p_value,
        reject: p_value <= cfg.alpha,
        reference_summary: ReferenceSummary::from(&reference),
        diagnostics: Diagnostics {
            seed: cfg.gauss.seed,
            gauss_method: gauss_method_label(&cfg.gauss).to_string(),
            draws_gauss: cfg.gauss.draws,
            draws_omega,
            omega_cardinality: cardinality.map(|c| c.to_string()),
            routes,
            covariance_repairs,
            eta_repairs,
            acceptance_rate,
        },
        reference,
    })
}

/// The classical randomization test on the raw statistic, no prepivoting.
pub fn raw_statistic_test(
    study: &ObservedStudy,
    space: &AssignmentSpace,
    cfg: &TestConfig,
) -> Result<TestReport> {
    let mut raw_cfg = cfg.clone();
    raw_cfg.prepivot = false;
    randomization_test(study, space, &raw_cfg)
}

/// Distribution of the raw statistic over the design using the TRUE
/// potential outcomes of a fully known population (oracle/simulation use).
pub fn oracle_randomization_distribution(
    pop: &FinitePopulation,
    space: &AssignmentSpace,
    cfg: &TestConfig,
) -> Result<ReferenceDistribution> {
    let n = pop.n_units();
    if n != space.n_units() {
        return Err(Error::Validation(
            "population and design disagree on the unit count".into(),
        ));
    }
    let covariates = pop.covariates().clone();
    let scale_units = match space {
        AssignmentSpace::Paired { n_pairs } => *n_pairs as f64,
        _ => n as f64,
    };
    let prob = AssignmentProblem {
        covariates: &covariates,
        criterion: space.criterion(),
        estimator: &cfg.estimator,
        statistic: &cfg.statistic,
        n_arms: 2,
        scale_units,
    };
    let realize = |w: &[u8]| -> DMatrix<f64> {
        let d = pop.outcome_dim();
        DMatrix::from_fn(n, d, |i, j| {
            if w[i] == 1 {
                pop.y1()[(i, j)]
            } else {
                pop.y0()[(i, j)]
            }
        })
    };
    match cfg.mode {
        OmegaMode::Exact => {
            let all = space.enumerate(cfg.enum_cap)?;
            let values: Result<Vec<f64>> = all
                .par_iter()
                .map(|w| Ok(statistic_for_assignment(&realize(w), &prob, w)?.t))
                .collect();
            Ok(ReferenceDistribution {
                values: values?,
                mode: "exact",
                includes_observed: false,
            })
        }
        OmegaMode::Sampled { draws } => {
            let batch = space.sample_uniform(draws, cfg.gauss.seed)?;
            let values: Result<Vec<f64>> = batch
                .assignments
                .par_iter()
                .map(|w| Ok(statistic_for_assignment(&realize(w), &prob, w)?.t))
                .collect();
            Ok(ReferenceDistribution {
                values: values?,
                mode: "sampled",
                includes_observed: false,
            })
        }
    }
}

/// A confidence set produced by grid inversion of sharp-null tests.
#[derive(Debug, Clone, Serialize)]
pub struct ConfidenceSet {
    pub alpha: f64,
    /// The grid points tested, in the order given.
    pub grid: Vec<f64>,
    /// The p-value of H_{F,c} at each grid point.
    pub p_values: Vec<f64>,
    /// Grid points with p(c) > alpha.
    pub accepted: Vec<f64>,
    /// Whether the accepted set is contiguous on the grid.
    pub is_interval: bool,
    /// Set when the accepted set is empty (grid likely too narrow).
    pub warning: Option<String>,
}

/// Invert the family of shifted sharp-null tests over a grid of constants.
///
/// Every grid point reuses the same master seed, so the accepted set is a
/// deterministic function of (data, design, config, grid).
pub fn confidence_set(
    study: &ObservedStudy,
    space: &AssignmentSpace,
    cfg: &TestConfig,
    grid: &[f64],
) -> Result<ConfidenceSet> {
    if study.outcome_dim() != 1 {
        return Err(Error::Unsupported(
            "grid inversion is supported for univariate outcomes".into(),
        ));
    }
    if grid.is_empty() {
        return Err(Error::Validation("empty confidence grid".into()));
    }
    let mut p_values = Vec::with_capacity(grid.len());
    for &c in grid {
        let mut shifted = cfg.clone();
        shifted.null_shift = Some(DVector::from_element(1, c));
        let report = randomization_test(study, space, &shifted)?;
        p_values.push(report.p_value);
    }
    let accepted: Vec<f64> = grid
        .iter()
        .zip(&p_values)
        .filter(|(_, &p)| p > cfg.alpha)
        .map(|(&c, _)| c)
        .collect();
    let accepted_idx: Vec<usize> = (0..grid.len()).filter(|&i| p_values[i] > cfg.alpha).collect();
    let is_interval = accepted_idx
        .windows(2)
        .all(|pair| pair[1] == pair[0] + 1);
    let warning = accepted
        .is_empty()
        .then(|| "no grid point was accepted; the grid may be too narrow".to_string());
    Ok(ConfidenceSet {
        alpha: cfg.alpha,
        grid: grid.to_vec(),
        p_values,
        accepted,
        is_interval,
        warning,
    })
}
