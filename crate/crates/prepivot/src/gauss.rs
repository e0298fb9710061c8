//! The Gaussian prepivoting engine.
//!
//! For an assignment w with statistic value T and joint covariance estimate
//! V̂ of (√N τ̂, √N δ̂), the prepivoted value is the conditional pushforward
//! CDF
//!
//! ```text
//! g_w = γ_{0,V̂} { (a, b) : f_η̂(a) ≤ T  and  φ(b) = 1 }
//!       ───────────────────────────────────────────────
//!       γ_{0,V̂_δδ} { b : φ(b) = 1 }
//! ```
//!
//! where γ denotes mean-zero Gaussian measure and φ the design's balance
//! indicator. Three closed forms are recognized; everything else runs a
//! common-draws Monte Carlo whose numerator and denominator counts come from
//! the same sample, with a counter-based substream per assignment so results
//! are byte-identical regardless of evaluation order.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::covariance::{neyman_unpooled, psd_factor, CovEstimate};
use crate::design::BalanceCriterion;
use crate::error::{Error, Result};
use crate::estimator::{
    arm_means, paired_estimate, regression_fit, EstimatorSpec,
};
use crate::population::difference_in_means;
use crate::rng::{substream, Domain};
use crate::statistic::{compute_xi, evaluate, Family, StatisticSpec, XiValue};

/// Default number of Gaussian Monte Carlo draws per assignment.
pub const DEFAULT_GAUSS_DRAWS: usize = 10_000;

/// Minimum Monte Carlo draw count accepted by the engine.
pub const MIN_GAUSS_DRAWS: usize = 100;

/// Draws are generated and multiplied through the factor in batches of this
/// many columns to bound peak memory.
const BATCH_COLS: usize = 4096;

/// How the pushforward value should be computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GaussMethod {
    /// Use a closed form when one applies, otherwise Monte Carlo.
    Auto,
    /// Require a fully closed form; error if none applies.
    ClosedForm,
    /// Force Monte Carlo even where a closed form exists.
    MonteCarlo,
}

impl GaussMethod {
    /// Parse the CLI spelling `auto|closed|mc`.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "auto" => Ok(Self::Auto),
            "closed" => Ok(Self::ClosedForm),
            "mc" => Ok(Self::MonteCarlo),
            other => Err(Error::Validation(format!(
                "unknown gauss method '{other}' (expected auto, closed, or mc)"
            ))),
        }
    }
}

/// Configuration for the Gaussian measure evaluations.
#[derive(Debug, Clone, Copy)]
pub struct GaussEngineConfig {
    /// Monte Carlo draws B per assignment.
    pub draws: usize,
    /// Master seed; each assignment derives its own substream from it.
    pub seed: u64,
    pub method: GaussMethod,
}

impl Default for GaussEngineConfig {
    fn default() -> Self {
        Self {
            draws: DEFAULT_GAUSS_DRAWS,
            seed: 0,
            method: GaussMethod::Auto,
        }
    }
}

impl GaussEngineConfig {
    /// Check the draw budget; Monte Carlo needs at least [`MIN_GAUSS_DRAWS`].
    pub fn validate(&self) -> Result<()> {
        if self.method != GaussMethod::ClosedForm && self.draws < MIN_GAUSS_DRAWS {
            return Err(Error::Validation(format!(
                "gauss draws {} is below the minimum of {MIN_GAUSS_DRAWS}",
                self.draws
            )));
        }
        Ok(())
    }
}

/// Which computation produced a pushforward value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodUsed {
    /// Closed form for the scalar absolute-value sublevel set.
    ClosedAbs,
    /// Closed chi-square CDF for the matched quadratic form.
    ClosedChiSquare,
    /// Monte Carlo numerator over a closed chi-square denominator.
    McClosedDenominator,
    /// Full common-draws Monte Carlo.
    MonteCarlo,
}

impl MethodUsed {
    /// Stable lowercase label used in reports.
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::ClosedAbs => "closed-abs",
            Self::ClosedChiSquare => "closed-chi-square",
            Self::McClosedDenominator => "mc-closed-denominator",
            Self::MonteCarlo => "mc",
        }
    }
}

/// The prepivoted value g_w with its computation diagnostics.
#[derive(Debug, Clone)]
pub struct PrepivotValue {
    /// The conditional pushforward CDF value, in [0, 1].
    pub g: f64,
    pub method_used: MethodUsed,
    /// Approximate standard error of `g` (0 for closed forms).
    pub mc_std_error: f64,
    /// Estimated (or exact) Gaussian mass of the balance acceptance region.
    pub denominator_estimate: f64,
    /// Whether the covariance needed an eigenvalue-floor repair.
    pub covariance_repaired: bool,
}

/// Evaluate the conditional pushforward CDF at `t_obs`.
///
/// `xi` is the statistic parameter η̂ already computed for this assignment;
/// `stream_index` addresses the Monte Carlo substream so that repeated calls
/// with the same `(cfg.seed, stream_index)` are byte-identical.
pub fn pushforward_cdf(
    vhat: &CovEstimate,
    spec: &StatisticSpec,
    xi: &XiValue,
    criterion: &BalanceCriterion,
    t_obs: f64,
    cfg: &GaussEngineConfig,
    stream_index: u64,
) -> Result<PrepivotValue> {
    if t_obs < 0.0 || !t_obs.is_finite() {
        return Err(Error::Validation(format!(
            "statistic value {t_obs} must be finite and nonnegative"
        )));
    }
    if let Some(k) = criterion.dim() {
        if vhat.imbalance_dim() != k {
            return Err(Error::Validation(format!(
                "covariance imbalance block is {}-dimensional but the criterion expects {k}",
                vhat.imbalance_dim()
            )));
        }
    }

    if cfg.method != GaussMethod::MonteCarlo {
        if criterion.is_none() {
            // Route (i): scalar mirror-symmetric sublevel set {|a| ≤ s·T}.
            if let Some(scale) = scalar_abs_scale(spec.family, xi, vhat.stat_dim()) {
                let var = vhat.tau_tau()[(0, 0)];
                let (sigma2, repaired) = if var > 0.0 { (var, false) } else { (1e-300, true) };
                let g = 1.0 - 2.0 * std_normal_cdf(-scale * t_obs / sigma2.sqrt());
                return Ok(PrepivotValue {
                    g: g.clamp(0.0, 1.0),
                    method_used: MethodUsed::ClosedAbs,
                    mc_std_error: 0.0,
                    denominator_estimate: 1.0,
                    covariance_repaired: repaired,
                });
            }
            // Route (ii): quadratic form in its own covariance is chi-square.
            if spec.family == Family::QuadForm {
                if let XiValue::Matrix(eta) = xi {
                    if matrices_equal(eta, &vhat.tau_tau()) {
                        return Ok(PrepivotValue {
                            g: chi_square_cdf(vhat.stat_dim(), t_obs),
                            method_used: MethodUsed::ClosedChiSquare,
                            mc_std_error: 0.0,
                            denominator_estimate: 1.0,
                            covariance_repaired: false,
                        });
                    }
                }
            }
        } else if cfg.method == GaussMethod::Auto {
            // Route (iii): a Mahalanobis ball in the δδ metric itself has
            // exact chi-square mass; only the numerator needs draws.
            if let BalanceCriterion::Mahalanobis {
                threshold, metric, ..
            } = criterion
            {
                if matrices_equal(metric, &vhat.delta_delta()) {
                    cfg.validate()?;
                    let denom = chi_square_cdf(vhat.imbalance_dim(), *threshold);
                    if denom <= 0.0 {
                        return Err(Error::BalanceMass { draws: 0 });
                    }
                    let mc = mc_counts(vhat, spec, xi, criterion, t_obs, cfg, stream_index)?;
                    let p_joint = mc.joint as f64 / cfg.draws as f64;
                    let g = (p_joint / denom).clamp(0.0, 1.0);
                    let se = (p_joint * (1.0 - p_joint) / cfg.draws as f64).sqrt() / denom;
                    return Ok(PrepivotValue {
                        g,
                        method_used: MethodUsed::McClosedDenominator,
                        mc_std_error: se,
                        denominator_estimate: denom,
                        covariance_repaired: mc.repaired,
                    });
                }
            }
        }
        if cfg.method == GaussMethod::ClosedForm {
            return Err(Error::Unsupported(
                "no closed form applies to this statistic/criterion combination; \
                 use the auto or mc method"
                    .into(),
            ));
        }
    }

    // Full Monte Carlo: joint and denominator counts from the same draws.
    cfg.validate()?;
    let mc = mc_counts(vhat, spec, xi, criterion, t_obs, cfg, stream_index)?;
    if mc.accepted == 0 {
        return Err(Error::BalanceMass { draws: cfg.draws });
    }
    let g = mc.joint as f64 / mc.accepted as f64;
    let se = (g * (1.0 - g) / mc.accepted as f64).sqrt();
    Ok(PrepivotValue {
        g,
        method_used: MethodUsed::MonteCarlo,
        mc_std_error: se,
        denominator_estimate: mc.accepted as f64 / cfg.draws as f64,
        covariance_repaired: mc.repaired,
    })
}

/// Integer counts from a common-draws Monte Carlo pass.
struct McCounts {
    joint: u64,
    accepted: u64,
    repaired: bool,
}

fn mc_counts(
    vhat: &CovEstimate,
    spec: &StatisticSpec,
    xi: &XiValue,
    criterion: &BalanceCriterion,
    t_obs: f64,
    cfg: &GaussEngineConfig,
    stream_index: u64,
) -> Result<McCounts> {
    let d = vhat.stat_dim();
    let conditioned = !criterion.is_none();
    let total = if conditioned { d + vhat.imbalance_dim() } else { d };
    let target = if conditioned {
        vhat.full().clone()
    } else {
        vhat.tau_tau()
    };
    let pf = psd_factor(&target);
    let evaluator = Evaluator::prepare(spec.family, xi, d)?;

    let mut rng = substream(cfg.seed, Domain::Gauss, 0, stream_index);
    let mut joint = 0u64;
    let mut accepted = 0u64;
    let mut remaining = cfg.draws;
    let batch = BATCH_COLS.min(cfg.draws);
    let mut u = DMatrix::<f64>::zeros(total, batch);
    let mut v = DMatrix::<f64>::zeros(total, batch);
    let mut a_buf = DVector::<f64>::zeros(d);
    let mut b_buf = DVector::<f64>::zeros(total - d);
    while remaining > 0 {
        let cols = batch.min(remaining);
        remaining -= cols;
        for x in u.columns_mut(0, cols).iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        v.columns_mut(0, cols)
            .gemm(1.0, &pf.factor, &u.columns_range(0..cols), 0.0);
        for j in 0..cols {
            for r in 0..d {
                a_buf[r] = v[(r, j)];
            }
            let ok_b = if conditioned {
                for r in d..total {
                    b_buf[r - d] = v[(r, j)];
                }
                criterion.evaluate(&b_buf)?
            } else {
                true
            };
            if ok_b {
                accepted += 1;
                if evaluator.value(&a_buf) <= t_obs {
                    joint += 1;
                }
            }
        }
    }
    Ok(McCounts {
        joint,
        accepted,
        repaired: pf.repaired,
    })
}

/// A pre-factored statistic evaluator for the Monte Carlo inner loop.
enum Evaluator {
    AbsScale(f64),
    Quad {
        chol: Cholesky<f64, Dyn>,
        buf: std::cell::RefCell<DVector<f64>>,
    },
    MaxAbs(DVector<f64>),
    L2,
}

impl Evaluator {
    fn prepare(family: Family, xi: &XiValue, d: usize) -> Result<Self> {
        match family {
            Family::Abs => {
                let s = scalar_abs_scale(family, xi, d).ok_or_else(|| {
                    Error::Validation("absolute-value family needs a positive scalar scale".into())
                })?;
                Ok(Self::AbsScale(s))
            }
            Family::QuadForm => {
                let eta = match xi {
                    XiValue::Matrix(m) => m,
                    _ => {
                        return Err(Error::Validation(
                            "quadratic-form family needs a matrix parameter".into(),
                        ))
                    }
                };
                let chol = Cholesky::new(eta.clone()).ok_or_else(|| {
                    Error::Singular(
                        "quadratic-form parameter is not positive definite".into(),
                    )
                })?;
                Ok(Self::Quad {
                    chol,
                    buf: std::cell::RefCell::new(DVector::zeros(d)),
                })
            }
            Family::MaxAbsT => match xi {
                XiValue::Scales(s) if s.iter().all(|&x| x > 0.0) && s.len() == d => {
                    Ok(Self::MaxAbs(s.clone()))
                }
                _ => Err(Error::Singular(
                    "max-|t| family needs positive per-coordinate scales".into(),
                )),
            },
            Family::L2Norm => Ok(Self::L2),
        }
    }

    fn value(&self, a: &DVector<f64>) -> f64 {
        match self {
            Self::AbsScale(s) => a[0].abs() / s,
            Self::Quad { chol, buf } => {
                let mut y = buf.borrow_mut();
                y.copy_from(a);
                chol.solve_mut(&mut y);
                a.dot(&y).max(0.0)
            }
            Self::MaxAbs(scales) => {
                let mut best = 0.0f64;
                for j in 0..a.len() {
                    best = best.max(a[j].abs() / scales[j]);
                }
                best
            }
            Self::L2 => a.norm(),
        }
    }
}

/// Inputs shared by every per-assignment evaluation of one test.
pub struct AssignmentProblem<'a> {
    /// N×k covariate matrix (k may be 0).
    pub covariates: &'a DMatrix<f64>,
    pub criterion: &'a BalanceCriterion,
    pub estimator: &'a EstimatorSpec,
    pub statistic: &'a StatisticSpec,
    /// Number of arms (2 for binary designs).
    pub n_arms: usize,
    /// The statistic receives √(scale_units)·τ̂: the unit count N, or the
    /// pair count I for paired designs.
    pub scale_units: f64,
}

/// The per-assignment statistic with everything the pushforward needs.
#[derive(Debug, Clone)]
pub struct AssignmentStatistic {
    /// T = f_η̂(√N τ̂), always nonnegative.
    pub t: f64,
    /// The unscaled point estimate.
    pub tau: DVector<f64>,
    pub vhat: CovEstimate,
    pub xi: XiValue,
    /// Whether η̂ needed an eigenvalue-floor repair before factoring.
    pub eta_repaired: bool,
}

/// Recompute estimate, covariance, parameter, and statistic under `w`.
///
/// `outcomes` must already be the outcome matrix realized under `w` (for a
/// sharp-null test these are the imputed outcomes).
pub fn statistic_for_assignment(
    outcomes: &DMatrix<f64>,
    prob: &AssignmentProblem<'_>,
    w: &[u8],
) -> Result<AssignmentStatistic> {
    let n = outcomes.nrows();
    let empty = DMatrix::zeros(n, 0);
    let (tau, vhat) = match prob.estimator {
        EstimatorSpec::Dim => {
            let tau = difference_in_means(outcomes, w)?;
            let vhat = if prob.criterion.is_none() {
                neyman_unpooled(outcomes, &empty, w)?
            } else {
                neyman_unpooled(outcomes, prob.covariates, w)?
            };
            (tau, vhat)
        }
        EstimatorSpec::LinAdjusted => {
            if outcomes.ncols() != 1 {
                return Err(Error::Unsupported(
                    "regression adjustment handles univariate outcomes".into(),
                ));
            }
            if !prob.criterion.is_none() {
                return Err(Error::Unsupported(
                    "regression adjustment is supported for unrestricted designs only".into(),
                ));
            }
            let y = DVector::from_column_slice(outcomes.column(0).as_slice());
            let fit = regression_fit(&y, prob.covariates, w)?;
            let v = crate::covariance::regression_residual(&fit, w)?;
            (
                DVector::from_element(1, fit.tau),
                CovEstimate::new(DMatrix::from_element(1, 1, v), 1, 0)?,
            )
        }
        EstimatorSpec::Paired => {
            if outcomes.ncols() != 1 {
                return Err(Error::Unsupported(
                    "the paired estimator handles univariate outcomes".into(),
                ));
            }
            let y = DVector::from_column_slice(outcomes.column(0).as_slice());
            let est = paired_estimate(&y, w)?;
            let v = crate::covariance::paired_neyman(&est)?;
            (
                DVector::from_element(1, est.tau),
                CovEstimate::new(DMatrix::from_element(1, 1, v), 1, 0)?,
            )
        }
        EstimatorSpec::Contrast(c_y) => {
            EstimatorSpec::validate_contrast(c_y)?;
            if c_y.nrows() != prob.n_arms {
                return Err(Error::Validation(format!(
                    "contrast matrix has {} rows for {} arms",
                    c_y.nrows(),
                    prob.n_arms
                )));
            }
            let means = arm_means(outcomes, w, prob.n_arms)?;
            let prod = means * c_y;
            let tau = DVector::from_column_slice(prod.as_slice());
            let m = tau.len();
            let v = crate::covariance::multiarm_contrast(outcomes, w, prob.n_arms, c_y)?;
            (tau, CovEstimate::new(v, m, 0)?)
        }
    };

    let mut xi = compute_xi(prob.statistic, outcomes, w, &vhat.tau_tau())?;
    let scaled = &tau * prob.scale_units.sqrt();
    let (t, eta_repaired) = match evaluate(prob.statistic.family, &xi, &scaled) {
        Ok(t) => (t, false),
        Err(Error::Singular(_)) if prob.statistic.family == Family::QuadForm => {
            // A near-singular η̂ is lifted once by the eigenvalue floor so a
            // long run is not killed by a single degenerate draw.
            if let XiValue::Matrix(eta) = &xi {
                let repaired = psd_factor(eta).matrix;
                xi = XiValue::Matrix(repaired);
            }
            (evaluate(prob.statistic.family, &xi, &scaled)?, true)
        }
        Err(e) => return Err(e),
    };

    Ok(AssignmentStatistic {
        t,
        tau,
        vhat,
        xi,
        eta_repaired,
    })
}

/// Full per-assignment evaluation: statistic plus its prepivoted value.
pub fn prepivot_assignment(
    outcomes: &DMatrix<f64>,
    prob: &AssignmentProblem<'_>,
    w: &[u8],
    cfg: &GaussEngineConfig,
    stream_index: u64,
) -> Result<(AssignmentStatistic, PrepivotValue)> {
    let stat = statistic_for_assignment(outcomes, prob, w)?;
    let value = pushforward_cdf(
        &stat.vhat,
        prob.statistic,
        &stat.xi,
        prob.criterion,
        stat.t,
        cfg,
        stream_index,
    )?;
    Ok((stat, value))
}

/// Positive scale s such that the family's sublevel set is {|a| ≤ s·T},
/// when the statistic is effectively scalar.
fn scalar_abs_scale(family: Family, xi: &XiValue, d: usize) -> Option<f64> {
    if d != 1 {
        return None;
    }
    match (family, xi) {
        (Family::Abs, XiValue::Scalar(s)) if *s > 0.0 => Some(*s),
        (Family::Abs, XiValue::Scales(v)) if v.len() == 1 && v[0] > 0.0 => Some(v[0]),
        (Family::MaxAbsT, XiValue::Scales(v)) if v.len() == 1 && v[0] > 0.0 => Some(v[0]),
        (Family::L2Norm, _) => Some(1.0),
        _ => None,
    }
}

fn matrices_equal(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| x == y)
}

fn std_normal_cdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal parameters").cdf(x)
}

fn chi_square_cdf(df: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    ChiSquared::new(df as f64)
        .expect("positive degrees of freedom")
        .cdf(x)
}
