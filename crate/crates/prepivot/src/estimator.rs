//! Point estimators feeding the statistic layer.
//!
//! All estimators return **unscaled** means; the test engine owns the √N (or
//! √I for pairs) multiplication when it forms statistics.
//!
//! The regression-adjusted estimator is the coefficient on the treatment
//! indicator in the interacted least-squares fit of y on w, (x − x̄), and
//! w·(x − x̄), with x centered at the full-sample mean. It is computed here
//! through the equivalent arm-wise form
//!
//! ```text
//! τ̂_reg = [ȳ₁ − Q̂₁ᵀ(x̄₁ − x̄)] − [ȳ₀ − Q̂₀ᵀ(x̄₀ − x̄)]
//! ```
//!
//! where Q̂_z is the within-arm OLS slope of y on x. The arm-wise form also
//! yields the residuals needed by the regression variance estimator.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::population::{difference_in_means, ObservedStudy};

/// Which point estimator a test should use.
#[derive(Debug, Clone)]
pub enum EstimatorSpec {
    /// Difference in means (vector-valued for d > 1).
    Dim,
    /// Covariate-adjusted difference in means via interacted least squares
    /// (univariate outcomes).
    LinAdjusted,
    /// Mean of within-pair treated-minus-control differences.
    Paired,
    /// Multi-arm contrasts: vec(Ȳ̂ C_y) with C_y an A×d′ matrix of
    /// column-wise contrasts.
    Contrast(DMatrix<f64>),
}

impl EstimatorSpec {
    /// Validate a contrast matrix: every column sums to zero and has at
    /// least one nonzero entry.
    pub fn validate_contrast(c_y: &DMatrix<f64>) -> Result<()> {
        if c_y.ncols() == 0 || c_y.nrows() < 2 {
            return Err(Error::Validation(
                "contrast matrix needs at least 2 rows (arms) and 1 column".into(),
            ));
        }
        for j in 0..c_y.ncols() {
            let col = c_y.column(j);
            if col.sum().abs() > 1e-12 * (1.0 + col.amax()) {
                return Err(Error::Validation(format!(
                    "contrast column {j} does not sum to zero"
                )));
            }
            if col.amax() == 0.0 {
                return Err(Error::Validation(format!("contrast column {j} is all zero")));
            }
        }
        Ok(())
    }
}

/// Difference in means of the outcomes under assignment `w`.
pub fn tau_hat(study: &ObservedStudy, w: &[u8]) -> Result<DVector<f64>> {
    difference_in_means(study.outcomes(), w)
}

/// Difference in means of the covariates under assignment `w` (empty when
/// k = 0).
pub fn delta_hat(study: &ObservedStudy, w: &[u8]) -> Result<DVector<f64>> {
    if study.covariate_dim() == 0 {
        return Ok(DVector::zeros(0));
    }
    difference_in_means(study.covariates(), w)
}

/// Output of the regression-adjusted estimator.
#[derive(Debug, Clone)]
pub struct RegressionFit {
    /// The treatment coefficient τ̂_reg.
    pub tau: f64,
    /// Within-arm slope for the treated arm (length k).
    pub q1: DVector<f64>,
    /// Within-arm slope for the control arm (length k).
    pub q0: DVector<f64>,
    /// Per-unit residuals from the unit's own arm fit (length N).
    pub residuals: DVector<f64>,
}

/// Regression-adjusted treatment effect on raw columns (univariate y).
pub fn regression_fit(y: &DVector<f64>, x: &DMatrix<f64>, w: &[u8]) -> Result<RegressionFit> {
    let n = y.len();
    let k = x.ncols();
    if x.nrows() != n || w.len() != n {
        return Err(Error::Validation(
            "regression inputs must share the same number of units".into(),
        ));
    }
    let n1 = w.iter().filter(|&&z| z == 1).count();
    let n0 = w.iter().filter(|&&z| z == 0).count();
    if n1 + n0 != n {
        return Err(Error::InvalidDesign(
            "regression adjustment requires binary arm labels".into(),
        ));
    }
    if n1 < k + 2 || n0 < k + 2 {
        return Err(Error::InvalidDesign(format!(
            "each arm needs at least k+2 = {} units for adjustment (have {n1} and {n0})",
            k + 2
        )));
    }

    let x_bar = column_mean(x, w, None);
    let mut arm_mean_y = [0.0f64; 2];
    let mut arm_mean_x = [DVector::zeros(k), DVector::zeros(k)];
    let mut slopes = [DVector::zeros(k), DVector::zeros(k)];
    for arm in 0..2u8 {
        let idx: Vec<usize> = (0..n).filter(|&i| w[i] == arm).collect();
        let m = idx.len() as f64;
        arm_mean_y[arm as usize] = idx.iter().map(|&i| y[i]).sum::<f64>() / m;
        arm_mean_x[arm as usize] = column_mean(x, w, Some(arm));
        if k > 0 {
            // Within-arm scatter S_xx and cross moments S_xy.
            let mx = &arm_mean_x[arm as usize];
            let my = arm_mean_y[arm as usize];
            let mut sxx = DMatrix::zeros(k, k);
            let mut sxy = DVector::zeros(k);
            for &i in &idx {
                let dx = x.row(i).transpose() - mx;
                sxy += &dx * (y[i] - my);
                sxx += &dx * dx.transpose();
            }
            let chol = Cholesky::new(sxx).ok_or_else(|| {
                Error::Singular(format!(
                    "rank-deficient covariates in arm {arm}; adjustment is not identified"
                ))
            })?;
            slopes[arm as usize] = chol.solve(&sxy);
        }
    }

    // Intercepts of the arm fits evaluated at the full-sample covariate mean.
    let level = |arm: usize| {
        arm_mean_y[arm] - slopes[arm].dot(&(&arm_mean_x[arm] - &x_bar))
    };
    let tau = level(1) - level(0);

    let mut residuals = DVector::zeros(n);
    for i in 0..n {
        let arm = usize::from(w[i]);
        let fitted = arm_mean_y[arm]
            + slopes[arm].dot(&(x.row(i).transpose() - &arm_mean_x[arm]));
        residuals[i] = y[i] - fitted;
    }

    Ok(RegressionFit {
        tau,
        q1: slopes[1].clone(),
        q0: slopes[0].clone(),
        residuals,
    })
}

/// Regression-adjusted treatment effect for a univariate-outcome study.
pub fn tau_hat_reg(study: &ObservedStudy, w: &[u8]) -> Result<RegressionFit> {
    if study.outcome_dim() != 1 {
        return Err(Error::Unsupported(
            "regression adjustment is defined for univariate outcomes; \
             adjust each outcome column separately"
            .into(),
        ));
    }
    let y = DVector::from_column_slice(study.outcomes().column(0).as_slice());
    regression_fit(&y, study.covariates(), w)
}

/// Within-pair treated-minus-control differences 𝒯_i and their mean.
#[derive(Debug, Clone)]
pub struct PairedEstimate {
    pub tau: f64,
    /// Signed difference per pair (length I).
    pub pair_differences: DVector<f64>,
}

/// Paired estimator on raw values: units 2i and 2i+1 form pair i, exactly one
/// of them treated under `w`.
pub fn paired_estimate(values: &DVector<f64>, w: &[u8]) -> Result<PairedEstimate> {
    let n = values.len();
    if n % 2 != 0 || w.len() != n || n < 4 {
        return Err(Error::InvalidDesign(
            "paired estimator needs an even number of units (≥ 4) in pair order".into(),
        ));
    }
    let pairs = n / 2;
    let mut diffs = DVector::zeros(pairs);
    for i in 0..pairs {
        let (a, b) = (w[2 * i], w[2 * i + 1]);
        if a > 1 || b > 1 || a + b != 1 {
            return Err(Error::InvalidDesign(format!(
                "pair {i} does not have exactly one treated unit"
            )));
        }
        diffs[i] = if a == 1 {
            values[2 * i] - values[2 * i + 1]
        } else {
            values[2 * i + 1] - values[2 * i]
        };
    }
    Ok(PairedEstimate {
        tau: diffs.mean(),
        pair_differences: diffs,
    })
}

/// Paired estimator for a univariate-outcome study in pair order.
pub fn tau_hat_paired(study: &ObservedStudy, w: &[u8]) -> Result<PairedEstimate> {
    if study.outcome_dim() != 1 {
        return Err(Error::Unsupported(
            "the paired estimator is defined for univariate outcomes".into(),
        ));
    }
    let y = DVector::from_column_slice(study.outcomes().column(0).as_slice());
    paired_estimate(&y, w)
}

/// Arm-mean matrix Ȳ̂ (d×A) under assignment `w` over `n_arms` arms.
pub fn arm_means(outcomes: &DMatrix<f64>, w: &[u8], n_arms: usize) -> Result<DMatrix<f64>> {
    let (n, d) = outcomes.shape();
    if w.len() != n {
        return Err(Error::Validation("assignment length mismatch".into()));
    }
    let mut sums = DMatrix::zeros(d, n_arms);
    let mut counts = vec![0usize; n_arms];
    for i in 0..n {
        let a = usize::from(w[i]);
        if a >= n_arms {
            return Err(Error::InvalidDesign(format!(
                "arm label {a} out of range for {n_arms} arms"
            )));
        }
        counts[a] += 1;
        for j in 0..d {
            sums[(j, a)] += outcomes[(i, j)];
        }
    }
    for (a, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::InvalidDesign(format!("arm {a} is empty under w")));
        }
        for j in 0..d {
            sums[(j, a)] /= c as f64;
        }
    }
    Ok(sums)
}

/// Multi-arm contrast estimator: vec(Ȳ̂ C_y), vectorized column-major.
pub fn tau_hat_contrast(
    study: &ObservedStudy,
    w: &[u8],
    c_y: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    EstimatorSpec::validate_contrast(c_y)?;
    if c_y.nrows() != study.n_arms() {
        return Err(Error::Validation(format!(
            "contrast matrix has {} rows but the study has {} arms",
            c_y.nrows(),
            study.n_arms()
        )));
    }
    let means = arm_means(study.outcomes(), w, study.n_arms())?;
    let prod = means * c_y;
    Ok(DVector::from_column_slice(prod.as_slice()))
}

/// Mean of selected columns: all rows (`arm = None`) or one arm's rows.
fn column_mean(x: &DMatrix<f64>, w: &[u8], arm: Option<u8>) -> DVector<f64> {
    let k = x.ncols();
    let mut mean = DVector::zeros(k);
    let mut count = 0usize;
    for i in 0..x.nrows() {
        if arm.map_or(true, |a| w[i] == a) {
            count += 1;
            for j in 0..k {
                mean[j] += x[(i, j)];
            }
        }
    }
    if count > 0 {
        mean /= count as f64;
    }
    mean
}
