//! Covariance estimators for the joint scaled vector (√N τ̂, √N δ̂).
//!
//! Every estimator here is a per-assignment computation: the test engine
//! recomputes V̂(·, w) inside its loop over assignments, so these functions
//! take the assignment explicitly and hold no state.
//!
//! The central object is the unpooled two-sample (Neyman) estimator applied
//! to the stacked vector (y_i, x_i):
//!
//! ```text
//! V̂ = N (Σ̂₁ / n₁ + Σ̂₀ / n₀)
//! ```
//!
//! with Σ̂_z the within-arm sample covariance (divisor n_z − 1). Its blocks
//! are V̂_ττ (outcomes), V̂_τδ (outcome–covariate), and V̂_δδ (covariates);
//! the δδ block depends on (x, w) only, never on outcomes.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::estimator::{PairedEstimate, RegressionFit};

/// Relative eigenvalue floor used when repairing near-singular covariance
/// estimates ahead of Cholesky factorization or Gaussian sampling.
pub const EIGEN_FLOOR_RATIO: f64 = 1e-10;

/// A joint covariance estimate with labelled blocks.
///
/// The leading `stat_dim` rows/columns describe the (scaled) effect estimate;
/// the trailing `imbalance_dim` rows/columns describe the covariate
/// imbalance. Either block may be empty.
#[derive(Debug, Clone)]
pub struct CovEstimate {
    v: DMatrix<f64>,
    stat_dim: usize,
    imbalance_dim: usize,
}

impl CovEstimate {
    /// Wrap a (m+k)×(m+k) matrix with its block sizes.
    pub fn new(v: DMatrix<f64>, stat_dim: usize, imbalance_dim: usize) -> Result<Self> {
        if v.nrows() != stat_dim + imbalance_dim || !v.is_square() {
            return Err(Error::Validation(format!(
                "covariance shape {}×{} does not match blocks {stat_dim}+{imbalance_dim}",
                v.nrows(),
                v.ncols()
            )));
        }
        Ok(Self {
            v,
            stat_dim,
            imbalance_dim,
        })
    }

    /// The full joint matrix.
    pub fn full(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// Dimension of the effect block.
    pub fn stat_dim(&self) -> usize {
        self.stat_dim
    }

    /// Dimension of the imbalance block.
    pub fn imbalance_dim(&self) -> usize {
        self.imbalance_dim
    }

    /// Effect-block V̂_ττ (m×m).
    pub fn tau_tau(&self) -> DMatrix<f64> {
        self.v.view((0, 0), (self.stat_dim, self.stat_dim)).into()
    }

    /// Cross-block V̂_τδ (m×k).
    pub fn tau_delta(&self) -> DMatrix<f64> {
        self.v
            .view((0, self.stat_dim), (self.stat_dim, self.imbalance_dim))
            .into()
    }

    /// Imbalance-block V̂_δδ (k×k).
    pub fn delta_delta(&self) -> DMatrix<f64> {
        self.v
            .view(
                (self.stat_dim, self.stat_dim),
                (self.imbalance_dim, self.imbalance_dim),
            )
            .into()
    }
}

/// Unpooled two-sample covariance estimate of (√N τ̂, √N δ̂) under `w`.
///
/// `outcomes` is N×d, `covariates` N×k (k may be 0), and `w` a binary
/// assignment with at least two units per arm.
pub fn neyman_unpooled(
    outcomes: &DMatrix<f64>,
    covariates: &DMatrix<f64>,
    w: &[u8],
) -> Result<CovEstimate> {
    let n = outcomes.nrows();
    let d = outcomes.ncols();
    let k = covariates.ncols();
    if covariates.nrows() != n || w.len() != n {
        return Err(Error::Validation(
            "outcomes, covariates, and assignment must share the unit count".into(),
        ));
    }
    let mut v = DMatrix::zeros(d + k, d + k);
    for arm in [1u8, 0u8] {
        let idx: Vec<usize> = (0..n).filter(|&i| w[i] == arm).collect();
        if idx.len() < 2 {
            return Err(Error::InvalidDesign(format!(
                "arm {arm} has {} unit(s); within-arm variances need at least 2",
                idx.len()
            )));
        }
        let sigma = stacked_sample_cov(outcomes, covariates, &idx);
        v += sigma * (n as f64 / idx.len() as f64);
    }
    CovEstimate::new(v, d, k)
}

/// Pooled within-arm outcome covariance scaled for the difference in means:
/// (N/n₀ + N/n₁) × [(n₁−1)Σ̂₁ + (n₀−1)Σ̂₀] / (N−2).
pub fn pooled(outcomes: &DMatrix<f64>, w: &[u8]) -> Result<DMatrix<f64>> {
    let n = outcomes.nrows();
    let d = outcomes.ncols();
    if w.len() != n {
        return Err(Error::Validation("assignment length mismatch".into()));
    }
    if n < 3 {
        return Err(Error::InvalidDesign(
            "pooled covariance needs at least 3 units".into(),
        ));
    }
    let empty = DMatrix::zeros(n, 0);
    let mut pooled_s = DMatrix::zeros(d, d);
    let mut inv_sizes = 0.0;
    for arm in [1u8, 0u8] {
        let idx: Vec<usize> = (0..n).filter(|&i| w[i] == arm).collect();
        if idx.len() < 2 {
            return Err(Error::InvalidDesign(format!(
                "arm {arm} has {} unit(s); within-arm variances need at least 2",
                idx.len()
            )));
        }
        let sigma = stacked_sample_cov(outcomes, &empty, &idx);
        pooled_s += sigma * ((idx.len() - 1) as f64 / (n - 2) as f64);
        inv_sizes += n as f64 / idx.len() as f64;
    }
    Ok(pooled_s * inv_sizes)
}

/// Residual-based variance for the regression-adjusted estimator:
/// N/n₁ · σ̂₁² + N/n₀ · σ̂₀², with σ̂_z² the within-arm sample variance of
/// the fit's residuals.
pub fn regression_residual(fit: &RegressionFit, w: &[u8]) -> Result<f64> {
    let n = fit.residuals.len();
    if w.len() != n {
        return Err(Error::Validation("assignment length mismatch".into()));
    }
    let mut total = 0.0;
    for arm in [1u8, 0u8] {
        let res: Vec<f64> = (0..n).filter(|&i| w[i] == arm).map(|i| fit.residuals[i]).collect();
        if res.len() < 2 {
            return Err(Error::InvalidDesign(format!(
                "arm {arm} has {} unit(s); within-arm variances need at least 2",
                res.len()
            )));
        }
        let mean = res.iter().sum::<f64>() / res.len() as f64;
        let var = res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (res.len() - 1) as f64;
        total += var * (n as f64 / res.len() as f64);
    }
    Ok(total)
}

/// Sample variance of the pair differences, (I−1)⁻¹ Σ (𝒯_i − τ̂_pair)².
pub fn paired_neyman(est: &PairedEstimate) -> Result<f64> {
    let i = est.pair_differences.len();
    if i < 2 {
        return Err(Error::InvalidDesign(
            "pair variance needs at least 2 pairs".into(),
        ));
    }
    let mean = est.tau;
    let ss: f64 = est.pair_differences.iter().map(|t| (t - mean).powi(2)).sum();
    Ok(ss / (i - 1) as f64)
}

/// Covariance of the vectorized contrast estimate vec(Ȳ̂ C_y):
/// (C_yᵀ ⊗ I_d) · ⊕_a (N/n_a) Σ̂_{y(a)} · (C_yᵀ ⊗ I_d)ᵀ, column-major vec.
pub fn multiarm_contrast(
    outcomes: &DMatrix<f64>,
    w: &[u8],
    n_arms: usize,
    c_y: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = outcomes.nrows();
    let d = outcomes.ncols();
    if w.len() != n {
        return Err(Error::Validation("assignment length mismatch".into()));
    }
    if c_y.nrows() != n_arms {
        return Err(Error::Validation(format!(
            "contrast matrix has {} rows but there are {n_arms} arms",
            c_y.nrows()
        )));
    }
    let d_prime = c_y.ncols();
    let empty = DMatrix::zeros(n, 0);

    // Per-arm scaled covariances (N/n_a) Σ̂_{y(a)}.
    let mut scaled = Vec::with_capacity(n_arms);
    for arm in 0..n_arms {
        let idx: Vec<usize> = (0..n).filter(|&i| usize::from(w[i]) == arm).collect();
        if idx.len() < 2 {
            return Err(Error::InvalidDesign(format!(
                "arm {arm} has {} unit(s); within-arm variances need at least 2",
                idx.len()
            )));
        }
        let sigma = stacked_sample_cov(outcomes, &empty, &idx);
        scaled.push(sigma * (n as f64 / idx.len() as f64));
    }

    // Block (j, j′) of the sandwich product is Σ_a C[a,j] C[a,j′] (N/n_a) Σ̂_a;
    // building it blockwise avoids forming the Kronecker factor explicitly.
    let mut v = DMatrix::zeros(d * d_prime, d * d_prime);
    for j in 0..d_prime {
        for jp in 0..d_prime {
            let mut block = DMatrix::zeros(d, d);
            for (a, sigma) in scaled.iter().enumerate() {
                block += sigma * (c_y[(a, j)] * c_y[(a, jp)]);
            }
            v.view_mut((j * d, jp * d), (d, d)).copy_from(&block);
        }
    }
    Ok(v)
}

/// A symmetric positive-semidefinite repair of `m` together with a factor
/// `L` satisfying L·Lᵀ = repaired matrix.
#[derive(Debug, Clone)]
pub struct PsdFactor {
    /// The (possibly repaired) symmetric matrix.
    pub matrix: DMatrix<f64>,
    /// A square factor of `matrix` suitable for Gaussian sampling.
    pub factor: DMatrix<f64>,
    /// Whether any eigenvalue had to be lifted to the floor.
    pub repaired: bool,
}

/// Eigen-floor repair: symmetrize, then lift eigenvalues below
/// ε = EIGEN_FLOOR_RATIO × (trace/dim) to ε. A nonpositive trace (e.g. the
/// all-zero matrix) falls back to an absolute floor tiny enough to make
/// resulting Gaussian draws effectively zero.
pub fn psd_factor(m: &DMatrix<f64>) -> PsdFactor {
    let dim = m.nrows();
    if dim == 0 {
        return PsdFactor {
            matrix: DMatrix::zeros(0, 0),
            factor: DMatrix::zeros(0, 0),
            repaired: false,
        };
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let trace = sym.trace();
    let floor = if trace > 0.0 {
        EIGEN_FLOOR_RATIO * trace / dim as f64
    } else {
        1e-300
    };
    let repaired = eig.eigenvalues.iter().any(|&l| l < floor);
    let lifted = DVector::from_iterator(dim, eig.eigenvalues.iter().map(|&l| l.max(floor)));
    let factor = &eig.eigenvectors * DMatrix::from_diagonal(&lifted.map(f64::sqrt));
    let matrix = if repaired {
        let rebuilt = &factor * factor.transpose();
        (&rebuilt + rebuilt.transpose()) * 0.5
    } else {
        sym
    };
    PsdFactor {
        matrix,
        factor,
        repaired,
    }
}

/// Sample covariance (divisor n−1) of the stacked rows (y_i, x_i) over the
/// index set `idx`. Pass an N×0 matrix to drop either part.
fn stacked_sample_cov(
    outcomes: &DMatrix<f64>,
    covariates: &DMatrix<f64>,
    idx: &[usize],
) -> DMatrix<f64> {
    let d = outcomes.ncols();
    let k = covariates.ncols();
    let m = idx.len();
    let mut mean = DVector::zeros(d + k);
    for &i in idx {
        for j in 0..d {
            mean[j] += outcomes[(i, j)];
        }
        for j in 0..k {
            mean[d + j] += covariates[(i, j)];
        }
    }
    mean /= m as f64;
    let mut cov = DMatrix::zeros(d + k, d + k);
    let mut row = DVector::zeros(d + k);
    for &i in idx {
        for j in 0..d {
            row[j] = outcomes[(i, j)] - mean[j];
        }
        for j in 0..k {
            row[d + j] = covariates[(i, j)] - mean[d + j];
        }
        cov.syger(1.0, &row, &row, 1.0);
    }
    // syger fills only the lower triangle; mirror it.
    for r in 0..d + k {
        for c in r + 1..d + k {
            cov[(r, c)] = cov[(c, r)];
        }
    }
    cov / (m as f64 - 1.0)
}
