//! Test-statistic families and their data-driven parameters.
//!
//! A statistic is T = f_ξ̂(√N τ̂): a fixed functional family f_η applied to
//! the scaled effect estimate, with the parameter η estimated from the data
//! by a recipe ξ̂. Every family is continuous, quasi-convex, nonnegative,
//! and mirror-symmetric in its argument — the structural properties the
//! pushforward machinery relies on.
//!
//! Families:
//! - `Abs` — |t|/η for univariate t with a positive scale η;
//! - `QuadForm` — tᵀη⁻¹t with η a positive-definite matrix;
//! - `MaxAbsT` — max_j |t_j|/η_j with positive per-coordinate scales;
//! - `L2Norm` — the Euclidean norm ‖t‖₂ (η unused).

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::covariance::pooled;
use crate::error::{Error, Result};

/// The functional family f_η.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// |t|/η, univariate.
    Abs,
    /// tᵀ η⁻¹ t with η positive definite.
    QuadForm,
    /// max_j |t_j| / η_j with η_j > 0.
    MaxAbsT,
    /// ‖t‖₂; the parameter is ignored.
    L2Norm,
}

/// How the family parameter η̂ is built from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XiRecipe {
    /// η̂ = 1 (or identity), independent of the data.
    Unit,
    /// η̂ = V̂_ττ, the unpooled effect-block covariance.
    NeymanTtBlock,
    /// η̂ = the pooled within-arm covariance estimate.
    Pooled,
    /// η̂ = the per-coordinate standard deviations (V̂_ττ,jj)^{1/2}.
    DiagSqrtNeyman,
}

/// A family together with its parameter recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatisticSpec {
    pub family: Family,
    pub xi_recipe: XiRecipe,
}

impl StatisticSpec {
    /// Map a user-facing statistic name onto (family, recipe).
    ///
    /// `dim` is the unstudentized absolute difference in means, `student`
    /// its studentized form, `hotelling` the quadratic form in V̂_ττ,
    /// `hotelling-pooled` the same with a pooled covariance, `maxt` the
    /// studentized maximum, and `l2` the plain Euclidean norm.
    pub fn from_name(name: &str) -> Result<Self> {
        let (family, xi_recipe) = match name {
            "dim" => (Family::Abs, XiRecipe::Unit),
            "student" => (Family::Abs, XiRecipe::DiagSqrtNeyman),
            "hotelling" => (Family::QuadForm, XiRecipe::NeymanTtBlock),
            "hotelling-pooled" => (Family::QuadForm, XiRecipe::Pooled),
            "maxt" => (Family::MaxAbsT, XiRecipe::DiagSqrtNeyman),
            "l2" => (Family::L2Norm, XiRecipe::Unit),
            other => {
                return Err(Error::Validation(format!(
                    "unknown statistic '{other}' (expected dim, student, hotelling, \
                     hotelling-pooled, maxt, or l2)"
                )))
            }
        };
        Ok(Self { family, xi_recipe })
    }
}

/// A realized parameter value η̂.
#[derive(Debug, Clone)]
pub enum XiValue {
    /// A positive scalar scale.
    Scalar(f64),
    /// A positive-definite matrix.
    Matrix(DMatrix<f64>),
    /// Positive per-coordinate scales.
    Scales(DVector<f64>),
}

/// Evaluate the parameter recipe on data observed under assignment `w`.
///
/// `v_tau_tau` is the effect block of the unpooled covariance estimate for
/// the same (outcomes, w); recipes that need it reuse the caller's copy
/// rather than recomputing it.
pub fn compute_xi(
    spec: &StatisticSpec,
    outcomes: &DMatrix<f64>,
    w: &[u8],
    v_tau_tau: &DMatrix<f64>,
) -> Result<XiValue> {
    match spec.xi_recipe {
        XiRecipe::Unit => Ok(match spec.family {
            Family::QuadForm => XiValue::Matrix(DMatrix::identity(
                outcomes.ncols(),
                outcomes.ncols(),
            )),
            _ => XiValue::Scalar(1.0),
        }),
        XiRecipe::NeymanTtBlock => Ok(XiValue::Matrix(v_tau_tau.clone())),
        XiRecipe::Pooled => Ok(XiValue::Matrix(pooled(outcomes, w)?)),
        XiRecipe::DiagSqrtNeyman => {
            let scales = DVector::from_iterator(
                v_tau_tau.nrows(),
                v_tau_tau.diagonal().iter().map(|&v| v.sqrt()),
            );
            Ok(XiValue::Scales(scales))
        }
    }
}

/// Evaluate T = f_η̂(t).
pub fn evaluate(family: Family, xi: &XiValue, t: &DVector<f64>) -> Result<f64> {
    match family {
        Family::Abs => {
            if t.len() != 1 {
                return Err(Error::Validation(
                    "the absolute-value family is univariate".into(),
                ));
            }
            let scale = match xi {
                XiValue::Scalar(s) => *s,
                XiValue::Scales(v) if v.len() == 1 => v[0],
                _ => {
                    return Err(Error::Validation(
                        "the absolute-value family needs a scalar scale".into(),
                    ))
                }
            };
            if !(scale > 0.0) {
                return Err(Error::Singular(format!(
                    "nonpositive scale {scale} for the absolute-value family"
                )));
            }
            Ok(t[0].abs() / scale)
        }
        Family::QuadForm => {
            let eta = match xi {
                XiValue::Matrix(m) => m,
                _ => {
                    return Err(Error::Validation(
                        "the quadratic-form family needs a matrix parameter".into(),
                    ))
                }
            };
            if eta.nrows() != t.len() {
                return Err(Error::Validation(format!(
                    "quadratic-form parameter is {}×{} but t has length {}",
                    eta.nrows(),
                    eta.ncols(),
                    t.len()
                )));
            }
            // Solve η u = t instead of inverting η.
            let chol = Cholesky::new(eta.clone()).ok_or_else(|| {
                Error::Singular("quadratic-form parameter is not positive definite".into())
            })?;
            let u = chol.solve(t);
            Ok(t.dot(&u).max(0.0))
        }
        Family::MaxAbsT => {
            let scales = match xi {
                XiValue::Scales(v) => v,
                _ => {
                    return Err(Error::Validation(
                        "the max-|t| family needs per-coordinate scales".into(),
                    ))
                }
            };
            if scales.len() != t.len() {
                return Err(Error::Validation("scale length mismatch".into()));
            }
            let mut best = 0.0f64;
            for j in 0..t.len() {
                if !(scales[j] > 0.0) {
                    return Err(Error::Singular(format!(
                        "nonpositive scale at coordinate {j} for the max-|t| family"
                    )));
                }
                best = best.max(t[j].abs() / scales[j]);
            }
            Ok(best)
        }
        Family::L2Norm => Ok(t.norm()),
    }
}
