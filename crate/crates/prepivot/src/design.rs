//! Assignment spaces Ω and balance criteria.
//!
//! Supported designs:
//!
//! * complete randomization (n₁ of N treated),
//! * rerandomization — the completely randomized space filtered through a
//!   balance criterion φ applied to the scaled covariate imbalance √N δ̂,
//! * matched pairs (one treated unit per pair, |Ω| = 2^I),
//! * multi-arm complete randomization with fixed arm sizes.
//!
//! Spaces are immutable. Sampling derives one RNG substream per draw from the
//! caller's seed, so draws can be produced concurrently yet always reproduce
//! the single-threaded sequence.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::population::difference_in_means;
use crate::rng::{substream, Domain};

/// Default cap on per-draw rejection-sampling attempts. The balance criterion
/// is assumed to have asymptotically positive acceptance probability, but a
/// finite dataset can still make it infeasible; the cap turns that into an
/// error instead of a hang.
pub const DEFAULT_MAX_ATTEMPTS: u64 = 1_000_000;

/// Default cap on exact enumeration size.
pub const DEFAULT_ENUM_CAP: u128 = 1_000_000;

/// An acceptable-imbalance indicator φ over scaled covariate differences.
///
/// The acceptance region M = {b : φ(b) = 1} must be closed, convex, and
/// mirror-symmetric about the origin with nonempty interior. The Mahalanobis
/// form satisfies this by construction; custom indicators are spot-checked at
/// construction (convexity, origin membership) and have their symmetry
/// re-checked on every evaluation.
#[derive(Clone)]
pub enum BalanceCriterion {
    /// No balance restriction (complete randomization).
    None,
    /// φ(b) = 1{ bᵀ metric⁻¹ b ≤ threshold }, boundary included.
    Mahalanobis {
        threshold: f64,
        metric: DMatrix<f64>,
        /// Cached factorization of `metric` for quadratic-form evaluation.
        chol: Cholesky<f64, Dyn>,
    },
    /// A user-supplied indicator over vectors of length `dim`.
    Custom {
        dim: usize,
        indicator: Arc<dyn Fn(&DVector<f64>) -> bool + Send + Sync>,
    },
}

impl fmt::Debug for BalanceCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => write!(f, "BalanceCriterion::None"),
            Self::Mahalanobis { threshold, metric, .. } => f
                .debug_struct("BalanceCriterion::Mahalanobis")
                .field("threshold", threshold)
                .field("dim", &metric.nrows())
                .finish(),
            Self::Custom { dim, .. } => f
                .debug_struct("BalanceCriterion::Custom")
                .field("dim", dim)
                .finish(),
        }
    }
}

impl BalanceCriterion {
    /// Mahalanobis criterion with the given threshold and positive-definite
    /// metric.
    pub fn mahalanobis(threshold: f64, metric: DMatrix<f64>) -> Result<Self> {
        if threshold <= 0.0 {
            return Err(Error::Validation(format!(
                "Mahalanobis threshold must be positive, got {threshold}"
            )));
        }
        if metric.nrows() != metric.ncols() || metric.nrows() == 0 {
            return Err(Error::Validation(
                "Mahalanobis metric must be a nonempty square matrix".into(),
            ));
        }
        let chol = Cholesky::new(metric.clone()).ok_or_else(|| {
            Error::Singular("Mahalanobis metric is not positive definite".into())
        })?;
        Ok(Self::Mahalanobis {
            threshold,
            metric,
            chol,
        })
    }

    /// Custom criterion. Construction validates that φ(0) = 1 and spot-checks
    /// midpoint convexity and mirror symmetry of the acceptance region on a
    /// deterministic random grid; violations reject the criterion.
    pub fn custom<F>(dim: usize, indicator: F) -> Result<Self>
    where
        F: Fn(&DVector<f64>) -> bool + Send + Sync + 'static,
    {
        if dim == 0 {
            return Err(Error::Validation(
                "custom balance criterion needs dimension ≥ 1".into(),
            ));
        }
        if !indicator(&DVector::zeros(dim)) {
            return Err(Error::Validation(
                "balance criterion must accept the origin (φ(0) = 1 by Condition 1)".into(),
            ));
        }
        // Deterministic construction-time spot checks on a fixed substream.
        let mut rng = substream(0x5ba1a9ce, Domain::Assignment, u64::MAX, 0);
        let mut accepted: Vec<DVector<f64>> = Vec::new();
        for _ in 0..256 {
            let scale = 10f64.powf(rng.random_range(-1.0..2.0));
            let b =
                DVector::from_fn(dim, |_, _| scale * (rng.random::<f64>() * 2.0 - 1.0));
            let fwd = indicator(&b);
            if fwd != indicator(&(-&b)) {
                return Err(Error::Validation(
                    "balance criterion is not mirror-symmetric: φ(b) ≠ φ(−b)".into(),
                ));
            }
            if fwd {
                accepted.push(b);
            }
        }
        for pair in accepted.windows(2) {
            for &lambda in &[0.25, 0.5, 0.75] {
                let mid = &pair[0] * lambda + &pair[1] * (1.0 - lambda);
                if !indicator(&mid) {
                    return Err(Error::Validation(
                        "balance criterion acceptance region is not convex on a sampled grid"
                            .into(),
                    ));
                }
            }
        }
        Ok(Self::Custom {
            dim,
            indicator: Arc::new(indicator),
        })
    }

    /// Dimension of imbalance vectors this criterion accepts; `None` for the
    /// trivial criterion.
    pub fn dim(&self) -> Option<usize> {
        match self {
            Self::None => None,
            Self::Mahalanobis { metric, .. } => Some(metric.nrows()),
            Self::Custom { dim, .. } => Some(*dim),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Self::None)
    }

    /// Evaluate φ on a scaled imbalance vector. Custom criteria re-check
    /// mirror symmetry on every call.
    pub fn evaluate(&self, scaled_delta: &DVector<f64>) -> Result<bool> {
        match self {
            Self::None => Ok(true),
            Self::Mahalanobis {
                threshold, chol, metric,
            } => {
                if scaled_delta.len() != metric.nrows() {
                    return Err(Error::Validation(format!(
                        "imbalance vector has length {}, metric is {}×{}",
                        scaled_delta.len(),
                        metric.nrows(),
                        metric.ncols()
                    )));
                }
                let u = chol.solve(scaled_delta);
                Ok(scaled_delta.dot(&u) <= *threshold)
            }
            Self::Custom { dim, indicator } => {
                if scaled_delta.len() != *dim {
                    return Err(Error::Validation(format!(
                        "imbalance vector has length {}, criterion expects {dim}",
                        scaled_delta.len()
                    )));
                }
                let fwd = indicator(scaled_delta);
                if fwd != indicator(&(-scaled_delta)) {
                    return Err(Error::Validation(
                        "balance criterion is not mirror-symmetric: φ(b) ≠ φ(−b)".into(),
                    ));
                }
                Ok(fwd)
            }
        }
    }
}

/// Evaluate a balance criterion on a scaled imbalance vector.
pub fn is_balanced(criterion: &BalanceCriterion, scaled_delta: &DVector<f64>) -> Result<bool> {
    criterion.evaluate(scaled_delta)
}

/// A batch of uniform draws from Ω together with rejection-sampling
/// diagnostics.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub assignments: Vec<Vec<u8>>,
    /// Total super-space draws attempted (equals `assignments.len()` when no
    /// criterion filters the space).
    pub attempts: u64,
}

impl SampleBatch {
    /// Fraction of attempted draws that satisfied the balance criterion.
    pub fn acceptance_rate(&self) -> f64 {
        if self.attempts == 0 {
            return 0.0;
        }
        self.assignments.len() as f64 / self.attempts as f64
    }
}

/// The set Ω of allowable treatment allocations for a design.
#[derive(Debug, Clone)]
pub enum AssignmentSpace {
    /// Completely randomized: n₁ of N units treated.
    Cre { n_units: usize, n_treated: usize },
    /// CRE filtered through a balance criterion on √N δ̂(x, w).
    Rerandomized {
        n_units: usize,
        n_treated: usize,
        covariates: DMatrix<f64>,
        criterion: BalanceCriterion,
    },
    /// Matched pairs; units 2i and 2i+1 form pair i.
    Paired { n_pairs: usize },
    /// Multi-arm complete randomization with fixed arm sizes n_a.
    MultiArm { arm_sizes: Vec<usize> },
}

impl AssignmentSpace {
    pub fn cre(n_units: usize, n_treated: usize) -> Result<Self> {
        check_two_arm(n_units, n_treated)?;
        Ok(Self::Cre { n_units, n_treated })
    }

    pub fn rerandomized(
        n_units: usize,
        n_treated: usize,
        covariates: DMatrix<f64>,
        criterion: BalanceCriterion,
    ) -> Result<Self> {
        check_two_arm(n_units, n_treated)?;
        if covariates.nrows() != n_units {
            return Err(Error::Validation(format!(
                "covariates have {} rows, expected {n_units}",
                covariates.nrows()
            )));
        }
        if let Some(dim) = criterion.dim() {
            if dim != covariates.ncols() {
                return Err(Error::Validation(format!(
                    "criterion dimension {dim} does not match covariate dimension {}",
                    covariates.ncols()
                )));
            }
        }
        Ok(Self::Rerandomized {
            n_units,
            n_treated,
            covariates,
            criterion,
        })
    }

    pub fn paired(n_pairs: usize) -> Result<Self> {
        if n_pairs < 2 {
            return Err(Error::InvalidDesign(format!(
                "paired design needs at least 2 pairs, got {n_pairs}"
            )));
        }
        Ok(Self::Paired { n_pairs })
    }

    pub fn multi_arm(arm_sizes: Vec<usize>) -> Result<Self> {
        if arm_sizes.len() < 2 {
            return Err(Error::InvalidDesign(
                "multi-arm design needs at least 2 arms".into(),
            ));
        }
        if arm_sizes.iter().any(|&n| n < 2) {
            return Err(Error::InvalidDesign(
                "every arm needs at least 2 units".into(),
            ));
        }
        Ok(Self::MultiArm { arm_sizes })
    }

    pub fn n_units(&self) -> usize {
        match self {
            Self::Cre { n_units, .. } | Self::Rerandomized { n_units, .. } => *n_units,
            Self::Paired { n_pairs } => 2 * n_pairs,
            Self::MultiArm { arm_sizes } => arm_sizes.iter().sum(),
        }
    }

    /// Exact cardinality of the unconstrained super-space (the constrained
    /// rerandomized cardinality is only known after enumeration). Saturates
    /// at `u128::MAX`.
    pub fn super_cardinality(&self) -> u128 {
        match self {
            Self::Cre { n_units, n_treated }
            | Self::Rerandomized { n_units, n_treated, .. } => {
                binomial_u128(*n_units as u64, *n_treated as u64)
            }
            Self::Paired { n_pairs } => {
                if *n_pairs >= 128 {
                    u128::MAX
                } else {
                    1u128 << n_pairs
                }
            }
            Self::MultiArm { arm_sizes } => {
                let mut remaining: u64 = arm_sizes.iter().sum::<usize>() as u64;
                let mut total: u128 = 1;
                for &n_a in arm_sizes {
                    total = total.saturating_mul(binomial_u128(remaining, n_a as u64));
                    remaining -= n_a as u64;
                }
                total
            }
        }
    }

    /// Exact cardinality of Ω when it is known without enumeration.
    pub fn cardinality(&self) -> Option<u128> {
        match self {
            Self::Rerandomized { .. } => None,
            _ => Some(self.super_cardinality()),
        }
    }

    pub fn criterion(&self) -> &BalanceCriterion {
        match self {
            Self::Rerandomized { criterion, .. } => criterion,
            _ => &BalanceCriterion::None,
        }
    }

    /// Is the given assignment a member of Ω?
    pub fn is_member(&self, w: &[u8]) -> Result<bool> {
        if w.len() != self.n_units() {
            return Ok(false);
        }
        match self {
            Self::Cre { n_treated, .. } => Ok(counts_match(w, &[w.len() - n_treated, *n_treated])),
            Self::Rerandomized {
                n_units,
                n_treated,
                covariates,
                criterion,
            } => {
                if !counts_match(w, &[n_units - n_treated, *n_treated]) {
                    return Ok(false);
                }
                criterion.evaluate(&scaled_imbalance(covariates, w)?)
            }
            Self::Paired { n_pairs } => {
                for i in 0..*n_pairs {
                    let (a, b) = (w[2 * i], w[2 * i + 1]);
                    if a > 1 || b > 1 || a + b != 1 {
                        return Ok(false);
                    }
                }
                Ok(true)
            }
            Self::MultiArm { arm_sizes } => Ok(counts_match(w, arm_sizes)),
        }
    }

    /// Enumerate Ω exactly, in deterministic lexicographic order of the
    /// assignment vectors (pairs enumerated by binary counter over treated
    /// positions, first pair most significant). Rerandomized spaces filter
    /// the complete enumeration through φ.
    pub fn enumerate(&self, cap: u128) -> Result<Vec<Vec<u8>>> {
        let super_card = self.super_cardinality();
        if super_card > cap {
            return Err(Error::TooLarge {
                cardinality: super_card,
                cap,
            });
        }
        match self {
            Self::Cre { n_units, n_treated } => {
                Ok(enumerate_multiset(&[n_units - n_treated, *n_treated]))
            }
            Self::Rerandomized {
                n_units,
                n_treated,
                covariates,
                criterion,
            } => {
                let mut kept = Vec::new();
                for w in enumerate_multiset(&[n_units - n_treated, *n_treated]) {
                    if criterion.evaluate(&scaled_imbalance(covariates, &w)?)? {
                        kept.push(w);
                    }
                }
                if kept.is_empty() {
                    return Err(Error::InvalidDesign(
                        "rerandomized space is empty: no assignment satisfies the criterion"
                            .into(),
                    ));
                }
                Ok(kept)
            }
            Self::Paired { n_pairs } => {
                let i = *n_pairs;
                let mut out = Vec::with_capacity(1 << i);
                for m in 0u64..(1u64 << i) {
                    let mut w = vec![0u8; 2 * i];
                    for pair in 0..i {
                        let bit = ((m >> (i - 1 - pair)) & 1) as usize;
                        w[2 * pair + bit] = 1;
                    }
                    out.push(w);
                }
                Ok(out)
            }
            Self::MultiArm { arm_sizes } => Ok(enumerate_multiset(arm_sizes)),
        }
    }

    /// Draw `count` i.i.d. uniform assignments from Ω with the default
    /// per-draw attempt cap.
    pub fn sample_uniform(&self, count: usize, seed: u64) -> Result<SampleBatch> {
        self.sample_uniform_with(count, seed, DEFAULT_MAX_ATTEMPTS)
    }

    /// Draw `count` i.i.d. uniform assignments from Ω. Draw `j` uses the RNG
    /// substream `(seed, Assignment, 0, j)`, so the batch is reproducible and
    /// independent of worker-thread count. Rerandomized spaces rejection-
    /// sample the super-space until φ accepts, up to `max_attempts` per draw.
    pub fn sample_uniform_with(
        &self,
        count: usize,
        seed: u64,
        max_attempts: u64,
    ) -> Result<SampleBatch> {
        if count == 0 {
            return Err(Error::Validation("requested 0 draws".into()));
        }
        let results: Vec<(Option<Vec<u8>>, u64)> = (0..count as u64)
            .into_par_iter()
            .map(|j| {
                let mut rng = substream(seed, Domain::Assignment, 0, j);
                self.draw_one(&mut rng, max_attempts)
            })
            .collect();
        let attempts: u64 = results.iter().map(|(_, a)| a).sum();
        let assignments: Vec<Vec<u8>> =
            results.into_iter().filter_map(|(w, _)| w).collect();
        if assignments.len() < count {
            let accepted = assignments.len() as u64;
            return Err(Error::InfeasibleBalance {
                attempts,
                accepted,
                rate: accepted as f64 / attempts as f64,
            });
        }
        Ok(SampleBatch {
            assignments,
            attempts,
        })
    }

    /// One uniform draw; returns the accepted assignment (or None if the
    /// attempt cap was hit) and the number of super-space draws consumed.
    fn draw_one<R: Rng>(&self, rng: &mut R, max_attempts: u64) -> (Option<Vec<u8>>, u64) {
        match self {
            Self::Cre { n_units, n_treated } => {
                (Some(shuffled_labels(&[n_units - n_treated, *n_treated], rng)), 1)
            }
            Self::MultiArm { arm_sizes } => (Some(shuffled_labels(arm_sizes, rng)), 1),
            Self::Paired { n_pairs } => {
                let mut w = vec![0u8; 2 * n_pairs];
                for pair in 0..*n_pairs {
                    let bit = usize::from(rng.random::<bool>());
                    w[2 * pair + bit] = 1;
                }
                (Some(w), 1)
            }
            Self::Rerandomized {
                n_units,
                n_treated,
                covariates,
                criterion,
            } => {
                let labels = [n_units - n_treated, *n_treated];
                for attempt in 1..=max_attempts {
                    let w = shuffled_labels(&labels, rng);
                    let ok = scaled_imbalance(covariates, &w)
                        .and_then(|b| criterion.evaluate(&b))
                        .unwrap_or(false);
                    if ok {
                        return (Some(w), attempt);
                    }
                }
                (None, max_attempts)
            }
        }
    }
}

/// √N δ̂(x, w): the scaled covariate difference in means.
pub fn scaled_imbalance(covariates: &DMatrix<f64>, w: &[u8]) -> Result<DVector<f64>> {
    let n = covariates.nrows() as f64;
    Ok(difference_in_means(covariates, w)? * n.sqrt())
}

fn check_two_arm(n_units: usize, n_treated: usize) -> Result<()> {
    if n_treated < 1 || n_treated >= n_units {
        return Err(Error::InvalidDesign(format!(
            "need 1 ≤ n1 ≤ N−1; got n1 = {n_treated}, N = {n_units}"
        )));
    }
    Ok(())
}

fn counts_match(w: &[u8], arm_sizes: &[usize]) -> bool {
    let mut counts = vec![0usize; arm_sizes.len()];
    for &z in w {
        let z = usize::from(z);
        if z >= arm_sizes.len() {
            return false;
        }
        counts[z] += 1;
    }
    counts == arm_sizes
}

/// The canonical label vector (arm a repeated n_a times, ascending), fully
/// shuffled by Fisher–Yates; uniform over arrangements of the multiset.
fn shuffled_labels<R: Rng>(arm_sizes: &[usize], rng: &mut R) -> Vec<u8> {
    let mut w: Vec<u8> = arm_sizes
        .iter()
        .enumerate()
        .flat_map(|(a, &n_a)| std::iter::repeat(a as u8).take(n_a))
        .collect();
    for i in (1..w.len()).rev() {
        let j = rng.random_range(0..=i);
        w.swap(i, j);
    }
    w
}

/// All arrangements of the label multiset in lexicographic vector order.
fn enumerate_multiset(arm_sizes: &[usize]) -> Vec<Vec<u8>> {
    let n: usize = arm_sizes.iter().sum();
    let mut out = Vec::new();
    let mut remaining = arm_sizes.to_vec();
    let mut current = Vec::with_capacity(n);
    fn recurse(
        remaining: &mut [usize],
        current: &mut Vec<u8>,
        n: usize,
        out: &mut Vec<Vec<u8>>,
    ) {
        if current.len() == n {
            out.push(current.clone());
            return;
        }
        for a in 0..remaining.len() {
            if remaining[a] > 0 {
                remaining[a] -= 1;
                current.push(a as u8);
                recurse(remaining, current, n, out);
                current.pop();
                remaining[a] += 1;
            }
        }
    }
    recurse(&mut remaining, &mut current, n, &mut out);
    out
}

fn binomial_u128(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i + 1) as u128,
            None => return u128::MAX,
        };
    }
    acc
}
