//! Data model for finite-population experiments.
//!
//! A [`FinitePopulation`] is the full science table — both potential-outcome
//! matrices and covariates for every unit. It exists only on the simulation /
//! oracle side: an analyst never sees one. An [`ObservedStudy`] is what an
//! analyst has: observed outcomes, the realized assignment, and covariates.
//!
//! Population moments use the N−1 divisor throughout, and the oracle
//! covariances are the finite-N versions of the limiting covariances of
//! (√N τ̂, √N δ̂): with p ≡ n₁/N,
//!
//! ```text
//! V_ττ = Σ_{y(1)}/p + Σ_{y(0)}/(1−p) − Σ_τ        (randomization law)
//! V_τδ = Σ_{y(1)x}/p + Σ_{y(0)x}/(1−p)
//! V_δδ = Σ_x / (p(1−p))
//! Ṽ_ττ = Σ_{y(1)}/(1−p) + Σ_{y(0)}/p              (permutation law)
//! Ṽ_τδ = Σ_{y(1)x}/(1−p) + Σ_{y(0)x}/p,   Ṽ_δδ = V_δδ
//! ```
//!
//! Under the sharp null (y(1) = y(0) row-wise) the two coincide.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Full science table: both potential outcomes and covariates for all units.
#[derive(Debug, Clone, PartialEq)]
pub struct FinitePopulation {
    /// Potential outcomes under treatment, one row per unit (N×d).
    y1: DMatrix<f64>,
    /// Potential outcomes under control (N×d).
    y0: DMatrix<f64>,
    /// Covariates (N×k, k may be 0).
    x: DMatrix<f64>,
}

impl FinitePopulation {
    /// Build a science table, validating shapes: N ≥ 2, d ≥ 1, equal row
    /// counts everywhere.
    pub fn new(y1: DMatrix<f64>, y0: DMatrix<f64>, x: DMatrix<f64>) -> Result<Self> {
        let n = y1.nrows();
        if n < 2 {
            return Err(Error::Validation(format!(
                "population needs at least 2 units, got {n}"
            )));
        }
        if y1.ncols() == 0 {
            return Err(Error::Validation("outcome dimension must be ≥ 1".into()));
        }
        if y0.shape() != y1.shape() {
            return Err(Error::Validation(format!(
                "potential outcome matrices disagree: {:?} vs {:?}",
                y1.shape(),
                y0.shape()
            )));
        }
        if x.nrows() != n {
            return Err(Error::Validation(format!(
                "covariates have {} rows but the population has {n} units",
                x.nrows()
            )));
        }
        Ok(Self { y1, y0, x })
    }

    pub fn n_units(&self) -> usize {
        self.y1.nrows()
    }

    pub fn outcome_dim(&self) -> usize {
        self.y1.ncols()
    }

    pub fn covariate_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn y1(&self) -> &DMatrix<f64> {
        &self.y1
    }

    pub fn y0(&self) -> &DMatrix<f64> {
        &self.y0
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Unit-level effects τ_i = y_i(1) − y_i(0), one row per unit.
    pub fn effects(&self) -> DMatrix<f64> {
        &self.y1 - &self.y0
    }

    /// Average treatment effect τ̄ (length d).
    pub fn average_effect(&self) -> DVector<f64> {
        let n = self.n_units() as f64;
        DVector::from_iterator(
            self.outcome_dim(),
            self.effects().column_iter().map(|c| c.sum() / n),
        )
    }

    /// Reveal the study an analyst would see under a binary assignment.
    pub fn observe(&self, assignment: &[u8]) -> Result<ObservedStudy> {
        if assignment.len() != self.n_units() {
            return Err(Error::Validation(format!(
                "assignment length {} does not match N = {}",
                assignment.len(),
                self.n_units()
            )));
        }
        let mut outcomes = self.y0.clone();
        for (i, &z) in assignment.iter().enumerate() {
            match z {
                0 => {}
                1 => outcomes.set_row(i, &self.y1.row(i)),
                other => {
                    return Err(Error::InvalidDesign(format!(
                        "two-arm science table observed with arm label {other}"
                    )))
                }
            }
        }
        ObservedStudy::new(outcomes, assignment.to_vec(), self.x.clone())
    }
}

/// The analyst's data: observed outcomes, assignment labels, covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedStudy {
    outcomes: DMatrix<f64>,
    assignment: Vec<u8>,
    covariates: DMatrix<f64>,
    arm_sizes: Vec<usize>,
}

impl ObservedStudy {
    /// Build and validate a study. Arm labels must be dense in 0..A with
    /// A ≥ 2, and every arm needs at least 2 units (the variance estimators
    /// require it).
    pub fn new(
        outcomes: DMatrix<f64>,
        assignment: Vec<u8>,
        covariates: DMatrix<f64>,
    ) -> Result<Self> {
        let n = outcomes.nrows();
        if n < 2 {
            return Err(Error::Validation(format!(
                "study needs at least 2 units, got {n}"
            )));
        }
        if outcomes.ncols() == 0 {
            return Err(Error::Validation("outcome dimension must be ≥ 1".into()));
        }
        if assignment.len() != n {
            return Err(Error::Validation(format!(
                "assignment length {} does not match N = {n}",
                assignment.len()
            )));
        }
        if covariates.nrows() != n {
            return Err(Error::Validation(format!(
                "covariates have {} rows but the study has {n} units",
                covariates.nrows()
            )));
        }
        let n_arms = usize::from(*assignment.iter().max().unwrap()) + 1;
        if n_arms < 2 {
            return Err(Error::InvalidDesign(
                "all units share one arm label; need at least two arms".into(),
            ));
        }
        let mut arm_sizes = vec![0usize; n_arms];
        for &z in &assignment {
            arm_sizes[usize::from(z)] += 1;
        }
        for (a, &sz) in arm_sizes.iter().enumerate() {
            if sz < 2 {
                return Err(Error::InvalidDesign(format!(
                    "arm {a} has {sz} unit(s); every arm needs at least 2"
                )));
            }
        }
        Ok(Self {
            outcomes,
            assignment,
            covariates,
            arm_sizes,
        })
    }

    /// Read a study from CSV. One row per unit; required header with outcome
    /// columns `y1..yd`, arm column `z`, and optional covariate columns
    /// `x1..xk`. Missing or non-numeric cells are rejected.
    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file)
    }

    /// Same as [`Self::from_csv_path`] over any reader.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers().map_err(Error::Csv)?.clone();

        let mut y_cols: Vec<(usize, usize)> = Vec::new(); // (outcome index, csv column)
        let mut x_cols: Vec<(usize, usize)> = Vec::new();
        let mut z_col: Option<usize> = None;
        for (ci, name) in headers.iter().enumerate() {
            let name = name.trim();
            if name == "z" {
                if z_col.replace(ci).is_some() {
                    return Err(Error::Ingestion("duplicate `z` column".into()));
                }
            } else if let Some(idx) = parse_indexed(name, 'y') {
                y_cols.push((idx, ci));
            } else if let Some(idx) = parse_indexed(name, 'x') {
                x_cols.push((idx, ci));
            } else {
                return Err(Error::Ingestion(format!(
                    "unrecognized column `{name}`; expected y1..yd, z, x1..xk"
                )));
            }
        }
        let z_col = z_col.ok_or_else(|| Error::Ingestion("missing required column `z`".into()))?;
        let d = check_contiguous(&mut y_cols, 'y')?;
        if d == 0 {
            return Err(Error::Ingestion("no outcome columns y1..yd found".into()));
        }
        let k = check_contiguous(&mut x_cols, 'x')?;

        let mut outcome_rows: Vec<f64> = Vec::new();
        let mut covariate_rows: Vec<f64> = Vec::new();
        let mut assignment: Vec<u8> = Vec::new();
        for (ri, record) in rdr.records().enumerate() {
            let record = record.map_err(Error::Csv)?;
            let cell = |ci: usize| -> Result<&str> {
                let raw = record.get(ci).unwrap_or("").trim();
                if raw.is_empty() {
                    return Err(Error::Ingestion(format!(
                        "row {}: missing value in column `{}`",
                        ri + 2,
                        headers.get(ci).unwrap_or("?")
                    )));
                }
                Ok(raw)
            };
            for &(_, ci) in &y_cols {
                outcome_rows.push(parse_f64(cell(ci)?, ri, &headers, ci)?);
            }
            for &(_, ci) in &x_cols {
                covariate_rows.push(parse_f64(cell(ci)?, ri, &headers, ci)?);
            }
            let z_raw = cell(z_col)?;
            let z: u8 = z_raw.parse().map_err(|_| {
                Error::Ingestion(format!(
                    "row {}: arm label `{z_raw}` is not a small nonnegative integer",
                    ri + 2
                ))
            })?;
            assignment.push(z);
        }
        let n = assignment.len();
        if n == 0 {
            return Err(Error::Ingestion("CSV contains no data rows".into()));
        }
        let outcomes = DMatrix::from_row_slice(n, d, &outcome_rows);
        let covariates = DMatrix::from_row_slice(n, k, &covariate_rows);
        Self::new(outcomes, assignment, covariates)
    }

    pub fn n_units(&self) -> usize {
        self.outcomes.nrows()
    }

    pub fn outcome_dim(&self) -> usize {
        self.outcomes.ncols()
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    pub fn assignment(&self) -> &[u8] {
        &self.assignment
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn arm_sizes(&self) -> &[usize] {
        &self.arm_sizes
    }

    pub fn n_arms(&self) -> usize {
        self.arm_sizes.len()
    }

    pub fn is_binary(&self) -> bool {
        self.arm_sizes.len() == 2
    }

    /// Treated count n₁ for a binary study.
    pub fn n_treated(&self) -> Result<usize> {
        if !self.is_binary() {
            return Err(Error::InvalidDesign(format!(
                "expected a two-arm study, found {} arms",
                self.n_arms()
            )));
        }
        Ok(self.arm_sizes[1])
    }
}

fn parse_indexed(name: &str, prefix: char) -> Option<usize> {
    let rest = name.strip_prefix(prefix)?;
    let idx: usize = rest.parse().ok()?;
    if idx == 0 {
        return None;
    }
    Some(idx)
}

fn parse_f64(raw: &str, row: usize, headers: &csv::StringRecord, ci: usize) -> Result<f64> {
    raw.parse().map_err(|_| {
        Error::Ingestion(format!(
            "row {}: value `{raw}` in column `{}` is not numeric",
            row + 2,
            headers.get(ci).unwrap_or("?")
        ))
    })
}

/// Sort `(index, column)` pairs and verify the indices are exactly 1..=m.
fn check_contiguous(cols: &mut Vec<(usize, usize)>, prefix: char) -> Result<usize> {
    cols.sort_by_key(|&(idx, _)| idx);
    for (expect, &(idx, _)) in cols.iter().enumerate() {
        if idx != expect + 1 {
            return Err(Error::Ingestion(format!(
                "{prefix}-columns must be numbered contiguously from {prefix}1; \
                 found {prefix}{idx} where {prefix}{} was expected",
                expect + 1
            )));
        }
    }
    Ok(cols.len())
}

/// Difference in means between arm 1 and arm 0, column-wise:
/// (1/n₁) Σ w_i r_i − (1/n₀) Σ (1−w_i) r_i.
pub fn difference_in_means(values: &DMatrix<f64>, assignment: &[u8]) -> Result<DVector<f64>> {
    let n = values.nrows();
    if assignment.len() != n {
        return Err(Error::Validation(format!(
            "assignment length {} does not match {} rows",
            assignment.len(),
            n
        )));
    }
    let n1 = assignment.iter().filter(|&&z| z == 1).count();
    let n0 = assignment.iter().filter(|&&z| z == 0).count();
    if n1 + n0 != n {
        return Err(Error::InvalidDesign(
            "difference in means requires binary arm labels".into(),
        ));
    }
    if n1 == 0 || n0 == 0 {
        return Err(Error::InvalidDesign(
            "degenerate assignment: both arms must be non-empty".into(),
        ));
    }
    let m = values.ncols();
    // Arm sums first, one division per arm at the end: constant columns then
    // yield an exactly zero difference instead of accumulated rounding noise.
    let mut sum1 = DVector::zeros(m);
    let mut sum0 = DVector::zeros(m);
    for i in 0..n {
        let target = if assignment[i] == 1 {
            &mut sum1
        } else {
            &mut sum0
        };
        for j in 0..m {
            target[j] += values[(i, j)];
        }
    }
    Ok(sum1 / n1 as f64 - sum0 / n0 as f64)
}

/// The science table an analyst would impute under the constant-effect null
/// τ_i = c for all i: control column y_i(Z_i) − Z_i·c, treated column equals
/// control + c. Observing the result under the original assignment reproduces
/// the observed outcomes exactly.
pub fn impute_sharp_null(study: &ObservedStudy, c: &DVector<f64>) -> Result<FinitePopulation> {
    if !study.is_binary() {
        return Err(Error::InvalidDesign(
            "sharp-null imputation with a shift is defined for two-arm studies".into(),
        ));
    }
    let d = study.outcome_dim();
    if c.len() != d {
        return Err(Error::Validation(format!(
            "null shift has length {}, outcomes have dimension {d}",
            c.len()
        )));
    }
    let mut y0 = study.outcomes().clone();
    for (i, &z) in study.assignment().iter().enumerate() {
        if z == 1 {
            for j in 0..d {
                y0[(i, j)] -= c[j];
            }
        }
    }
    let mut y1 = y0.clone();
    for i in 0..y1.nrows() {
        for j in 0..d {
            y1[(i, j)] += c[j];
        }
    }
    FinitePopulation::new(y1, y0, study.covariates().clone())
}

/// Finite-population means and N−1-divisor covariance blocks.
#[derive(Debug, Clone)]
pub struct MomentSet {
    pub mean_y1: DVector<f64>,
    pub mean_y0: DVector<f64>,
    pub mean_x: DVector<f64>,
    pub sigma_y1: DMatrix<f64>,
    pub sigma_y0: DMatrix<f64>,
    pub sigma_tau: DMatrix<f64>,
    pub sigma_x: DMatrix<f64>,
    pub sigma_y1x: DMatrix<f64>,
    pub sigma_y0x: DMatrix<f64>,
    pub sigma_taux: DMatrix<f64>,
}

/// Column means of a matrix.
fn col_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

/// Cross-covariance of two matrices over rows, divisor N−1.
fn cross_cov(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let ma = col_means(a);
    let mb = col_means(b);
    let mut out = DMatrix::zeros(a.ncols(), b.ncols());
    for i in 0..n {
        for p in 0..a.ncols() {
            let da = a[(i, p)] - ma[p];
            for q in 0..b.ncols() {
                out[(p, q)] += da * (b[(i, q)] - mb[q]);
            }
        }
    }
    out / (n as f64 - 1.0)
}

/// All finite-population moments of a science table in one pass.
pub fn population_moments(pop: &FinitePopulation) -> MomentSet {
    let tau = pop.effects();
    MomentSet {
        mean_y1: col_means(pop.y1()),
        mean_y0: col_means(pop.y0()),
        mean_x: col_means(pop.covariates()),
        sigma_y1: cross_cov(pop.y1(), pop.y1()),
        sigma_y0: cross_cov(pop.y0(), pop.y0()),
        sigma_tau: cross_cov(&tau, &tau),
        sigma_x: cross_cov(pop.covariates(), pop.covariates()),
        sigma_y1x: cross_cov(pop.y1(), pop.covariates()),
        sigma_y0x: cross_cov(pop.y0(), pop.covariates()),
        sigma_taux: cross_cov(&tau, pop.covariates()),
    }
}

/// Finite-N analogues of the limiting covariances of (√N τ̂, √N δ̂) under a
/// completely randomized design with n₁ treated units.
#[derive(Debug, Clone)]
pub struct OracleCovariances {
    /// Covariance of the randomization law (uses the true effects).
    pub v_full: DMatrix<f64>,
    /// Covariance of the sharp-null permutation law.
    pub v_tilde: DMatrix<f64>,
}

/// Assemble the oracle covariances from population moments with p ≡ n₁/N.
pub fn oracle_covariances(pop: &FinitePopulation, n1: usize) -> Result<OracleCovariances> {
    let n = pop.n_units();
    if n1 == 0 || n1 >= n {
        return Err(Error::InvalidDesign(format!(
            "n1 = {n1} must satisfy 1 ≤ n1 ≤ N−1 with N = {n}"
        )));
    }
    let m = population_moments(pop);
    let p = n1 as f64 / n as f64;
    let q = 1.0 - p;
    let (d, k) = (pop.outcome_dim(), pop.covariate_dim());

    let v_tt = &m.sigma_y1 / p + &m.sigma_y0 / q - &m.sigma_tau;
    let v_td = &m.sigma_y1x / p + &m.sigma_y0x / q;
    let v_dd = &m.sigma_x / (p * q);
    let vt_tt = &m.sigma_y1 / q + &m.sigma_y0 / p;
    let vt_td = &m.sigma_y1x / q + &m.sigma_y0x / p;

    let assemble = |tt: &DMatrix<f64>, td: &DMatrix<f64>| {
        let mut v = DMatrix::zeros(d + k, d + k);
        v.view_mut((0, 0), (d, d)).copy_from(tt);
        v.view_mut((0, d), (d, k)).copy_from(td);
        v.view_mut((d, 0), (k, d)).copy_from(&td.transpose());
        v.view_mut((d, d), (k, k)).copy_from(&v_dd);
        v
    };
    Ok(OracleCovariances {
        v_full: assemble(&v_tt, &v_td),
        v_tilde: assemble(&vt_tt, &vt_td),
    })
}
