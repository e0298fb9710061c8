//! Simulation harness: generative models and batch drivers that measure
//! rejection rates of the raw, prepivoted, and large-sample tests.
//!
//! Two generative models are provided. The rerandomization model draws
//! three correlated Gaussian covariates per unit and builds univariate
//! potential outcomes linear in them with shifted-exponential noise; its
//! design accepts an assignment when the scaled covariate imbalance falls
//! inside a fixed Mahalanobis ball. The multivariate model draws
//! 25-dimensional equicorrelated Gaussian outcome vectors under a completely
//! randomized design.
//!
//! Each scenario variant fixes the null by construction: `sharp` makes all
//! potential outcomes equal, `weak` recenters the control arm so the average
//! effect is exactly zero while unit-level effects vary, and the `constant`/
//! `heterogeneous` variants plant a common or average-only effect for power
//! studies.
//!
//! Runs are reproducible bit-for-bit for a fixed seed regardless of worker
//! count: every simulation derives its own seed from (master seed, sim
//! index) and results are reduced in simulation order.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Exp, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::covariance::{neyman_unpooled, pooled, psd_factor};
use crate::design::{AssignmentSpace, BalanceCriterion};
use crate::error::{Error, Result};
use crate::frt::TestConfig;
use crate::gauss::{
    prepivot_assignment, pushforward_cdf, statistic_for_assignment, AssignmentProblem,
    GaussEngineConfig, GaussMethod,
};
use crate::population::{difference_in_means, FinitePopulation, ObservedStudy};
use crate::rng::{child_seed, substream, Domain};
use crate::statistic::{evaluate, Family, StatisticSpec, XiValue};

/// Desk-scale defaults: enough simulations to see the qualitative effects
/// in minutes; scale up for publication-grade error bars.
pub const DEFAULT_SIMS: usize = 500;
pub const DEFAULT_DRAWS_OMEGA: usize = 500;
pub const DEFAULT_DRAWS_GAUSS: usize = 2000;

/// Treated fraction used by both generative models.
const TREATED_SHARE: f64 = 0.2;

/// Outcome dimension of the multivariate model.
const MULTI_DIM: usize = 25;

/// Which generative model and battery to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Univariate outcomes under a Mahalanobis-rerandomized design.
    Table1,
    /// 25-dimensional outcomes under complete randomization.
    Table2,
    /// The multivariate model with planted effects (power study).
    Power,
}

impl Scenario {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "table1" => Ok(Self::Table1),
            "table2" => Ok(Self::Table2),
            "power" => Ok(Self::Power),
            other => Err(Error::Validation(format!(
                "unknown scenario '{other}' (expected table1, table2, or power)"
            ))),
        }
    }

    fn label(&self) -> &'static str {
        match self {
            Self::Table1 => "table1",
            Self::Table2 => "table2",
            Self::Power => "power",
        }
    }
}

/// How treatment effects enter the generated population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "tau")]
pub enum EffectVariant {
    /// Every unit's effect is exactly zero.
    Sharp,
    /// Unit effects vary but average exactly to zero.
    Weak,
    /// Every unit's effect equals τ.
    Constant(f64),
    /// Unit effects vary and average exactly to τ̄.
    Heterogeneous(f64),
}

impl EffectVariant {
    /// Parse a variant name, attaching `tau` where the variant needs one.
    pub fn from_name(name: &str, tau: f64) -> Result<Self> {
        match name {
            "sharp" => Ok(Self::Sharp),
            "weak" => Ok(Self::Weak),
            "constant" => Ok(Self::Constant(tau)),
            "heterogeneous" => Ok(Self::Heterogeneous(tau)),
            other => Err(Error::Validation(format!(
                "unknown effect variant '{other}' (expected sharp, weak, constant, \
                 or heterogeneous)"
            ))),
        }
    }

    fn label(&self) -> &'static str {
        match self {
            Self::Sharp => "sharp",
            Self::Weak => "weak",
            Self::Constant(_) => "constant",
            Self::Heterogeneous(_) => "heterogeneous",
        }
    }
}

/// Full configuration of a scenario run; echoed verbatim into outputs.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub sims: usize,
    pub draws_omega: usize,
    pub draws_gauss: usize,
    pub alpha: f64,
    pub effect: EffectVariant,
    pub seed: u64,
}

impl ScenarioConfig {
    /// Desk-scale defaults for the given scenario.
    pub fn desk(scenario: Scenario, n: usize, effect: EffectVariant, seed: u64) -> Self {
        Self {
            scenario,
            n,
            sims: DEFAULT_SIMS,
            draws_omega: DEFAULT_DRAWS_OMEGA,
            draws_gauss: DEFAULT_DRAWS_GAUSS,
            alpha: 0.05,
            effect,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sims == 0 {
            return Err(Error::Validation("sims must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Validation(format!(
                "alpha {} must lie strictly inside (0, 1)",
                self.alpha
            )));
        }
        if self.n < 10 {
            return Err(Error::Validation("scenario populations need n ≥ 10".into()));
        }
        if self.draws_omega == 0 {
            return Err(Error::Validation("draws_omega must be at least 1".into()));
        }
        Ok(())
    }

    fn n_treated(&self) -> usize {
        ((self.n as f64 * TREATED_SHARE).round() as usize).max(2)
    }

    fn setting_label(&self) -> String {
        format!("{}-{}-n{}", self.scenario.label(), self.effect.label(), self.n)
    }
}

/// One row of the emitted rates table.
#[derive(Debug, Clone, Serialize)]
pub struct RateRow {
    pub method: String,
    pub setting: String,
    pub rate: f64,
    /// Binomial standard error √(r(1−r)/sims).
    pub se: f64,
}

/// All results of a scenario run.
#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub config: ScenarioConfig,
    /// Method labels, in battery order.
    pub methods: Vec<String>,
    /// Per-method p-values across simulations (method-major).
    pub p_values: Vec<Vec<f64>>,
    pub rates: Vec<RateRow>,
}

impl ScenarioResult {
    /// Write `rates.csv` and `config.json` into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut writer = csv::Writer::from_path(dir.join("rates.csv"))?;
        for row in &self.rates {
            writer.serialize(row)?;
        }
        writer.flush()?;
        let mut f = std::fs::File::create(dir.join("config.json"))?;
        let body = serde_json::to_string_pretty(&self.config)?;
        f.write_all(body.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// The covariate correlation matrix of the rerandomization model.
pub fn table1_covariate_correlation() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        3,
        3,
        &[1.0, 0.8, 0.2, 0.8, 1.0, 0.3, 0.2, 0.3, 1.0],
    )
}

/// The balance metric matching the generative model: the covariance of the
/// scaled imbalance is R / (p(1−p)) with p the treated share.
pub fn table1_balance_metric() -> DMatrix<f64> {
    table1_covariate_correlation() / (TREATED_SHARE * (1.0 - TREATED_SHARE))
}

/// Draw the univariate-outcome population of the rerandomization scenario.
pub fn generate_table1_population(
    n: usize,
    effect: EffectVariant,
    rng: &mut ChaCha12Rng,
) -> Result<FinitePopulation> {
    if n < 10 {
        return Err(Error::Validation("table1 population needs n ≥ 10".into()));
    }
    let chol = Cholesky::new(table1_covariate_correlation())
        .expect("fixed correlation matrix is positive definite");
    let l = chol.l();
    let beta0 = DVector::from_column_slice(&[-6.4, -4.0, -2.4]);
    let beta1 = DVector::from_column_slice(&[0.2, 0.4, 0.6]);
    let exp1 = Exp::new(1.0).expect("valid rate");
    let exp01 = Exp::new(0.1).expect("valid rate");

    let mut x = DMatrix::zeros(n, 3);
    let mut r0 = DVector::zeros(n);
    let mut r1 = DVector::zeros(n);
    let mut u = DVector::zeros(3);
    for i in 0..n {
        for j in 0..3 {
            u[j] = rng.sample(StandardNormal);
        }
        let xi = &l * &u;
        for j in 0..3 {
            x[(i, j)] = xi[j];
        }
        // Mean-zero shifted-exponential noise with sharply different skew
        // and scale across the two arms.
        let e0 = 1.0 - rng.sample(exp1);
        let e1 = 10.0 - rng.sample(exp01);
        r0[i] = xi.dot(&beta0) + e0;
        r1[i] = xi.dot(&beta1) + e1;
    }

    let (y1, y0) = apply_effect_univariate(&r1, &r0, effect);
    FinitePopulation::new(
        DMatrix::from_column_slice(n, 1, y1.as_slice()),
        DMatrix::from_column_slice(n, 1, y0.as_slice()),
        x,
    )
}

fn apply_effect_univariate(
    r1: &DVector<f64>,
    r0: &DVector<f64>,
    effect: EffectVariant,
) -> (DVector<f64>, DVector<f64>) {
    match effect {
        EffectVariant::Sharp => (r1.clone(), r1.clone()),
        EffectVariant::Weak => {
            let shift = r1.mean() - r0.mean();
            (r1.clone(), r0.add_scalar(shift))
        }
        EffectVariant::Constant(tau) => (r1.add_scalar(tau), r1.clone()),
        EffectVariant::Heterogeneous(tau_bar) => {
            let shift = r1.mean() - r0.mean() - tau_bar;
            (r1.clone(), r0.add_scalar(shift))
        }
    }
}

/// Draw the 25-dimensional-outcome population of the multivariate scenario.
pub fn generate_table2_population(
    n: usize,
    effect: EffectVariant,
    rng: &mut ChaCha12Rng,
) -> Result<FinitePopulation> {
    if n < 10 {
        return Err(Error::Validation("table2 population needs n ≥ 10".into()));
    }
    let d = MULTI_DIM;
    // The treated schedule is uncorrelated across coordinates; the control
    // schedule is strongly equicorrelated, (1−ρ)I + ρJ with ρ = 0.95. The
    // mismatch between the two is what breaks pooled-covariance inference.
    let rho0 = 0.95;
    let sigma0 = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { rho0 });
    let l0 = Cholesky::new(sigma0)
        .expect("equicorrelation matrix is positive definite for rho in [0,1)")
        .l();
    let mut r1 = DMatrix::zeros(n, d);
    let mut r0 = DMatrix::zeros(n, d);
    let mut u = DVector::zeros(d);
    for i in 0..n {
        for j in 0..d {
            r1[(i, j)] = rng.sample(StandardNormal);
        }
        for j in 0..d {
            u[j] = rng.sample(StandardNormal);
        }
        let row = &l0 * &u;
        for j in 0..d {
            r0[(i, j)] = row[j];
        }
    }

    let (y1, y0) = match effect {
        EffectVariant::Sharp => (r1.clone(), r1),
        EffectVariant::Weak => {
            let mut y0 = r0;
            for j in 0..d {
                let shift = r1.column(j).mean() - y0.column(j).mean();
                for i in 0..n {
                    y0[(i, j)] += shift;
                }
            }
            (r1, y0)
        }
        EffectVariant::Constant(tau) => {
            let y1 = r1.add_scalar(tau);
            (y1, r1)
        }
        EffectVariant::Heterogeneous(tau_bar) => {
            let mut y0 = r0;
            for j in 0..d {
                let shift = r1.column(j).mean() - y0.column(j).mean() - tau_bar;
                for i in 0..n {
                    y0[(i, j)] += shift;
                }
            }
            (r1, y0)
        }
    };
    FinitePopulation::new(y1, y0, DMatrix::zeros(n, 0))
}

/// The large-sample companion test: p = 1 − g_z, no randomization loop.
pub fn large_sample_test(
    study: &ObservedStudy,
    space: &AssignmentSpace,
    cfg: &TestConfig,
) -> Result<f64> {
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
    let (_, value) = prepivot_assignment(
        study.outcomes(),
        &prob,
        study.assignment(),
        &cfg.gauss,
        0,
    )?;
    Ok(1.0 - value.g)
}

/// Run a scenario end to end, returning per-method p-values and rates.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioResult> {
    cfg.validate()?;
    let methods: Vec<String> = match cfg.scenario {
        Scenario::Table1 => ["frt-dim", "frt-student", "frt-pre", "ls"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        Scenario::Table2 | Scenario::Power => [
            "frt-hotelling",
            "pre-hotelling",
            "ls-hotelling",
            "frt-pooled",
            "pre-pooled",
            "ls-pooled",
            "frt-maxt",
            "pre-maxt",
            "ls-maxt",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
    };

    let per_sim: Result<Vec<Vec<f64>>> = (0..cfg.sims)
        .into_par_iter()
        .map(|sim| match cfg.scenario {
            Scenario::Table1 => run_table1_sim(cfg, sim),
            Scenario::Table2 | Scenario::Power => run_table2_sim(cfg, sim),
        })
        .collect();
    let per_sim = per_sim?;

    let mut p_values = vec![Vec::with_capacity(cfg.sims); methods.len()];
    for sim_p in &per_sim {
        for (m, &p) in sim_p.iter().enumerate() {
            p_values[m].push(p);
        }
    }
    let setting = cfg.setting_label();
    let rates = methods
        .iter()
        .zip(&p_values)
        .map(|(method, ps)| {
            let rate =
                ps.iter().filter(|&&p| p <= cfg.alpha).count() as f64 / ps.len() as f64;
            RateRow {
                method: method.clone(),
                setting: setting.clone(),
                rate,
                se: (rate * (1.0 - rate) / ps.len() as f64).sqrt(),
            }
        })
        .collect();
    Ok(ScenarioResult {
        config: cfg.clone(),
        methods,
        p_values,
        rates,
    })
}

/// Sampled-mode p-value with the observed value counted once on both sides.
fn sampled_p(reference: &[f64], observed: f64) -> f64 {
    let count = reference.iter().filter(|&&v| v >= observed).count();
    (1 + count) as f64 / (reference.len() + 1) as f64
}

fn run_table1_sim(cfg: &ScenarioConfig, sim: usize) -> Result<Vec<f64>> {
    let sim_seed = child_seed(cfg.seed, sim as u64);
    let mut pop_rng = substream(sim_seed, Domain::Population, 0, 0);
    let pop = generate_table1_population(cfg.n, cfg.effect, &mut pop_rng)?;
    let criterion = BalanceCriterion::mahalanobis(1.0, table1_balance_metric())?;
    let space = AssignmentSpace::rerandomized(
        cfg.n,
        cfg.n_treated(),
        pop.covariates().clone(),
        criterion,
    )?;

    let z = space
        .sample_uniform(1, child_seed(sim_seed, 1))?
        .assignments
        .remove(0);
    let draws = space.sample_uniform(cfg.draws_omega, child_seed(sim_seed, 2))?;
    let outcomes = pop.observe(&z)?.outcomes().clone();

    let statistic = StatisticSpec::from_name("dim")?;
    let gauss = GaussEngineConfig {
        draws: cfg.draws_gauss,
        seed: sim_seed,
        method: GaussMethod::Auto,
    };
    let prob = AssignmentProblem {
        covariates: pop.covariates(),
        criterion: space.criterion(),
        estimator: &crate::estimator::EstimatorSpec::Dim,
        statistic: &statistic,
        n_arms: 2,
        scale_units: cfg.n as f64,
    };

    // (T_dim, T_student, g) under one assignment; the prepivoted value is
    // the same for both statistics because their sublevel sets coincide.
    let eval = |w: &[u8], stream: u64| -> Result<(f64, f64, f64)> {
        let stat = statistic_for_assignment(&outcomes, &prob, w)?;
        let v00 = stat.vhat.tau_tau()[(0, 0)];
        if !(v00 > 0.0) {
            return Err(Error::Singular(
                "degenerate outcome variance in a simulated dataset".into(),
            ));
        }
        let value = pushforward_cdf(
            &stat.vhat,
            &statistic,
            &stat.xi,
            space.criterion(),
            stat.t,
            &gauss,
            stream,
        )?;
        Ok((stat.t, stat.t / v00.sqrt(), value.g))
    };

    let obs = eval(&z, 0)?;
    let mut t_dim = Vec::with_capacity(cfg.draws_omega);
    let mut t_stu = Vec::with_capacity(cfg.draws_omega);
    let mut g = Vec::with_capacity(cfg.draws_omega);
    for (j, w) in draws.assignments.iter().enumerate() {
        let (a, b, c) = eval(w, j as u64 + 1)?;
        t_dim.push(a);
        t_stu.push(b);
        g.push(c);
    }

    Ok(vec![
        sampled_p(&t_dim, obs.0),
        sampled_p(&t_stu, obs.1),
        sampled_p(&g, obs.2),
        1.0 - obs.2,
    ])
}

/// Quadratic-form statistic with a one-shot eigenvalue-floor retry.
fn quad_stat(eta: DMatrix<f64>, scaled: &DVector<f64>) -> Result<(f64, XiValue)> {
    let xi = XiValue::Matrix(eta);
    match evaluate(Family::QuadForm, &xi, scaled) {
        Ok(t) => Ok((t, xi)),
        Err(Error::Singular(_)) => {
            let repaired = match &xi {
                XiValue::Matrix(m) => psd_factor(m).matrix,
                _ => unreachable!("quadratic parameter is a matrix"),
            };
            let xi = XiValue::Matrix(repaired);
            let t = evaluate(Family::QuadForm, &xi, scaled)?;
            Ok((t, xi))
        }
        Err(e) => Err(e),
    }
}

fn run_table2_sim(cfg: &ScenarioConfig, sim: usize) -> Result<Vec<f64>> {
    let sim_seed = child_seed(cfg.seed, sim as u64);
    let mut pop_rng = substream(sim_seed, Domain::Population, 0, 0);
    let pop = generate_table2_population(cfg.n, cfg.effect, &mut pop_rng)?;
    let space = AssignmentSpace::cre(cfg.n, cfg.n_treated())?;

    let z = space
        .sample_uniform(1, child_seed(sim_seed, 1))?
        .assignments
        .remove(0);
    let draws = space.sample_uniform(cfg.draws_omega, child_seed(sim_seed, 2))?;
    let outcomes = pop.observe(&z)?.outcomes().clone();
    let empty = DMatrix::zeros(cfg.n, 0);

    let hot_spec = StatisticSpec::from_name("hotelling")?;
    let pool_spec = StatisticSpec::from_name("hotelling-pooled")?;
    let maxt_spec = StatisticSpec::from_name("maxt")?;
    let gauss = GaussEngineConfig {
        draws: cfg.draws_gauss,
        seed: sim_seed,
        method: GaussMethod::Auto,
    };

    // Per assignment: (T_hot, g_hot, T_pool, g_pool, T_maxt, g_maxt), with
    // all three statistics sharing one covariance computation and the two
    // Monte Carlo pushforwards sharing one substream.
    let eval = |w: &[u8], stream: u64| -> Result<[f64; 6]> {
        let vhat = neyman_unpooled(&outcomes, &empty, w)?;
        let tau = difference_in_means(&outcomes, w)?;
        let scaled = &tau * (cfg.n as f64).sqrt();

        let (t_hot, xi_hot) = quad_stat(vhat.tau_tau(), &scaled)?;
        let g_hot = pushforward_cdf(
            &vhat,
            &hot_spec,
            &xi_hot,
            &BalanceCriterion::None,
            t_hot,
            &gauss,
            stream,
        )?;

        let (t_pool, xi_pool) = quad_stat(pooled(&outcomes, w)?, &scaled)?;
        let g_pool = pushforward_cdf(
            &vhat,
            &pool_spec,
            &xi_pool,
            &BalanceCriterion::None,
            t_pool,
            &gauss,
            stream,
        )?;

        let scales = DVector::from_iterator(
            MULTI_DIM,
            vhat.tau_tau().diagonal().iter().map(|&v| v.sqrt()),
        );
        let xi_maxt = XiValue::Scales(scales);
        let t_maxt = evaluate(Family::MaxAbsT, &xi_maxt, &scaled)?;
        let g_maxt = pushforward_cdf(
            &vhat,
            &maxt_spec,
            &xi_maxt,
            &BalanceCriterion::None,
            t_maxt,
            &gauss,
            stream,
        )?;

        Ok([t_hot, g_hot.g, t_pool, g_pool.g, t_maxt, g_maxt.g])
    };

    let obs = eval(&z, 0)?;
    let mut cols: [Vec<f64>; 6] = Default::default();
    for col in &mut cols {
        col.reserve(cfg.draws_omega);
    }
    for (j, w) in draws.assignments.iter().enumerate() {
        let vals = eval(w, j as u64 + 1)?;
        for (col, v) in cols.iter_mut().zip(vals) {
            col.push(v);
        }
    }

    Ok(vec![
        sampled_p(&cols[0], obs[0]),
        sampled_p(&cols[1], obs[1]),
        1.0 - obs[1],
        sampled_p(&cols[2], obs[2]),
        sampled_p(&cols[3], obs[3]),
        1.0 - obs[3],
        sampled_p(&cols[4], obs[4]),
        sampled_p(&cols[5], obs[5]),
        1.0 - obs[5],
    ])
}
