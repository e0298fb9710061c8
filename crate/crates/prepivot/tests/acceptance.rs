//! End-to-end acceptance gate.
//!
//! Eleven checks covering the engine's core guarantees: finite-sample
//! exactness, closed-form/Monte-Carlo agreement, qualitative reproduction of
//! the two simulation batteries, estimator algebra, design sampling,
//! stochastic-dominance properties of the pushforward, CLI determinism, and
//! confidence-set coverage. Each test prints one `PASS` line with the
//! measured quantities (visible under `--nocapture`); a failed assertion
//! carries the same numbers in its message.

mod support;

use std::process::Command;

use nalgebra::{DMatrix, DVector};
use prepivot::covariance::{multiarm_contrast, neyman_unpooled, CovEstimate};
use prepivot::design::{AssignmentSpace, BalanceCriterion};
use prepivot::estimator::{tau_hat, tau_hat_contrast, tau_hat_reg, EstimatorSpec};
use prepivot::frt::{randomization_test, raw_statistic_test, OmegaMode, TestConfig};
use prepivot::gauss::{pushforward_cdf, GaussEngineConfig, GaussMethod, MethodUsed};
use prepivot::population::ObservedStudy;
use prepivot::rng::{substream, Domain};
use prepivot::sim::{
    generate_table1_population, run_scenario, table1_balance_metric, EffectVariant,
    Scenario, ScenarioConfig,
};
use prepivot::statistic::{Family, StatisticSpec, XiRecipe, XiValue};
use support::MixRng;

/// Column of deterministic pseudo-normal outcomes.
fn normal_column(n: usize, rng: &mut MixRng) -> DMatrix<f64> {
    DMatrix::from_fn(n, 1, |_, _| rng.normal())
}

/// A uniformly random n-choose-n1 binary assignment (Fisher–Yates prefix).
fn random_assignment(n: usize, n1: usize, rng: &mut MixRng) -> Vec<u8> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..n1 {
        let j = i + (rng.next_u64() as usize) % (n - i);
        idx.swap(i, j);
    }
    let mut w = vec![0u8; n];
    for &i in &idx[..n1] {
        w[i] = 1;
    }
    w
}

/// Random symmetric positive-definite matrix A·Aᵀ + ridge·I.
fn random_spd(dim: usize, ridge: f64, rng: &mut MixRng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.normal());
    &a * a.transpose() + DMatrix::identity(dim, dim) * ridge
}

fn no_covariates(n: usize) -> DMatrix<f64> {
    DMatrix::zeros(n, 0)
}

/// Criterion 1 — exactness under the no-effect-on-any-unit null: with both
/// potential outcomes equal, treating every assignment of a 10-choose-5
/// design as observed must reject at most ⌈α·252⌉ times at every α.
#[test]
fn criterion_01_finite_sample_exactness() {
    let mut rng = MixRng(41);
    let y = normal_column(10, &mut rng);
    let space = AssignmentSpace::cre(10, 5).unwrap();
    let all = space.enumerate(1_000).unwrap();
    assert_eq!(all.len(), 252);

    let mut cfg = TestConfig::new("dim", EstimatorSpec::Dim).unwrap();
    cfg.gauss.draws = 500;
    cfg.gauss.seed = 20_240_811;

    let p_values: Vec<f64> = all
        .iter()
        .map(|w| {
            let study =
                ObservedStudy::new(y.clone(), w.clone(), no_covariates(10)).unwrap();
            randomization_test(&study, &space, &cfg).unwrap().p_value
        })
        .collect();

    let mut detail = String::new();
    for alpha in [0.05, 0.10, 0.25, 0.50] {
        let rejections = p_values.iter().filter(|&&p| p <= alpha).count();
        let bound = (alpha * 252.0).ceil() as usize;
        assert!(
            rejections <= bound,
            "level {alpha}: {rejections} rejections out of 252 exceeds the bound {bound}"
        );
        detail.push_str(&format!(" α={alpha}: {rejections}/252≤{bound}"));
    }
    println!("acceptance 01 finite-sample exactness: PASS{detail}");
}

/// Criterion 2 — on univariate complete randomization, the prepivoted
/// unstudentized test and the raw studentized test give identical p-values.
#[test]
fn criterion_02_prepivot_equals_studentization() {
    let space = AssignmentSpace::cre(12, 6).unwrap();
    for trial in 0..50u64 {
        let mut rng = MixRng(1_000 + trial);
        let scale = 0.5 + 2.0 * rng.uniform();
        let shift = rng.uniform_range(-3.0, 3.0);
        let y = DMatrix::from_fn(12, 1, |_, _| shift + scale * rng.normal());
        let w = random_assignment(12, 6, &mut rng);
        let study = ObservedStudy::new(y, w, no_covariates(12)).unwrap();

        let mut pre_cfg = TestConfig::new("dim", EstimatorSpec::Dim).unwrap();
        pre_cfg.gauss.seed = trial;
        let raw_cfg = TestConfig::new("student", EstimatorSpec::Dim).unwrap();

        let p_pre = randomization_test(&study, &space, &pre_cfg).unwrap().p_value;
        let p_raw = raw_statistic_test(&study, &space, &raw_cfg).unwrap().p_value;
        assert_eq!(
            p_pre.to_bits(),
            p_raw.to_bits(),
            "trial {trial}: prepivoted p = {p_pre} but studentized raw p = {p_raw}"
        );
    }
    println!(
        "acceptance 02 prepivoted dim ≡ studentized raw: PASS (50/50 exact p matches)"
    );
}

/// Criterion 3 — the matched quadratic-form pushforward equals an independent
/// chi-square CDF oracle; forced Monte Carlo with 10⁶ draws agrees within
/// three binomial standard errors.
#[test]
fn criterion_03_chi_square_pushforward() {
    support::assert_oracles_hold();
    let spec = StatisticSpec {
        family: Family::QuadForm,
        xi_recipe: XiRecipe::NeymanTtBlock,
    };

    // Closed route, d = 3, random positive-definite covariance.
    let mut rng = MixRng(7);
    let v3 = random_spd(3, 0.4, &mut rng);
    let est3 = CovEstimate::new(v3.clone(), 3, 0).unwrap();
    let xi3 = XiValue::Matrix(v3);
    let auto = GaussEngineConfig {
        draws: 1_000,
        seed: 9,
        method: GaussMethod::Auto,
    };
    let mut worst = 0.0f64;
    for t in [0.1, 0.5, 1.0, 2.0, 3.0, 5.0, 8.0, 12.0, 20.0] {
        let got = pushforward_cdf(&est3, &spec, &xi3, &BalanceCriterion::None, t, &auto, 0)
            .unwrap();
        assert_eq!(got.method_used, MethodUsed::ClosedChiSquare);
        let want = support::chi_square_cdf(3.0, t);
        worst = worst.max((got.g - want).abs());
        assert!(
            (got.g - want).abs() <= 1e-8,
            "closed route at t={t}: engine {} vs oracle {want}",
            got.g
        );
    }

    // Hand value: the d = 2 upper-5% point maps to 0.95.
    let v2 = random_spd(2, 0.3, &mut rng);
    let est2 = CovEstimate::new(v2.clone(), 2, 0).unwrap();
    let got95 = pushforward_cdf(
        &est2,
        &spec,
        &XiValue::Matrix(v2),
        &BalanceCriterion::None,
        5.991_464_547_107_979,
        &auto,
        0,
    )
    .unwrap();
    assert!((got95.g - 0.95).abs() <= 1e-8, "chi-square(2) hand point: {}", got95.g);

    // Forced Monte Carlo, B = 10⁶.
    let mc = GaussEngineConfig {
        draws: 1_000_000,
        seed: 9,
        method: GaussMethod::MonteCarlo,
    };
    let mut mc_detail = String::new();
    for (i, t) in [1.0, 4.0, 9.0].into_iter().enumerate() {
        let got = pushforward_cdf(
            &est3,
            &spec,
            &xi3,
            &BalanceCriterion::None,
            t,
            &mc,
            i as u64,
        )
        .unwrap();
        assert_eq!(got.method_used, MethodUsed::MonteCarlo);
        let want = support::chi_square_cdf(3.0, t);
        let bound = 3.0 * (want * (1.0 - want) / 1e6).sqrt();
        assert!(
            (got.g - want).abs() <= bound,
            "MC route at t={t}: |{} − {want}| > {bound}",
            got.g
        );
        mc_detail.push_str(&format!(" t={t}: |Δ|={:.2e}≤{:.2e}", (got.g - want).abs(), bound));
    }
    println!(
        "acceptance 03 chi-square pushforward: PASS (closed worst |Δ|={worst:.2e};{mc_detail})"
    );
}

/// Criterion 4 — univariate rerandomized battery at the averaged-out null:
/// raw tests over-reject (unstudentized mildly, studentized above level),
/// the prepivoted test stays below level and tracks its large-sample twin.
#[test]
fn criterion_04_univariate_battery_reproduction() {
    let cfg = ScenarioConfig {
        scenario: Scenario::Table1,
        n: 1_000,
        sims: 1_000,
        draws_omega: 500,
        draws_gauss: 2_000,
        alpha: 0.05,
        effect: EffectVariant::Weak,
        seed: 11,
    };
    let result = run_scenario(&cfg).unwrap();
    let rate = |name: &str| {
        result
            .rates
            .iter()
            .find(|r| r.method == name)
            .unwrap_or_else(|| panic!("missing method {name}"))
            .rate
    };
    let (dim, student, pre, ls) =
        (rate("frt-dim"), rate("frt-student"), rate("frt-pre"), rate("ls"));
    assert!(
        (0.045..=0.095).contains(&dim),
        "unstudentized raw rate {dim} outside [0.045, 0.095]"
    );
    assert!(
        (0.058..=0.108).contains(&student),
        "studentized raw rate {student} outside [0.058, 0.108]"
    );
    assert!(pre <= 0.035, "prepivoted rate {pre} exceeds 0.035");
    assert!(
        (pre - ls).abs() <= 0.015,
        "prepivoted {pre} and large-sample {ls} disagree by more than 0.015"
    );
    println!(
        "acceptance 04 univariate battery: PASS (dim={dim:.3} student={student:.3} \
         pre={pre:.3} large-sample={ls:.3})"
    );
}

/// Criterion 5 — 25-dimensional battery at the averaged-out null: the pooled
/// quadratic form's raw test collapses while its prepivoted form stays near
/// level, and the variance-matched quadratic form is invariant to
/// prepivoting dataset by dataset.
#[test]
fn criterion_05_multivariate_battery_reproduction() {
    let cfg = ScenarioConfig {
        scenario: Scenario::Table2,
        n: 300,
        sims: 500,
        draws_omega: 500,
        draws_gauss: 2_000,
        alpha: 0.05,
        effect: EffectVariant::Weak,
        seed: 12,
    };
    let result = run_scenario(&cfg).unwrap();
    let col = |name: &str| {
        let i = result
            .methods
            .iter()
            .position(|m| m == name)
            .unwrap_or_else(|| panic!("missing method {name}"));
        &result.p_values[i]
    };
    let rate = |name: &str| {
        result.rates.iter().find(|r| r.method == name).unwrap().rate
    };

    let pooled_raw = rate("frt-pooled");
    let pooled_pre = rate("pre-pooled");
    assert!(pooled_raw >= 0.90, "pooled raw rate {pooled_raw} below 0.90");
    assert!(
        (0.10..=0.24).contains(&pooled_pre),
        "pooled prepivoted rate {pooled_pre} outside [0.10, 0.24]"
    );

    let raw_hot = col("frt-hotelling");
    let pre_hot = col("pre-hotelling");
    for (s, (a, b)) in raw_hot.iter().zip(pre_hot).enumerate() {
        assert_eq!(
            a.to_bits(),
            b.to_bits(),
            "dataset {s}: variance-matched quadratic form raw p {a} != prepivoted p {b}"
        );
    }
    println!(
        "acceptance 05 multivariate battery: PASS (pooled raw={pooled_raw:.3} \
         pooled pre={pooled_pre:.3}; matched-form p equal on all 500 datasets)"
    );
}

/// Criterion 6 — the adjusted estimator equals the difference in means of
/// globally-centered within-arm regression residuals, computed here with an
/// independent normal-equations solver.
#[test]
fn criterion_06_regression_adjustment_identity() {
    let (n, k) = (40usize, 3usize);
    let mut worst = 0.0f64;
    for trial in 0..200u64 {
        let mut rng = MixRng(5_000 + trial);
        let x = DMatrix::from_fn(n, k, |_, _| rng.normal());
        let mut y = DVector::zeros(n);
        let slope = [1.5 - rng.uniform(), rng.uniform_range(-2.0, 2.0), 0.7];
        for i in 0..n {
            y[i] = 2.0 * rng.normal()
                + slope[0] * x[(i, 0)]
                + slope[1] * x[(i, 1)]
                + slope[2] * x[(i, 2)];
        }
        let n1 = 14 + (trial as usize % 13);
        let w = random_assignment(n, n1, &mut rng);
        let study = ObservedStudy::new(
            DMatrix::from_column_slice(n, 1, y.as_slice()),
            w.clone(),
            x.clone(),
        )
        .unwrap();
        let fit = tau_hat_reg(&study, &w).unwrap();

        // Oracle: per-arm least squares of y on [1, x − x̄_full], then the
        // plain difference in means of the globally-centered residuals.
        let mut x_bar = vec![0.0; k];
        for i in 0..n {
            for j in 0..k {
                x_bar[j] += x[(i, j)] / n as f64;
            }
        }
        let mut slopes = vec![vec![0.0; k]; 2];
        for arm in 0..2u8 {
            let rows: Vec<usize> = (0..n).filter(|&i| w[i] == arm).collect();
            let design: Vec<Vec<f64>> = rows
                .iter()
                .map(|&i| {
                    let mut row = vec![1.0];
                    row.extend((0..k).map(|j| x[(i, j)] - x_bar[j]));
                    row
                })
                .collect();
            let targets: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
            let beta = support::lstsq(&design, &targets);
            slopes[arm as usize] = beta[1..].to_vec();
        }
        let mut arm_sum = [0.0f64; 2];
        let mut arm_count = [0usize; 2];
        for i in 0..n {
            let arm = usize::from(w[i]);
            let mut e = y[i];
            for j in 0..k {
                e -= slopes[arm][j] * (x[(i, j)] - x_bar[j]);
            }
            arm_sum[arm] += e;
            arm_count[arm] += 1;
        }
        let oracle = arm_sum[1] / arm_count[1] as f64 - arm_sum[0] / arm_count[0] as f64;

        let gap = (fit.tau - oracle).abs();
        worst = worst.max(gap);
        assert!(
            gap <= 1e-10,
            "trial {trial}: adjusted estimate {} vs residual difference in means {oracle}",
            fit.tau
        );
    }
    println!(
        "acceptance 06 adjusted-estimator residual identity: PASS \
         (200 instances, worst |Δ| = {worst:.2e})"
    );
}

/// Criterion 7 — with two arms and the (−1, 1) contrast, the multi-arm
/// estimator and its covariance reduce to the two-arm difference in means
/// and its unpooled covariance.
#[test]
fn criterion_07_two_arm_contrast_reduction() {
    let c_y = DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]);
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let mut rng = MixRng(9_000 + trial);
        let n = 30;
        let d = 1 + (trial as usize % 2);
        let y = DMatrix::from_fn(n, d, |_, j| (j as f64 + 1.0) * rng.normal() + rng.uniform());
        let n1 = 10 + (trial as usize % 10);
        let w = random_assignment(n, n1, &mut rng);
        let study = ObservedStudy::new(y.clone(), w.clone(), no_covariates(n)).unwrap();

        let via_contrast = tau_hat_contrast(&study, &w, &c_y).unwrap();
        let direct = tau_hat(&study, &w).unwrap();
        assert_eq!(via_contrast.len(), d);
        for j in 0..d {
            let gap = (via_contrast[j] - direct[j]).abs();
            worst = worst.max(gap);
            assert!(
                gap <= 1e-12,
                "trial {trial}: contrast estimate {} vs difference in means {}",
                via_contrast[j],
                direct[j]
            );
        }

        let v_contrast = multiarm_contrast(&y, &w, 2, &c_y).unwrap();
        let v_direct = neyman_unpooled(&y, &no_covariates(n), &w).unwrap().tau_tau();
        for j in 0..d {
            for l in 0..d {
                let gap = (v_contrast[(j, l)] - v_direct[(j, l)]).abs();
                worst = worst.max(gap);
                assert!(
                    gap <= 1e-12,
                    "trial {trial}: covariance entry ({j},{l}) {} vs {}",
                    v_contrast[(j, l)],
                    v_direct[(j, l)]
                );
            }
        }
    }
    println!(
        "acceptance 07 two-arm contrast reduction: PASS (100 instances, worst \
         |Δ| = {worst:.2e})"
    );
}

/// Criterion 8 — sampling the Mahalanobis-constrained design at threshold 1
/// with the model-matched metric accepts at the chi-square(3) unit-ball mass,
/// about one in five.
#[test]
fn criterion_08_rerandomization_acceptance_rate() {
    let mut rng = substream(77, Domain::Population, 0, 0);
    let pop = generate_table1_population(1_000, EffectVariant::Sharp, &mut rng).unwrap();
    let criterion = BalanceCriterion::mahalanobis(1.0, table1_balance_metric()).unwrap();
    let space =
        AssignmentSpace::rerandomized(1_000, 200, pop.covariates().clone(), criterion)
            .unwrap();
    let batch = space.sample_uniform(4_000, 99).unwrap();
    let rate = batch.acceptance_rate();
    let oracle = support::chi_square_cdf(3.0, 1.0);
    assert!(
        batch.attempts >= 15_000,
        "only {} super-space attempts; expected about 20 000",
        batch.attempts
    );
    assert!(
        (0.17..=0.23).contains(&rate),
        "acceptance rate {rate} outside [0.17, 0.23] (chi-square(3) mass {oracle:.5})"
    );
    println!(
        "acceptance 08 rerandomization acceptance rate: PASS (rate={rate:.4} over {} \
         attempts; chi-square(3) mass below 1 = {oracle:.5})",
        batch.attempts
    );
}

/// Criterion 9 — dominance properties of the conditional pushforward.
///
/// First: inflating only the effect block of the joint covariance can only
/// push statistic mass upward, so the conditional sublevel probability can
/// only fall (checked by independent Monte Carlo evaluations at 4 combined
/// standard errors of slack). Second: draws from a dominated covariance
/// pushed through the dominating closed-form CDF are stochastically below
/// uniform (one-sided empirical-CDF bound at 2/√m).
#[test]
fn criterion_09_dominance_properties() {
    // Part 1: conditional sublevel mass is antitone in the effect block.
    for trial in 0..20u64 {
        let mut rng = MixRng(40_000 + trial);
        let (family, d) = match trial % 4 {
            0 => (Family::Abs, 1),
            1 => (Family::L2Norm, 2),
            2 => (Family::QuadForm, 3),
            _ => (Family::MaxAbsT, 2),
        };
        let k = 1 + (trial as usize % 2);
        let total = d + k;

        let v1 = random_spd(total, 0.3, &mut rng);
        let bump = DVector::from_fn(total, |r, _| {
            if r < d {
                rng.uniform_range(0.4, 1.6)
            } else {
                0.0
            }
        });
        let v2 = &v1 + &bump * bump.transpose();
        let est1 = CovEstimate::new(v1.clone(), d, k).unwrap();
        let est2 = CovEstimate::new(v2, d, k).unwrap();

        // Mahalanobis ball sized to keep a healthy acceptance mass.
        let metric = random_spd(k, 0.5, &mut rng);
        let v_dd = est1.delta_delta();
        let mut trace = 0.0;
        for j in 0..k {
            let rhs: Vec<f64> = (0..k).map(|r| v_dd[(r, j)]).collect();
            let col = support::solve_dense(
                (0..k)
                    .map(|r| (0..k).map(|c| metric[(r, c)]).collect())
                    .collect(),
                rhs,
            );
            trace += col[j];
        }
        let criterion = BalanceCriterion::mahalanobis(1.2 * trace, metric).unwrap();

        let (xi, scale) = match family {
            Family::Abs => (XiValue::Scalar(1.0), est1.tau_tau()[(0, 0)].sqrt()),
            Family::L2Norm => (XiValue::Scalar(1.0), est1.tau_tau().trace().sqrt()),
            Family::QuadForm => {
                let eta = random_spd(d, 0.4, &mut rng);
                let mut tr = 0.0;
                let v_tt = est1.tau_tau();
                for j in 0..d {
                    let rhs: Vec<f64> = (0..d).map(|r| v_tt[(r, j)]).collect();
                    let col = support::solve_dense(
                        (0..d)
                            .map(|r| (0..d).map(|c| eta[(r, c)]).collect())
                            .collect(),
                        rhs,
                    );
                    tr += col[j];
                }
                (XiValue::Matrix(eta), tr)
            }
            Family::MaxAbsT => {
                let v_tt = est1.tau_tau();
                let s = DVector::from_fn(d, |j, _| (1.0 + 0.5 * rng.uniform()) * 1.0f64.max(v_tt[(j, j)]).sqrt());
                (XiValue::Scales(s), 1.0)
            }
        };
        let spec = StatisticSpec {
            family,
            xi_recipe: XiRecipe::Unit,
        };
        let mc = GaussEngineConfig {
            draws: 40_000,
            seed: 500 + trial,
            method: GaussMethod::MonteCarlo,
        };
        for (ci, c) in [0.6, 1.0, 1.8].into_iter().enumerate() {
            let v = c * scale;
            let g1 = pushforward_cdf(&est1, &spec, &xi, &criterion, v, &mc, 2 * (ci as u64))
                .unwrap();
            let g2 = pushforward_cdf(&est2, &spec, &xi, &criterion, v, &mc, 2 * (ci as u64) + 1)
                .unwrap();
            let slack =
                4.0 * (g1.mc_std_error.powi(2) + g2.mc_std_error.powi(2)).sqrt() + 1e-12;
            assert!(
                g2.g <= g1.g + slack,
                "trial {trial} ({family:?}, v={v:.3}): inflated-covariance mass {} \
                 exceeds baseline {} by more than {slack:.4}",
                g2.g,
                g1.g
            );
        }
    }

    // Part 2: dominated draws through the dominating CDF sit below uniform.
    let m = 4_000usize;
    let slack = 2.0 / (m as f64).sqrt();
    let closed = GaussEngineConfig {
        draws: 500,
        seed: 1,
        method: GaussMethod::Auto,
    };
    let mut worst_gap = f64::NEG_INFINITY;
    for trial in 0..20u64 {
        let mut rng = MixRng(60_000 + trial);
        let mut u_values = Vec::with_capacity(m);
        if trial % 2 == 0 {
            // Scalar: |N(0, s1²)| through the closed CDF of N(0, s1² + b²).
            let s1 = rng.uniform_range(0.4, 2.0);
            let b = rng.uniform_range(0.2, 1.5);
            let v2 = DMatrix::from_element(1, 1, s1 * s1 + b * b);
            let est2 = CovEstimate::new(v2, 1, 0).unwrap();
            let spec = StatisticSpec {
                family: Family::Abs,
                xi_recipe: XiRecipe::Unit,
            };
            let xi = XiValue::Scalar(1.0);
            for _ in 0..m {
                let t = (s1 * rng.normal()).abs();
                let g = pushforward_cdf(&est2, &spec, &xi, &BalanceCriterion::None, t, &closed, 0)
                    .unwrap();
                assert_eq!(g.method_used, MethodUsed::ClosedAbs);
                u_values.push(g.g);
            }
        } else {
            // Quadratic: A·z with V1 = A·Aᵀ through the chi-square CDF of
            // V2 = V1 + b·bᵀ (matched quadratic form in V2).
            let d = 2 + (trial as usize % 2);
            let a = DMatrix::from_fn(d, d, |_, _| rng.normal());
            let v1 = &a * a.transpose();
            let bump = DVector::from_fn(d, |_, _| rng.uniform_range(0.3, 1.2));
            let v2 = &v1 + &bump * bump.transpose();
            let est2 = CovEstimate::new(v2.clone(), d, 0).unwrap();
            let spec = StatisticSpec {
                family: Family::QuadForm,
                xi_recipe: XiRecipe::NeymanTtBlock,
            };
            let xi = XiValue::Matrix(v2.clone());
            let mut z = DVector::zeros(d);
            for _ in 0..m {
                for r in 0..d {
                    z[r] = rng.normal();
                }
                let draw = &a * &z;
                // f(draw) = drawᵀ V2⁻¹ draw via the independent dense solver.
                let sol = support::solve_dense(
                    (0..d)
                        .map(|r| (0..d).map(|c| v2[(r, c)]).collect())
                        .collect(),
                    draw.iter().copied().collect(),
                );
                let t: f64 = draw.iter().zip(&sol).map(|(x, s)| x * s).sum();
                let g = pushforward_cdf(
                    &est2,
                    &spec,
                    &xi,
                    &BalanceCriterion::None,
                    t.max(0.0),
                    &closed,
                    0,
                )
                .unwrap();
                assert_eq!(g.method_used, MethodUsed::ClosedChiSquare);
                u_values.push(g.g);
            }
        }
        u_values.sort_by(f64::total_cmp);
        // Largest excess of the sample over the uniform CDF envelope.
        let gap = u_values
            .iter()
            .enumerate()
            .map(|(i, &u)| u - i as f64 / m as f64)
            .fold(f64::NEG_INFINITY, f64::max);
        worst_gap = worst_gap.max(gap);
        assert!(
            gap <= slack,
            "trial {trial}: dominated draws exceed the uniform envelope by {gap:.4} \
             (allowed {slack:.4})"
        );
    }
    println!(
        "acceptance 09 dominance properties: PASS (20 conditional pairs at 4 SE; 20 \
         dominated-draw sets, worst envelope excess {worst_gap:.4} ≤ {slack:.4})"
    );
}

/// Criterion 10 — `test` and `simulate` invocations repeated at different
/// thread counts produce byte-identical outputs.
#[test]
fn criterion_10_thread_count_determinism() {
    let exe = env!("CARGO_BIN_EXE_prepivot");
    let dir = tempfile::tempdir().unwrap();

    // Study fixture: 16 units, covariate exactly mirrored across arms so the
    // observed assignment is balanced at any threshold.
    let x_vals = [0.3, -1.2, 0.8, 2.1, -0.5, 1.4, 0.0, -2.2];
    let mut rows = String::from("y1,z,x1\n");
    let mut rng = MixRng(17);
    for (i, &x) in x_vals.iter().enumerate() {
        rows.push_str(&format!("{:.6},1,{x}\n", 1.5 + rng.normal() + 0.4 * i as f64));
    }
    for &x in &x_vals {
        rows.push_str(&format!("{:.6},0,{x}\n", rng.normal()));
    }
    let csv_path = dir.path().join("study.csv");
    std::fs::write(&csv_path, rows).unwrap();

    let run = |label: &str, threads: &str, extra: &[&str]| -> Vec<u8> {
        let out = dir.path().join(format!("{label}-t{threads}"));
        let status = Command::new(exe)
            .args(extra)
            .arg("--threads")
            .arg(threads)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success(), "{label} with --threads {threads} failed");
        if out.is_dir() {
            let mut bytes = std::fs::read(out.join("rates.csv")).unwrap();
            bytes.extend(std::fs::read(out.join("config.json")).unwrap());
            bytes
        } else {
            std::fs::read(&out).unwrap()
        }
    };

    let test_args = [
        "test",
        "--data",
        csv_path.to_str().unwrap(),
        "--design",
        "rerand",
        "--balance-threshold",
        "1.0",
        "--mode",
        "sampled",
        "--draws-omega",
        "200",
        "--draws-gauss",
        "600",
        "--statistic",
        "student",
        "--seed",
        "7",
    ];
    let a = run("test", "1", &test_args);
    let b = run("test", "8", &test_args);
    assert_eq!(a, b, "test output differs between --threads 1 and --threads 8");

    let sim_args = [
        "simulate",
        "--scenario",
        "table1",
        "--n",
        "50",
        "--sims",
        "6",
        "--draws-omega",
        "80",
        "--draws-gauss",
        "300",
        "--effect",
        "weak",
        "--seed",
        "3",
    ];
    let c = run("sim", "1", &sim_args);
    let d = run("sim", "8", &sim_args);
    assert_eq!(c, d, "simulate output differs between --threads 1 and --threads 8");

    println!(
        "acceptance 10 thread-count determinism: PASS (test: {} bytes identical; \
         simulate: {} bytes identical)",
        a.len(),
        c.len()
    );
}

/// Criterion 11 — inverting the shifted test at the true constant effect:
/// across all 252 assignments of a constant-effect population, the level-0.10
/// test accepts the truth at least 90% of the time.
#[test]
fn criterion_11_confidence_coverage_at_truth() {
    let effect = 0.7;
    let mut rng = MixRng(23);
    let y0 = normal_column(10, &mut rng);
    let space = AssignmentSpace::cre(10, 5).unwrap();
    let all = space.enumerate(1_000).unwrap();

    let mut cfg = TestConfig::new("student", EstimatorSpec::Dim).unwrap();
    cfg.alpha = 0.10;
    cfg.mode = OmegaMode::Exact;
    cfg.null_shift = Some(DVector::from_element(1, effect));
    cfg.gauss.seed = 31;

    let mut covered = 0usize;
    for w in &all {
        let observed = DMatrix::from_fn(10, 1, |i, _| y0[(i, 0)] + effect * w[i] as f64);
        let study = ObservedStudy::new(observed, w.clone(), no_covariates(10)).unwrap();
        let report = randomization_test(&study, &space, &cfg).unwrap();
        if !report.reject {
            covered += 1;
        }
    }
    let coverage = covered as f64 / all.len() as f64;
    assert!(
        coverage >= 0.90,
        "true effect covered in only {covered}/252 assignments ({coverage:.4})"
    );
    println!(
        "acceptance 11 confidence coverage at the truth: PASS \
         ({covered}/252 = {coverage:.4} ≥ 0.90)"
    );
}
