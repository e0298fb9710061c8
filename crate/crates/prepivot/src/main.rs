//! Command-line interface: randomization tests, confidence sets, scenario
//! simulations, and design-cardinality queries.
//!
//! Machine output is JSON (written to `--out`, or to stdout when no path is
//! given); when JSON goes to a file, a small aligned table is printed for
//! human eyes. Exit codes: 0 on success, 1 on usage errors, 2 on data or
//! numeric errors with a JSON diagnostic on stderr. `--threads` changes only
//! wall-clock time, never output bytes, and is deliberately not echoed into
//! configs.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use prepivot::design::DEFAULT_ENUM_CAP;
use prepivot::{
    confidence_set, randomization_test, run_scenario, AssignmentSpace, BalanceCriterion,
    EffectVariant, Error, EstimatorSpec, GaussEngineConfig, GaussMethod, ObservedStudy,
    OmegaMode, Result, Scenario, ScenarioConfig, TestConfig,
};

#[derive(Parser)]
#[command(
    name = "prepivot",
    version,
    about = "Randomization inference with Gaussian prepivoting"
)]
struct Cli {
    /// Worker threads (default: all available cores). Does not affect
    /// output bytes.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a randomization test on a study CSV.
    Test(TestArgs),
    /// Invert shifted tests over a grid into a confidence set.
    Ci(CiArgs),
    /// Run a simulation scenario and tabulate rejection rates.
    Simulate(SimArgs),
    /// Print the cardinality of an assignment space.
    Enumerate(EnumArgs),
}

/// Flags shared by `test` and `ci`; serialized verbatim into outputs.
#[derive(Args, Serialize, Clone)]
struct TestArgs {
    /// Study CSV with columns y1..yd, z, and optional x1..xk.
    #[arg(long)]
    data: PathBuf,
    /// Design: cre, rerand, paired, or multiarm.
    #[arg(long)]
    design: String,
    /// Statistic: dim, student, hotelling, hotelling-pooled, maxt, or l2.
    #[arg(long, default_value = "student")]
    statistic: String,
    /// Estimator: auto, dim, lin, paired, or contrast. `auto` follows the
    /// design; `contrast` compares each arm against arm 0.
    #[arg(long, default_value = "auto")]
    adjust: String,
    /// Traversal of the assignment space: exact or sampled.
    #[arg(long, default_value = "exact")]
    mode: String,
    /// Assignment draws in sampled mode.
    #[arg(long, default_value_t = 500)]
    draws_omega: usize,
    /// Gaussian Monte Carlo draws per assignment.
    #[arg(long, default_value_t = prepivot::gauss::DEFAULT_GAUSS_DRAWS)]
    draws_gauss: usize,
    /// Pushforward evaluation: auto, closed, or mc.
    #[arg(long, default_value = "auto")]
    gauss_method: String,
    /// Nominal test level.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Master seed for all randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Compare raw statistics instead of prepivoted values.
    #[arg(long)]
    raw: bool,
    /// Mahalanobis threshold for the rerand design.
    #[arg(long, default_value_t = 1.0)]
    balance_threshold: f64,
    /// Hypothesized constant effect c (univariate outcomes).
    #[arg(long, allow_hyphen_values = true)]
    null_shift: Option<f64>,
    /// Write the JSON report here (otherwise it goes to stdout). Not part
    /// of the experiment definition, so not echoed into outputs.
    #[arg(long)]
    #[serde(skip_serializing)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CiArgs {
    #[command(flatten)]
    test: TestArgs,
    /// Effect grid as lo:hi:step.
    #[arg(long, allow_hyphen_values = true)]
    grid: String,
}

#[derive(Args, Clone)]
struct SimArgs {
    /// Scenario: table1, table2, or power.
    #[arg(long)]
    scenario: String,
    /// Population size per simulation.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = prepivot::sim::DEFAULT_SIMS)]
    sims: usize,
    #[arg(long, default_value_t = prepivot::sim::DEFAULT_DRAWS_OMEGA)]
    draws_omega: usize,
    #[arg(long, default_value_t = prepivot::sim::DEFAULT_DRAWS_GAUSS)]
    draws_gauss: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Effect variant: sharp, weak, constant, or heterogeneous.
    #[arg(long, default_value = "sharp")]
    effect: String,
    /// Effect size for constant/heterogeneous variants.
    #[arg(long, default_value_t = 0.05, allow_hyphen_values = true)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for rates.csv and config.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EnumArgs {
    /// Design: cre, rerand, paired, or multiarm.
    #[arg(long)]
    design: String,
    /// Unit count (cre/rerand).
    #[arg(long)]
    n: Option<usize>,
    /// Treated count (cre/rerand).
    #[arg(long)]
    n1: Option<usize>,
    /// Pair count (paired).
    #[arg(long)]
    pairs: Option<usize>,
    /// Comma-separated arm sizes (multiarm).
    #[arg(long)]
    arms: Option<String>,
    /// Study CSV providing covariates (rerand).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    balance_threshold: f64,
    /// Enumeration cap for filtered spaces.
    #[arg(long, default_value_t = DEFAULT_ENUM_CAP)]
    cap: u128,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Some(threads) = cli.threads {
        // A second global-pool initialization in the same process is
        // harmless; the pool size only affects scheduling, never results.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let outcome = match cli.command {
        Command::Test(args) => run_test(&args),
        Command::Ci(args) => run_ci(&args),
        Command::Simulate(args) => run_simulate(&args),
        Command::Enumerate(args) => run_enumerate(&args),
    };
    if let Err(e) = outcome {
        exit_with(e);
    }
}

fn exit_with(e: Error) -> ! {
    match &e {
        Error::Validation(_)
        | Error::Ingestion(_)
        | Error::InvalidDesign(_)
        | Error::Unsupported(_) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
        _ => {
            let kind = match &e {
                Error::Singular(_) => "singular",
                Error::InfeasibleBalance { .. } => "infeasible-balance",
                Error::TooLarge { .. } => "too-large",
                Error::BalanceMass { .. } => "balance-mass",
                Error::Io(_) => "io",
                Error::Csv(_) => "csv",
                Error::Json(_) => "json",
                _ => "error",
            };
            let diag = serde_json::json!({ "error": kind, "message": e.to_string() });
            eprintln!("{diag}");
            std::process::exit(2);
        }
    }
}

/// Resolve design, estimator, and test configuration from shared flags.
fn build_problem(args: &TestArgs) -> Result<(ObservedStudy, AssignmentSpace, TestConfig)> {
    let study = ObservedStudy::from_csv_path(&args.data)?;
    let n = study.n_units();

    let space = match args.design.as_str() {
        "cre" => AssignmentSpace::cre(n, study.n_treated()?)?,
        "rerand" => {
            if study.covariate_dim() == 0 {
                return Err(Error::Validation(
                    "the rerand design needs covariate columns x1..xk".into(),
                ));
            }
            // Default balance metric: the covariate-imbalance covariance
            // estimate from the observed assignment.
            let v = prepivot::covariance::neyman_unpooled(
                study.outcomes(),
                study.covariates(),
                study.assignment(),
            )?;
            let criterion =
                BalanceCriterion::mahalanobis(args.balance_threshold, v.delta_delta())?;
            AssignmentSpace::rerandomized(
                n,
                study.n_treated()?,
                study.covariates().clone(),
                criterion,
            )?
        }
        "paired" => {
            if n % 2 != 0 {
                return Err(Error::Validation(
                    "the paired design needs an even number of rows in pair order".into(),
                ));
            }
            AssignmentSpace::paired(n / 2)?
        }
        "multiarm" => AssignmentSpace::multi_arm(study.arm_sizes().to_vec())?,
        other => {
            return Err(Error::Validation(format!(
                "unknown design '{other}' (expected cre, rerand, paired, or multiarm)"
            )))
        }
    };

    let estimator = match args.adjust.as_str() {
        "auto" => match args.design.as_str() {
            "paired" => EstimatorSpec::Paired,
            "multiarm" => EstimatorSpec::Contrast(default_contrast(study.n_arms())),
            _ => EstimatorSpec::Dim,
        },
        "dim" => EstimatorSpec::Dim,
        "lin" => EstimatorSpec::LinAdjusted,
        "paired" => EstimatorSpec::Paired,
        "contrast" => EstimatorSpec::Contrast(default_contrast(study.n_arms())),
        other => {
            return Err(Error::Validation(format!(
                "unknown estimator '{other}' (expected auto, dim, lin, paired, or contrast)"
            )))
        }
    };

    let mode = match args.mode.as_str() {
        "exact" => OmegaMode::Exact,
        "sampled" => OmegaMode::Sampled {
            draws: args.draws_omega,
        },
        other => {
            return Err(Error::Validation(format!(
                "unknown mode '{other}' (expected exact or sampled)"
            )))
        }
    };

    let mut cfg = TestConfig::new(&args.statistic, estimator)?;
    cfg.mode = mode;
    cfg.alpha = args.alpha;
    cfg.prepivot = !args.raw;
    cfg.gauss = GaussEngineConfig {
        draws: args.draws_gauss,
        seed: args.seed,
        method: GaussMethod::from_name(&args.gauss_method)?,
    };
    cfg.gauss.validate()?;
    if let Some(c) = args.null_shift {
        if study.outcome_dim() != 1 {
            return Err(Error::Unsupported(
                "--null-shift applies to univariate outcomes".into(),
            ));
        }
        cfg.null_shift = Some(DVector::from_element(1, c));
    }
    Ok((study, space, cfg))
}

/// Each arm versus arm 0: an A×(A−1) matrix of pairwise contrasts.
fn default_contrast(n_arms: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n_arms, n_arms.saturating_sub(1), |i, j| {
        if i == 0 {
            -1.0
        } else if i == j + 1 {
            1.0
        } else {
            0.0
        }
    })
}

fn emit_json<T: Serialize>(payload: &T, out: Option<&Path>) -> Result<()> {
    let body = format!("{}\n", serde_json::to_string_pretty(payload)?);
    match out {
        Some(path) => std::fs::write(path, body)?,
        None => print!("{body}"),
    }
    Ok(())
}

fn print_kv(rows: &[(&str, String)]) {
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (k, v) in rows {
        println!("{k:<width$}  {v}");
    }
}

fn run_test(args: &TestArgs) -> Result<()> {
    let (study, space, cfg) = build_problem(args)?;
    let report = randomization_test(&study, &space, &cfg)?;

    #[derive(Serialize)]
    struct Output<'a> {
        config: &'a TestArgs,
        report: &'a prepivot::TestReport,
    }
    if args.out.is_some() {
        let mut rows = vec![
            ("design", report.design.clone()),
            ("statistic", report.statistic.clone()),
            ("estimator", report.estimator.clone()),
            ("mode", report.mode.clone()),
            ("units", report.n_units.to_string()),
            ("observed statistic", format!("{:.6}", report.observed_statistic)),
            ("p-value", format!("{:.6}", report.p_value)),
            ("alpha", format!("{}", report.alpha)),
            ("reject", report.reject.to_string()),
        ];
        if let Some(g) = report.g_observed {
            rows.insert(6, ("g observed", format!("{g:.6}")));
        }
        print_kv(&rows);
    }
    emit_json(
        &Output {
            config: args,
            report: &report,
        },
        args.out.as_deref(),
    )
}

fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Validation(format!(
            "grid '{spec}' must have the form lo:hi:step"
        )));
    }
    let lo: f64 = parts[0]
        .parse()
        .map_err(|_| Error::Validation(format!("bad grid bound '{}'", parts[0])))?;
    let hi: f64 = parts[1]
        .parse()
        .map_err(|_| Error::Validation(format!("bad grid bound '{}'", parts[1])))?;
    let step: f64 = parts[2]
        .parse()
        .map_err(|_| Error::Validation(format!("bad grid step '{}'", parts[2])))?;
    if !(step > 0.0) || hi < lo {
        return Err(Error::Validation(
            "grid needs hi ≥ lo and a positive step".into(),
        ));
    }
    let mut grid = Vec::new();
    let count = ((hi - lo) / step).round() as usize;
    for i in 0..=count {
        let c = lo + step * i as f64;
        if c <= hi + 1e-12 {
            grid.push(c);
        }
    }
    Ok(grid)
}

fn run_ci(args: &CiArgs) -> Result<()> {
    let grid = parse_grid(&args.grid)?;
    let (study, space, cfg) = build_problem(&args.test)?;
    let set = confidence_set(&study, &space, &cfg, &grid)?;

    #[derive(Serialize)]
    struct Output<'a> {
        config: &'a TestArgs,
        grid_spec: &'a str,
        confidence_set: &'a prepivot::ConfidenceSet,
    }
    if args.test.out.is_some() {
        let span = if set.accepted.is_empty() {
            "empty".to_string()
        } else {
            format!(
                "[{:.6}, {:.6}]",
                set.accepted.first().unwrap(),
                set.accepted.last().unwrap()
            )
        };
        print_kv(&[
            ("grid points", set.grid.len().to_string()),
            ("accepted points", set.accepted.len().to_string()),
            ("accepted span", span),
            ("interval on grid", set.is_interval.to_string()),
            ("alpha", format!("{}", set.alpha)),
        ]);
    }
    emit_json(
        &Output {
            config: &args.test,
            grid_spec: &args.grid,
            confidence_set: &set,
        },
        args.test.out.as_deref(),
    )
}

fn run_simulate(args: &SimArgs) -> Result<()> {
    let cfg = ScenarioConfig {
        scenario: Scenario::from_name(&args.scenario)?,
        n: args.n,
        sims: args.sims,
        draws_omega: args.draws_omega,
        draws_gauss: args.draws_gauss,
        alpha: args.alpha,
        effect: EffectVariant::from_name(&args.effect, args.tau)?,
        seed: args.seed,
    };
    let result = run_scenario(&cfg)?;

    let method_width = result
        .rates
        .iter()
        .map(|r| r.method.len())
        .max()
        .unwrap_or(6)
        .max("method".len());
    println!("{:<method_width$}  {:>8}  {:>8}", "method", "rate", "se");
    for row in &result.rates {
        println!(
            "{:<method_width$}  {:>8.4}  {:>8.4}",
            row.method, row.rate, row.se
        );
    }
    if let Some(dir) = &args.out {
        result.write_outputs(dir)?;
    }
    Ok(())
}

fn run_enumerate(args: &EnumArgs) -> Result<()> {
    let need = |v: Option<usize>, flag: &str| {
        v.ok_or_else(|| Error::Validation(format!("--{flag} is required for this design")))
    };
    let count: u128 = match args.design.as_str() {
        "cre" => {
            let space = AssignmentSpace::cre(need(args.n, "n")?, need(args.n1, "n1")?)?;
            space.cardinality().expect("closed form for cre")
        }
        "paired" => {
            let space = AssignmentSpace::paired(need(args.pairs, "pairs")?)?;
            space.cardinality().expect("closed form for paired")
        }
        "multiarm" => {
            let arms = args
                .arms
                .as_deref()
                .ok_or_else(|| Error::Validation("--arms is required for multiarm".into()))?;
            let sizes: Vec<usize> = arms
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Validation(format!("bad arm size '{s}'")))
                })
                .collect::<Result<_>>()?;
            let space = AssignmentSpace::multi_arm(sizes)?;
            space.cardinality().expect("closed form for multiarm")
        }
        "rerand" => {
            let data = args.data.as_ref().ok_or_else(|| {
                Error::Validation("--data is required to enumerate a rerand design".into())
            })?;
            let study = ObservedStudy::from_csv_path(data)?;
            let v = prepivot::covariance::neyman_unpooled(
                study.outcomes(),
                study.covariates(),
                study.assignment(),
            )?;
            let criterion =
                BalanceCriterion::mahalanobis(args.balance_threshold, v.delta_delta())?;
            let space = AssignmentSpace::rerandomized(
                study.n_units(),
                study.n_treated()?,
                study.covariates().clone(),
                criterion,
            )?;
            space.enumerate(args.cap)?.len() as u128
        }
        other => {
            return Err(Error::Validation(format!(
                "unknown design '{other}' (expected cre, rerand, paired, or multiarm)"
            )))
        }
    };
    println!("{count}");
    Ok(())
}
