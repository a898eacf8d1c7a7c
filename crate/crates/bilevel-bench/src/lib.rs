//! Benchmark harness: problem construction, the outer optimization loop with
//! per-iteration metrics, CSV output, sweeps, and bias/variance reports.

pub mod cli;

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array1;
use thiserror::Error;

use bilevel::estimators::{
    aid_hypergradient, hozog_hypergradient, itd_hypergradient, oracle_hypergradient,
    pzobo_hypergradient, pzobo_s_hypergradient, AidSolver, EstimatorConfig, EvalCounts,
    HypergradEstimate,
};
use bilevel::inner_solver::{gd_inner, InnerRunOptions};
use bilevel::problems::{
    generate_ho_dataset, generate_hr_dataset, quadratic_make, BilevelProblem, EmbeddingKind,
    HoProblem, HrProblem, QuadraticProblem,
};
use bilevel::scalar::l2_norm;
use bilevel::seeding;
use bilevel::verification::{
    estimate_bias_variance, fd_hypergradient, write_reports_csv, InnerSettings, ReferenceGrad,
};
use bilevel::BilevelError;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Structural problem with the requested configuration.
    #[error("usage error: {0}")]
    Usage(String),
    /// Numerical failure inside a run.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// I/O failure with the offending path.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<BilevelError> for HarnessError {
    fn from(e: BilevelError) -> Self {
        match e {
            BilevelError::InvalidConfig(_) | BilevelError::Unsupported(_) => {
                HarnessError::Usage(e.to_string())
            }
            other => HarnessError::Numerical(other.to_string()),
        }
    }
}

/// Which problem instance to build, with its generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ProblemSpec {
    Quadratic {
        dim_p: usize,
        dim_d: usize,
        conditioning: f64,
        inner_components: usize,
        outer_components: usize,
        spread: f64,
    },
    HrLinear {
        n1: usize,
        n2: usize,
        features: usize,
        out_dim: usize,
        noise_sd: f64,
        gamma: f64,
    },
    HrTwoLayer {
        n1: usize,
        n2: usize,
        features: usize,
        out_dim: usize,
        hidden: usize,
        noise_sd: f64,
        gamma: f64,
    },
    HoLogistic {
        n_train: usize,
        n_val: usize,
        features: usize,
        classes: usize,
    },
}

/// Hypergradient estimator selector. `FdReference` (finite-difference
/// gradients with a deep inner solve) is available programmatically for
/// reference runs but is intentionally not a CLI algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    Pzobo,
    PzoboS,
    Hozog,
    Itd,
    AidCg,
    AidFp,
    Oracle,
    FdReference,
}

impl Algo {
    pub fn name(&self) -> &'static str {
        match self {
            Algo::Pzobo => "pzobo",
            Algo::PzoboS => "pzobo-s",
            Algo::Hozog => "hozog",
            Algo::Itd => "itd",
            Algo::AidCg => "aid-cg",
            Algo::AidFp => "aid-fp",
            Algo::Oracle => "oracle",
            Algo::FdReference => "fd-reference",
        }
    }
}

/// Outer optimizer selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OuterOpt {
    Gd,
    Adam,
}

/// Everything one benchmark run needs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub algo: Algo,
    pub inner_steps: usize,
    pub outer_steps: usize,
    pub perturbations: usize,
    pub smoothing: f64,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub outer_opt: OuterOpt,
    pub seed: u64,
    pub inner_batch: Option<usize>,
    pub outer_batch: Option<usize>,
    pub warm_start: bool,
    pub track_oracle: bool,
    pub aid_iters: usize,
    pub aid_tol: f64,
    pub out: Option<PathBuf>,
}

/// One row of benchmark output.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub k: usize,
    pub wall_time_s: f64,
    pub outer_loss: f64,
    pub hypergrad_norm: f64,
    pub oracle_err: Option<f64>,
    pub inner_residual: f64,
}

/// Result of one run: per-iteration records, the failure that ended the run
/// early (if any), and evaluation totals.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub failure: Option<String>,
    pub totals: EvalCounts,
    pub final_x: Array1<f64>,
}

/// A problem instance behind the common interface.
pub type BoxedProblem = Box<dyn BilevelProblem<f64>>;

/// Build the problem instance and its initial outer iterate.
pub fn build_problem(
    spec: &ProblemSpec,
    seed: u64,
) -> Result<(BoxedProblem, Array1<f64>), HarnessError> {
    let data_seed = seeding::derive_seed(seed, &[seeding::TAG_DATA]);
    let mut init_rng = seeding::stream(seed, &[seeding::TAG_INIT]);
    match *spec {
        ProblemSpec::Quadratic {
            dim_p,
            dim_d,
            conditioning,
            inner_components,
            outer_components,
            spread,
        } => {
            let problem: QuadraticProblem<f64> = if inner_components > 1 || outer_components > 1 {
                QuadraticProblem::finite_sum(
                    data_seed,
                    dim_p,
                    dim_d,
                    conditioning,
                    inner_components,
                    outer_components,
                    spread,
                )?
            } else {
                quadratic_make(data_seed, dim_p, dim_d, conditioning)?
            };
            let x0 = seeding::gaussian_vector(&mut init_rng, dim_p);
            Ok((Box::new(problem), x0))
        }
        ProblemSpec::HrLinear {
            n1,
            n2,
            features,
            out_dim,
            noise_sd,
            gamma,
        } => {
            let data = generate_hr_dataset::<f64>(
                data_seed,
                n1,
                n2,
                features,
                out_dim,
                noise_sd,
                EmbeddingKind::Linear,
                gamma,
            )?;
            let problem = HrProblem::new(data);
            let x0 = problem.sample_initial(&mut init_rng);
            Ok((Box::new(problem), x0))
        }
        ProblemSpec::HrTwoLayer {
            n1,
            n2,
            features,
            out_dim,
            hidden,
            noise_sd,
            gamma,
        } => {
            let data = generate_hr_dataset::<f64>(
                data_seed,
                n1,
                n2,
                features,
                out_dim,
                noise_sd,
                EmbeddingKind::TwoLayer { hidden },
                gamma,
            )?;
            let problem = HrProblem::new(data);
            let x0 = problem.sample_initial(&mut init_rng);
            Ok((Box::new(problem), x0))
        }
        ProblemSpec::HoLogistic {
            n_train,
            n_val,
            features,
            classes,
        } => {
            let data = generate_ho_dataset::<f64>(data_seed, n_train, n_val, features, classes)?;
            let problem = HoProblem::new(data);
            let x0 = Array1::zeros(problem.outer_dim());
            Ok((Box::new(problem), x0))
        }
    }
}

fn estimator_config(config: &RunConfig) -> EstimatorConfig<f64> {
    EstimatorConfig {
        inner_steps: config.inner_steps,
        perturbations: config.perturbations,
        smoothing: config.smoothing,
        inner_lr: config.inner_lr,
        warm_start: config.warm_start,
        inner_batch: config.inner_batch,
        outer_batch: config.outer_batch,
    }
}

#[allow(clippy::too_many_arguments)]
fn dispatch_estimator(
    algo: Algo,
    problem: &dyn BilevelProblem<f64>,
    x: &Array1<f64>,
    y_init: &Array1<f64>,
    y_cold: &Array1<f64>,
    cfg: &EstimatorConfig<f64>,
    aid_iters: usize,
    aid_tol: f64,
    seed: u64,
) -> bilevel::Result<HypergradEstimate<f64>> {
    match algo {
        Algo::Pzobo => pzobo_hypergradient(problem, x, y_init, cfg, seed),
        Algo::PzoboS => pzobo_s_hypergradient(problem, x, y_init, cfg, seed),
        Algo::Hozog => hozog_hypergradient(problem, x, y_init, cfg, seed),
        Algo::Itd => itd_hypergradient(problem, x, y_init, cfg),
        Algo::AidCg => aid_hypergradient(
            problem,
            x,
            y_init,
            cfg,
            AidSolver::ConjugateGradient,
            aid_iters,
            aid_tol,
        ),
        Algo::AidFp => {
            aid_hypergradient(problem, x, y_init, cfg, AidSolver::FixedPoint, aid_iters, aid_tol)
        }
        Algo::Oracle => oracle_hypergradient(problem, x),
        Algo::FdReference => {
            // Noise-free reference: central differences of the same N-step
            // solved objective the estimators sample, so its loss trace is
            // directly comparable to theirs.
            let run = gd_inner(
                problem,
                x,
                y_init,
                cfg.inner_lr,
                cfg.inner_steps,
                InnerRunOptions {
                    keep_trajectory: false,
                    compute_residual: true,
                },
            )?;
            let settings = InnerSettings {
                step_size: cfg.inner_lr,
                steps: cfg.inner_steps,
                y_init: y_cold.clone(),
            };
            let grad = fd_hypergradient(problem, x, &settings, 1e-5)?;
            Ok(HypergradEstimate {
                grad,
                deltas: Vec::new(),
                inner_residual: run.residual.unwrap_or(0.0),
                inner_solution: run.solution,
                evals: EvalCounts {
                    inner_grad: run.grad_evals + 2 * (x.len() as u64) * cfg.inner_steps as u64,
                    outer_grad: 0,
                    outer_value: 2 * x.len() as u64,
                    second_order: 0,
                    diagnostic: run.diagnostic_evals,
                },
            })
        }
    }
}

fn validate_combination(
    algo: Algo,
    problem: &dyn BilevelProblem<f64>,
) -> Result<(), HarnessError> {
    match algo {
        Algo::Itd | Algo::AidCg | Algo::AidFp => {
            if !problem.has_second_order() {
                return Err(HarnessError::Usage(format!(
                    "algorithm {} needs second-order problem evaluations",
                    algo.name()
                )));
            }
        }
        Algo::Oracle
            if !problem.has_oracle() => {
                return Err(HarnessError::Usage(
                    "algorithm oracle needs a closed-form problem oracle".into(),
                ));
            }
        _ => {}
    }
    Ok(())
}

/// Reference hypergradient for oracle-error tracking: closed form when the
/// problem has one, otherwise central differences with a 10× deeper inner
/// solve.
fn tracking_reference(
    problem: &dyn BilevelProblem<f64>,
    x: &Array1<f64>,
    config: &RunConfig,
    y_cold: &Array1<f64>,
    warned: &mut bool,
) -> bilevel::Result<Array1<f64>> {
    if problem.has_oracle() {
        Ok(oracle_hypergradient(problem, x)?.grad)
    } else {
        if !*warned {
            eprintln!(
                "note: oracle tracking uses finite differences with {} inner steps; this multiplies run cost",
                10 * config.inner_steps
            );
            *warned = true;
        }
        let settings = InnerSettings {
            step_size: config.inner_lr,
            steps: 10 * config.inner_steps,
            y_init: y_cold.clone(),
        };
        fd_hypergradient(problem, x, &settings, 1e-5)
    }
}

/// Run `outer_steps` iterations of the configured estimator + outer
/// optimizer, emitting one metrics record per iteration. Deterministic in
/// `(config, seed)` up to wall-clock timestamps.
pub fn run_experiment(config: &RunConfig) -> Result<RunOutput, HarnessError> {
    if config.outer_steps < 1 {
        return Err(HarnessError::Usage("outer step count must be at least 1".into()));
    }
    if config.outer_lr <= 0.0 {
        return Err(HarnessError::Usage("outer step size must be positive".into()));
    }
    let (problem, x0) = build_problem(&config.problem, config.seed)?;
    let problem = problem.as_ref();
    validate_combination(config.algo, problem)?;
    let est_cfg = estimator_config(config);
    est_cfg.validate(problem)?;

    let y_cold: Array1<f64> = Array1::zeros(problem.inner_dim());
    let mut y_init = y_cold.clone();
    let mut state = bilevel::outer_opt::OuterState::new(x0);
    let mut records = Vec::with_capacity(config.outer_steps);
    let mut totals = EvalCounts::default();
    let mut failure = None;
    let mut warned = false;
    let start = Instant::now();

    for k in 0..config.outer_steps {
        let est_seed = seeding::derive_seed(config.seed, &[seeding::TAG_ITERATION, k as u64]);
        let est = match dispatch_estimator(
            config.algo,
            problem,
            &state.x,
            &y_init,
            &y_cold,
            &est_cfg,
            config.aid_iters,
            config.aid_tol,
            est_seed,
        ) {
            Ok(est) => est,
            Err(e) => {
                failure = Some(format!("iteration {k}: {e}"));
                break;
            }
        };
        let outer_loss = problem.outer_value(&state.x, &est.inner_solution, None);
        let oracle_err = if config.track_oracle {
            match tracking_reference(problem, &state.x, config, &y_cold, &mut warned) {
                Ok(reference) => Some(l2_norm(&(&est.grad - &reference))),
                Err(e) => {
                    failure = Some(format!("iteration {k}: oracle tracking failed: {e}"));
                    break;
                }
            }
        } else {
            None
        };
        records.push(MetricsRecord {
            k,
            wall_time_s: start.elapsed().as_secs_f64(),
            outer_loss,
            hypergrad_norm: l2_norm(&est.grad),
            oracle_err,
            inner_residual: est.inner_residual,
        });
        totals.inner_grad += est.evals.inner_grad;
        totals.outer_grad += est.evals.outer_grad;
        totals.outer_value += est.evals.outer_value;
        totals.second_order += est.evals.second_order;
        totals.diagnostic += est.evals.diagnostic;
        match config.outer_opt {
            OuterOpt::Gd => state.gd_step(&est.grad, config.outer_lr),
            OuterOpt::Adam => state.adam_step(&est.grad, config.outer_lr),
        }
        if config.warm_start {
            y_init = est.inner_solution;
        }
    }
    Ok(RunOutput {
        records,
        failure,
        totals,
        final_x: state.x,
    })
}

/// CSV header of the metrics format.
pub const CSV_HEADER: &str = "k,wall_time_s,outer_loss,hypergrad_norm,oracle_err,inner_residual";

/// Serialize records; floats carry 17 significant digits so parsing them back
/// reproduces the values exactly.
pub fn records_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        let oracle = r
            .oracle_err
            .map(|v| format!("{v:.16e}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{},{:.16e}\n",
            r.k, r.wall_time_s, r.outer_loss, r.hypergrad_norm, oracle, r.inner_residual
        ));
    }
    out
}

pub fn write_csv(records: &[MetricsRecord], path: &Path) -> Result<(), HarnessError> {
    std::fs::write(path, records_to_csv(records)).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parse a metrics CSV produced by [`records_to_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<MetricsRecord>, HarnessError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(HarnessError::Usage(format!(
                "unexpected metrics header: {other:?}"
            )))
        }
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(HarnessError::Usage(format!(
                "line {}: expected 6 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64, HarnessError> {
            s.parse::<f64>()
                .map_err(|e| HarnessError::Usage(format!("line {}: {e}", lineno + 2)))
        };
        records.push(MetricsRecord {
            k: fields[0]
                .parse::<usize>()
                .map_err(|e| HarnessError::Usage(format!("line {}: {e}", lineno + 2)))?,
            wall_time_s: parse_f(fields[1])?,
            outer_loss: parse_f(fields[2])?,
            hypergrad_norm: parse_f(fields[3])?,
            oracle_err: if fields[4].is_empty() {
                None
            } else {
                Some(parse_f(fields[4])?)
            },
            inner_residual: parse_f(fields[5])?,
        });
    }
    Ok(records)
}

/// Output path of one sweep configuration: `runs.csv` becomes `runs-n20.csv`.
pub fn sweep_out_path(base: &Path, inner_steps: usize) -> PathBuf {
    let stem = base
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sweep".into());
    let ext = base
        .extension()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    base.with_file_name(format!("{stem}-n{inner_steps}.{ext}"))
}

/// Rerun one configuration across inner-step counts, one CSV per value.
pub fn sweep_inner_steps(
    config: &RunConfig,
    n_values: &[usize],
) -> Result<Vec<(usize, PathBuf, RunOutput)>, HarnessError> {
    let base = config
        .out
        .clone()
        .ok_or_else(|| HarnessError::Usage("sweep requires an output path".into()))?;
    let mut outputs = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let mut cfg = config.clone();
        cfg.inner_steps = n;
        let output = run_experiment(&cfg)?;
        let path = sweep_out_path(&base, n);
        write_csv(&output.records, &path)?;
        outputs.push((n, path, output));
    }
    Ok(outputs)
}

/// Configuration of a bias/variance report run.
#[derive(Debug, Clone)]
pub struct BiasVarianceConfig {
    pub problem: ProblemSpec,
    pub algo: Algo,
    pub inner_steps: usize,
    pub perturbations: usize,
    pub smoothing: f64,
    pub inner_lr: f64,
    pub inner_batch: Option<usize>,
    pub outer_batch: Option<usize>,
    pub trials: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

/// Estimate bias and variance of one estimator configuration at the seeded
/// initial point and optionally write the one-row report CSV.
pub fn run_bias_variance(
    config: &BiasVarianceConfig,
) -> Result<bilevel::verification::BiasVarianceReport<f64>, HarnessError> {
    let (problem, x0) = build_problem(&config.problem, config.seed)?;
    let problem = problem.as_ref();
    validate_combination(config.algo, problem)?;
    let cfg = EstimatorConfig {
        inner_steps: config.inner_steps,
        perturbations: config.perturbations,
        smoothing: config.smoothing,
        inner_lr: config.inner_lr,
        warm_start: false,
        inner_batch: config.inner_batch,
        outer_batch: config.outer_batch,
    };
    cfg.validate(problem)?;
    let y_cold: Array1<f64> = Array1::zeros(problem.inner_dim());
    let reference = if problem.has_oracle() {
        ReferenceGrad::Oracle
    } else {
        ReferenceGrad::FiniteDifference {
            inner: InnerSettings {
                step_size: config.inner_lr,
                steps: 10 * config.inner_steps,
                y_init: y_cold.clone(),
            },
            h: 1e-5,
        }
    };
    let algo = config.algo;
    let aid_iters = 100;
    let aid_tol = 1e-10;
    let report = estimate_bias_variance(
        problem,
        &x0,
        algo.name(),
        |trial_seed| {
            dispatch_estimator(
                algo, problem, &x0, &y_cold, &y_cold, &cfg, aid_iters, aid_tol, trial_seed,
            )
        },
        &cfg,
        config.trials,
        config.seed,
        &reference,
    )?;
    if let Some(path) = &config.out {
        write_reports_csv(std::slice::from_ref(&report), path).map_err(|source| {
            HarnessError::Io {
                path: path.clone(),
                source,
            }
        })?;
    }
    Ok(report)
}
