//! Command-line interface: `run`, `sweep-n`, and `bias-variance`
//! subcommands over the shared configuration flags.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::{Algo, BiasVarianceConfig, OuterOpt, ProblemSpec, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProblemKind {
    Quadratic,
    #[value(name = "hr-linear")]
    HrLinear,
    #[value(name = "hr-2layer")]
    Hr2Layer,
    #[value(name = "ho-logistic")]
    HoLogistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlgoKind {
    Pzobo,
    #[value(name = "pzobo-s")]
    PzoboS,
    Hozog,
    Itd,
    #[value(name = "aid-cg")]
    AidCg,
    #[value(name = "aid-fp")]
    AidFp,
    Oracle,
}

impl From<AlgoKind> for Algo {
    fn from(k: AlgoKind) -> Algo {
        match k {
            AlgoKind::Pzobo => Algo::Pzobo,
            AlgoKind::PzoboS => Algo::PzoboS,
            AlgoKind::Hozog => Algo::Hozog,
            AlgoKind::Itd => Algo::Itd,
            AlgoKind::AidCg => Algo::AidCg,
            AlgoKind::AidFp => Algo::AidFp,
            AlgoKind::Oracle => Algo::Oracle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OuterOptKind {
    Gd,
    Adam,
}

fn positive_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} is not a positive finite number"))
    }
}

fn non_negative_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} is not a non-negative finite number"))
    }
}

fn at_least_one(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 1 {
        Ok(v)
    } else {
        Err("value must be at least 1".into())
    }
}

fn conditioning_at_least_one(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v >= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is not a conditioning number >= 1"))
    }
}

/// Problem selection and generation parameters. Defaults give desk-scale
/// instances of each family.
#[derive(Debug, Clone, Args)]
pub struct ProblemArgs {
    /// Problem family.
    #[arg(long, value_enum)]
    pub problem: ProblemKind,
    /// Outer dimension (quadratic family).
    #[arg(long, default_value_t = 10, value_parser = at_least_one)]
    pub dim_p: usize,
    /// Inner dimension (quadratic family).
    #[arg(long, default_value_t = 10, value_parser = at_least_one)]
    pub dim_d: usize,
    /// Ratio of largest to smallest inner curvature (quadratic family).
    #[arg(long, default_value_t = 10.0, value_parser = conditioning_at_least_one)]
    pub conditioning: f64,
    /// Inner finite-sum component count (quadratic family; 1 = deterministic).
    #[arg(long, default_value_t = 1, value_parser = at_least_one)]
    pub inner_components: usize,
    /// Outer finite-sum component count (quadratic family; 1 = deterministic).
    #[arg(long, default_value_t = 1, value_parser = at_least_one)]
    pub outer_components: usize,
    /// Relative size of the finite-sum component perturbations, in [0, 1).
    #[arg(long, default_value_t = 0.5, value_parser = non_negative_f64)]
    pub spread: f64,
    /// Validation sample count (hyper-representation).
    #[arg(long, default_value_t = 100, value_parser = at_least_one)]
    pub n1: usize,
    /// Training sample count (hyper-representation).
    #[arg(long, default_value_t = 100, value_parser = at_least_one)]
    pub n2: usize,
    /// Input feature count (hyper-representation and classification).
    #[arg(long, default_value_t = 50, value_parser = at_least_one)]
    pub features: usize,
    /// Embedding output dimension (hyper-representation).
    #[arg(long, default_value_t = 30, value_parser = at_least_one)]
    pub out_dim: usize,
    /// Hidden width of the two-layer embedding.
    #[arg(long, default_value_t = 32, value_parser = at_least_one)]
    pub hidden: usize,
    /// Response noise standard deviation (hyper-representation).
    #[arg(long, default_value_t = 0.1, value_parser = non_negative_f64)]
    pub noise_sd: f64,
    /// Inner ridge coefficient (hyper-representation).
    #[arg(long, default_value_t = 0.1, value_parser = positive_f64)]
    pub gamma: f64,
    /// Class count (classification).
    #[arg(long, default_value_t = 4, value_parser = at_least_one)]
    pub classes: usize,
    /// Training sample count (classification).
    #[arg(long, default_value_t = 500, value_parser = at_least_one)]
    pub n_train: usize,
    /// Validation sample count (classification).
    #[arg(long, default_value_t = 200, value_parser = at_least_one)]
    pub n_val: usize,
}

impl ProblemArgs {
    pub fn to_spec(&self) -> ProblemSpec {
        match self.problem {
            ProblemKind::Quadratic => ProblemSpec::Quadratic {
                dim_p: self.dim_p,
                dim_d: self.dim_d,
                conditioning: self.conditioning,
                inner_components: self.inner_components,
                outer_components: self.outer_components,
                spread: self.spread,
            },
            ProblemKind::HrLinear => ProblemSpec::HrLinear {
                n1: self.n1,
                n2: self.n2,
                features: self.features,
                out_dim: self.out_dim,
                noise_sd: self.noise_sd,
                gamma: self.gamma,
            },
            ProblemKind::Hr2Layer => ProblemSpec::HrTwoLayer {
                n1: self.n1,
                n2: self.n2,
                features: self.features,
                out_dim: self.out_dim,
                hidden: self.hidden,
                noise_sd: self.noise_sd,
                gamma: self.gamma,
            },
            ProblemKind::HoLogistic => ProblemSpec::HoLogistic {
                n_train: self.n_train,
                n_val: self.n_val,
                features: self.features,
                classes: self.classes,
            },
        }
    }
}

/// Flags of one benchmark run.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Hypergradient estimator.
    #[arg(long, value_enum)]
    pub algo: AlgoKind,
    /// Inner solver steps per estimate (N).
    #[arg(long, default_value_t = 20, value_parser = at_least_one)]
    pub inner_steps: usize,
    /// Outer iterations (K).
    #[arg(long, default_value_t = 100, value_parser = at_least_one)]
    pub outer_steps: usize,
    /// Gaussian perturbation samples per estimate (Q).
    #[arg(long, default_value_t = 1, value_parser = at_least_one)]
    pub q: usize,
    /// Perturbation smoothing scale (mu).
    #[arg(long, default_value_t = 0.01, value_parser = positive_f64)]
    pub mu: f64,
    /// Inner step size.
    #[arg(long, default_value_t = 0.01, value_parser = positive_f64)]
    pub alpha: f64,
    /// Outer step size (or Adam learning rate).
    #[arg(long, default_value_t = 0.01, value_parser = positive_f64)]
    pub beta: f64,
    /// Outer optimizer.
    #[arg(long, value_enum, default_value_t = OuterOptKind::Gd)]
    pub outer_opt: OuterOptKind,
    /// Master seed; fixes the dataset, initialization, and every estimator
    /// substream.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Inner minibatch size (stochastic estimator; defaults to full batch).
    #[arg(long, value_parser = at_least_one)]
    pub batch_size: Option<usize>,
    /// Outer minibatch size (stochastic estimator; defaults to full batch).
    #[arg(long, value_parser = at_least_one)]
    pub outer_batch_size: Option<usize>,
    /// Reuse the previous inner solution as the next initial point.
    #[arg(long, default_value_t = false)]
    pub warm_start: bool,
    /// Record the error against the oracle (or finite-difference) gradient.
    #[arg(long, default_value_t = false)]
    pub track_oracle: bool,
    /// Iteration cap of the implicit-differentiation linear solvers.
    #[arg(long, default_value_t = 100, value_parser = at_least_one)]
    pub aid_iters: usize,
    /// Residual tolerance of the implicit-differentiation linear solvers.
    #[arg(long, default_value_t = 1e-10, value_parser = positive_f64)]
    pub aid_tol: f64,
    /// Metrics CSV output path.
    #[arg(long)]
    pub out: PathBuf,
}

impl RunArgs {
    pub fn to_config(&self) -> RunConfig {
        RunConfig {
            problem: self.problem.to_spec(),
            algo: self.algo.into(),
            inner_steps: self.inner_steps,
            outer_steps: self.outer_steps,
            perturbations: self.q,
            smoothing: self.mu,
            inner_lr: self.alpha,
            outer_lr: self.beta,
            outer_opt: match self.outer_opt {
                OuterOptKind::Gd => OuterOpt::Gd,
                OuterOptKind::Adam => OuterOpt::Adam,
            },
            seed: self.seed,
            inner_batch: self.batch_size,
            outer_batch: self.outer_batch_size,
            warm_start: self.warm_start,
            track_oracle: self.track_oracle,
            aid_iters: self.aid_iters,
            aid_tol: self.aid_tol,
            out: Some(self.out.clone()),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Inner-step counts to sweep; one metrics CSV is written per value,
    /// with `-n<value>` appended to the output file stem.
    #[arg(long, value_delimiter = ',', required = true)]
    pub n_values: Vec<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct BiasVarianceArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Hypergradient estimator under test.
    #[arg(long, value_enum)]
    pub algo: AlgoKind,
    /// Inner solver steps per estimate (N).
    #[arg(long, default_value_t = 20, value_parser = at_least_one)]
    pub inner_steps: usize,
    /// Gaussian perturbation samples per estimate (Q).
    #[arg(long, default_value_t = 1, value_parser = at_least_one)]
    pub q: usize,
    /// Perturbation smoothing scale (mu).
    #[arg(long, default_value_t = 0.01, value_parser = positive_f64)]
    pub mu: f64,
    /// Inner step size.
    #[arg(long, default_value_t = 0.01, value_parser = positive_f64)]
    pub alpha: f64,
    /// Inner minibatch size (stochastic estimator).
    #[arg(long, value_parser = at_least_one)]
    pub batch_size: Option<usize>,
    /// Outer minibatch size (stochastic estimator).
    #[arg(long, value_parser = at_least_one)]
    pub outer_batch_size: Option<usize>,
    /// Independent estimator trials (at least 2; 100+ for reported numbers).
    #[arg(long, default_value_t = 200, value_parser = trials_at_least_two)]
    pub trials: usize,
    /// Master seed for the per-trial substreams.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report CSV output path.
    #[arg(long)]
    pub out: PathBuf,
}

fn trials_at_least_two(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 2 {
        Ok(v)
    } else {
        Err("need at least 2 trials".into())
    }
}

impl BiasVarianceArgs {
    pub fn to_config(&self) -> BiasVarianceConfig {
        BiasVarianceConfig {
            problem: self.problem.to_spec(),
            algo: self.algo.into(),
            inner_steps: self.inner_steps,
            perturbations: self.q,
            smoothing: self.mu,
            inner_lr: self.alpha,
            inner_batch: self.batch_size,
            outer_batch: self.outer_batch_size,
            trials: self.trials,
            seed: self.seed,
            out: Some(self.out.clone()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "bilevel-bench",
    about = "Seeded bilevel-optimization benchmarks with Hessian-free hypergradient estimators",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Run one benchmark configuration and write per-iteration metrics.
    Run(RunArgs),
    /// Rerun one configuration across inner-step counts (one CSV per value).
    #[command(name = "sweep-n")]
    SweepN(SweepArgs),
    /// Estimate bias and variance of one estimator configuration.
    #[command(name = "bias-variance")]
    BiasVariance(BiasVarianceArgs),
}

/// Parsed top-level command.
#[derive(Debug)]
pub enum Command {
    Run(RunConfig),
    SweepN {
        config: RunConfig,
        n_values: Vec<usize>,
    },
    BiasVariance(BiasVarianceConfig),
}

/// Parse an argv sequence into a command; unknown flags, missing required
/// flags, and out-of-range values produce a usage error naming the flag.
pub fn parse_cli<I, S>(argv: I) -> Result<Command, clap::Error>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    Ok(match cli.command {
        CliCommand::Run(args) => Command::Run(args.to_config()),
        CliCommand::SweepN(args) => {
            if args.n_values.is_empty() || args.n_values.contains(&0) {
                return Err(clap::Error::raw(
                    ErrorKind::ValueValidation,
                    "--n-values must list inner-step counts >= 1\n",
                ));
            }
            Command::SweepN {
                config: args.run.to_config(),
                n_values: args.n_values,
            }
        }
        CliCommand::BiasVariance(args) => Command::BiasVariance(args.to_config()),
    })
}
