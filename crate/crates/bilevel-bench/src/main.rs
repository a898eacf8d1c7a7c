use clap::error::ErrorKind;

use bilevel_bench::cli::{parse_cli, Command};
use bilevel_bench::{run_bias_variance, run_experiment, sweep_inner_steps, write_csv, HarnessError};

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let command = match parse_cli(std::env::args_os()) {
        Ok(cmd) => cmd,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(command) {
        Ok(()) => 0,
        Err(HarnessError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn execute(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Run(config) => {
            let output = run_experiment(&config)?;
            let path = config.out.as_ref().expect("run always has an output path");
            write_csv(&output.records, path)?;
            println!(
                "wrote {} records to {} (inner gradient evaluations: {})",
                output.records.len(),
                path.display(),
                output.totals.inner_grad
            );
            if let Some(last) = output.records.last() {
                println!(
                    "final: outer_loss={:.6e} hypergrad_norm={:.6e}",
                    last.outer_loss, last.hypergrad_norm
                );
            }
            if let Some(f) = output.failure {
                return Err(HarnessError::Numerical(f));
            }
            Ok(())
        }
        Command::SweepN { config, n_values } => {
            let outputs = sweep_inner_steps(&config, &n_values)?;
            let mut failure = None;
            for (n, path, output) in &outputs {
                let final_loss = output
                    .records
                    .last()
                    .map(|r| r.outer_loss)
                    .unwrap_or(f64::NAN);
                println!(
                    "inner-steps {n}: wrote {} records to {} (final outer_loss={final_loss:.6e})",
                    output.records.len(),
                    path.display()
                );
                if let Some(f) = &output.failure {
                    failure = Some(format!("inner-steps {n}: {f}"));
                }
            }
            match failure {
                Some(f) => Err(HarnessError::Numerical(f)),
                None => Ok(()),
            }
        }
        Command::BiasVariance(config) => {
            let report = run_bias_variance(&config)?;
            println!(
                "estimator={} N={} Q={} trials={}: bias={:.6e} variance={:.6e} (reference: {})",
                report.estimator,
                report.inner_steps,
                report.perturbations,
                report.trials,
                report.bias,
                report.variance,
                report.ref_source
            );
            if let Some(path) = &config.out {
                println!("wrote report to {}", path.display());
            }
            Ok(())
        }
    }
}
