use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pathint::cli::{self, BenchKind, CliError, ExperimentConfig, Overrides};

#[derive(Parser, Debug)]
#[command(name = "pathint", version, about = "Path-integral control: sampling, diagnostics and feedback fitting")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment configuration (defaults apply when omitted)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of sample paths
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// Time step
    #[arg(long, global = true)]
    dt: Option<f64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for the simulator
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample under the configured policy and write summary.json
    Simulate,
    /// Fit a feedback controller by iterative importance sampling
    Fit,
    /// Reproduce a benchmark table or figure as CSV
    Bench {
        #[arg(value_enum)]
        which: Which,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Which {
    Table1,
    Figure1,
    Figure2,
}

fn run(args: Args) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    config.apply(&Overrides { seed: args.seed, n_paths: args.paths, dt: args.dt, out: args.out, threads: args.threads });
    match args.command {
        Command::Simulate => {
            let s = cli::cmd_simulate(&config)?;
            println!(
                "ES = {:.6} ± {:.6}  J = {:.6} ± {:.6}  var_alpha = {:.6}  lambda = {:.4}",
                s.es, s.es_se, s.j, s.j_se, s.var_alpha, s.lambda
            );
        }
        Command::Fit => {
            let f = cli::cmd_fit(&config)?;
            for r in &f.report.rounds {
                println!("round {}: ES = {:.6}  lambda = {:.4}", r.round, r.es, r.lambda);
            }
            let e = &f.evaluation;
            println!("fitted {}: ES = {:.6} ± {:.6}  lambda = {:.4}", f.report.basis, e.es, e.es_se, e.lambda);
        }
        Command::Bench { which } => {
            let kind = match which {
                Which::Table1 => BenchKind::Table1,
                Which::Figure1 => BenchKind::Figure1,
                Which::Figure2 => BenchKind::Figure2,
            };
            for p in cli::cmd_bench(kind, &config)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
