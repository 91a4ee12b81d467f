use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use covsteer::risk::RiskMode;
use covsteer_cli::{preset, run, Command, ConstraintKind, Overrides, PresetName, ProblemConfig, RunOptions};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CommandArg {
    Solve,
    Ira,
    Montecarlo,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Dr,
    Gaussian,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ConstraintArg {
    Polytope,
    Cone,
}

/// Distributionally robust covariance steering with iterative risk allocation.
#[derive(Debug, Parser)]
#[command(name = "covsteer", version)]
struct Args {
    /// What to run.
    #[arg(value_enum)]
    command: CommandArg,

    /// Built-in problem: double_integrator, spacecraft_polytope or spacecraft_cone.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    preset: Option<String>,

    /// TOML problem file.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long, value_enum)]
    mode: Option<ModeArg>,

    /// Which constraint geometry of the config to use.
    #[arg(long, value_enum)]
    constraint: Option<ConstraintArg>,

    #[arg(long)]
    trials: Option<usize>,

    #[arg(long)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, default_value = "covsteer-out")]
    out: PathBuf,

    /// IRA interpolation weight in (0, 1).
    #[arg(long)]
    rho: Option<f64>,

    #[arg(long = "max-iters")]
    max_iters: Option<usize>,

    /// montecarlo: simulate the controller stored in this summary.json.
    #[arg(long)]
    solution: Option<PathBuf>,

    /// montecarlo: simulate the uniform-allocation controller.
    #[arg(long)]
    uniform: bool,

    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

fn load(args: &Args) -> Result<ProblemConfig, covsteer_cli::CliError> {
    let mut config = match (&args.preset, &args.config) {
        (Some(name), _) => preset(name.parse::<PresetName>().map_err(covsteer_cli::CliError::Parse)?),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| covsteer_cli::CliError::io(path, e))?;
            ProblemConfig::parse(&text)?
        }
        (None, None) => unreachable!("clap requires --preset or --config"),
    };
    config.apply(&Overrides {
        mode: args.mode.map(|m| match m {
            ModeArg::Dr => RiskMode::Dr,
            ModeArg::Gaussian => RiskMode::Gaussian,
        }),
        constraint: args.constraint.map(|c| match c {
            ConstraintArg::Polytope => ConstraintKind::Polytope,
            ConstraintArg::Cone => ConstraintKind::Cone,
        }),
        trials: args.trials,
        seed: args.seed,
        rho: args.rho,
        max_iterations: args.max_iters,
    });
    Ok(config)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let config = match load(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if args.print_config {
        print!("{}", config.to_toml());
        return ExitCode::SUCCESS;
    }
    let command = match args.command {
        CommandArg::Solve => Command::Solve,
        CommandArg::Ira => Command::Ira,
        CommandArg::Montecarlo => Command::MonteCarlo,
    };
    let options = RunOptions {
        solution: args.solution.clone(),
        uniform: args.uniform,
    };
    match run(&config, command, &args.out, &options) {
        Ok(report) => {
            println!(
                "{} {}: status {}, cost {:.6}",
                report.name, report.command, report.status, report.cost
            );
            if let Some(mc) = &report.montecarlo {
                println!(
                    "monte carlo: {} of {} trials violated (rate {:.4}, 95% interval [{:.4}, {:.4}])",
                    mc.joint_violations, mc.trials, mc.joint_rate, mc.joint_interval[0], mc.joint_interval[1]
                );
            }
            if let Some(w) = &report.warning {
                eprintln!("warning: {w}");
            }
            println!("outputs written to {}", args.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
