use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use isekf_cli::commands::{certify_report, run, sweep, sweep_summary, Overrides};
use isekf_cli::{parse_certify_config, parse_config, HarnessError};

#[derive(Parser)]
#[command(name = "isekf", version, about = "Saturated EKF experiments and stability certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one seed and write CSV, SVG plots and metrics.
    Run(ExperimentArgs),
    /// Certify a linear system and print the error bounds.
    Certify(ConfigArg),
    /// Run a batch of seeds and print aggregate metrics.
    Sweep(ExperimentArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Config file.
    #[arg(required_unless_present = "config_flag", conflicts_with = "config_flag")]
    config: Option<PathBuf>,
    #[arg(long = "config", value_name = "PATH")]
    config_flag: Option<PathBuf>,
}

impl ConfigArg {
    fn path(&self) -> PathBuf {
        self.config.clone().or_else(|| self.config_flag.clone()).expect("clap enforces a config")
    }
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Comma-separated subset of is-ekf, ekf, lsigma-ekf.
    #[arg(long, value_delimiter = ',')]
    filters: Option<Vec<String>>,
    /// Gate width of the lsigma-ekf in standard deviations.
    #[arg(long)]
    ell: Option<f64>,
}

impl ExperimentArgs {
    fn load(&self) -> Result<isekf_cli::ExperimentConfig, HarnessError> {
        let mut cfg = parse_config(&self.config.path())?;
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            filters: self.filters.clone(),
            ell: self.ell,
        }
        .apply(&mut cfg)?;
        Ok(cfg)
    }
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.load()?;
            let report = run(&cfg)?;
            if report.is_empty() {
                println!("empty trace (horizon 0)");
            } else {
                print!("{}", report.render());
                print!("{}", report.render_timing());
            }
        }
        Command::Certify(arg) => {
            let problem = parse_certify_config(&arg.path())?;
            print!("{}", certify_report(&problem)?);
        }
        Command::Sweep(args) => {
            let cfg = args.load()?;
            let results = sweep(&cfg)?;
            print!("{}", sweep_summary(&results));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ISEKF_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
