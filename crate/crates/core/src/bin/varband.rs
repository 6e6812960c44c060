use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use varband::harness::{self, Kind};

#[derive(Parser)]
#[command(
    name = "varband",
    version,
    about = "Variance-adaptive bandit and MDP experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (learner, seed) pair of a config and aggregate the results.
    Run(RunArgs),
    /// Run the martingale concentration falsifier described by a config.
    Falsify(RunArgs),
    /// Check a config without running anything.
    Validate(ConfigArg),
    /// Print a sweep's summary.csv and write curves.csv next to it.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Path to the JSON config.
    #[arg(value_name = "CONFIG")]
    path: Option<PathBuf>,
    #[arg(long = "config", value_name = "PATH", conflicts_with = "path")]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn resolve(&self) -> Option<&PathBuf> {
        self.path.as_ref().or(self.config.as_ref())
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory; overrides the config's `output`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads; overrides the config's `jobs`.
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    jobs: Option<u64>,
    /// Added to every run seed.
    #[arg(long = "seed-offset", value_name = "N", default_value_t = 0)]
    seed_offset: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Sweep directory holding summary.csv and manifest.json.
    #[arg(value_name = "DIR")]
    dir: Option<PathBuf>,
    #[arg(long = "out", value_name = "DIR", conflicts_with = "dir")]
    out: Option<PathBuf>,
}

fn usage(msg: &str) -> ExitCode {
    eprintln!("error: {msg}\n\nRun `varband --help` for usage.");
    ExitCode::from(2)
}

fn run(args: &RunArgs, want: Option<Kind>) -> Result<ExitCode, varband::Error> {
    let Some(path) = args.config.resolve() else {
        return Ok(usage("a config path is required"));
    };
    let mut cfg = harness::parse_config(path)?.with_seed_offset(args.seed_offset);
    if let Some(kind) = want {
        if cfg.kind != kind {
            return Ok(usage(
                "`falsify` needs a config with \"kind\": \"falsifier\"",
            ));
        }
    }
    if let Some(j) = args.jobs {
        cfg.jobs = Some(j as usize);
    }
    let dir = args.out.clone().unwrap_or_else(|| cfg.output_dir());
    let outcome = harness::run_sweep(&cfg, &dir)?;
    eprintln!(
        "wrote {} run files, summary.csv and manifest.json to {}",
        outcome.runs.len(),
        outcome.dir.display()
    );
    harness::report(&dir, std::io::stdout().lock())?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Run(args) => run(args, None),
        Command::Falsify(args) => run(args, Some(Kind::Falsifier)),
        Command::Validate(arg) => match arg.resolve() {
            None => Ok(usage("a config path is required")),
            Some(path) => harness::parse_config(path).map(|cfg| {
                println!(
                    "{}: ok ({:?}, {} learner(s), {} seed(s))",
                    path.display(),
                    cfg.kind,
                    cfg.learners.len(),
                    cfg.seeds.len()
                );
                ExitCode::SUCCESS
            }),
        },
        Command::Report(args) => match args.dir.as_ref().or(args.out.as_ref()) {
            None => Ok(usage("a sweep directory is required")),
            Some(dir) => harness::report(dir, std::io::stdout().lock()).map(|_| ExitCode::SUCCESS),
        },
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
