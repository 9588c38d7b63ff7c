use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rareflow::cli::{
    cmd_estimate, cmd_kl, cmd_report, cmd_sample, cmd_train, load_config, CliError,
    ExperimentConfig, Profile, MODEL_FILE,
};

#[derive(Parser)]
#[command(
    name = "rareflow",
    version,
    about = "Normalizing-flow importance sampling for rare events"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (defaults to the config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the seed for this command.
    #[arg(long)]
    seed: Option<u64>,
    /// `paper` or `desk`; overrides the config.
    #[arg(long, value_parser = parse_profile)]
    profile: Option<Profile>,
}

#[derive(Args)]
struct WithModel {
    #[command(flatten)]
    common: Common,
    /// Trained model (defaults to model.json in the output directory).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Number of draws (overrides the config's estimation size).
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a flow for the configured scenario.
    Train(Common),
    /// Importance-sampling and crude Monte Carlo estimates.
    Estimate(WithModel),
    /// Write flow samples with diagnostics to samples.csv.
    Sample(WithModel),
    /// KL divergence from the optimal proposal.
    Kl(WithModel),
    /// Summarise a run directory.
    Report {
        /// Run directory holding manifest.txt, history.csv and estimate.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    Profile::parse(s).ok_or_else(|| format!("unknown profile {s:?} (expected paper or desk)"))
}

fn setup(common: &Common) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut cfg = load_config(&common.config, common.profile)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    cfg.output_dir = out.clone();
    Ok((cfg, out))
}

fn setup_model(args: &WithModel) -> Result<(ExperimentConfig, PathBuf, PathBuf), CliError> {
    let (mut cfg, out) = setup(&args.common)?;
    if let Some(seed) = args.common.seed {
        cfg.estimation.seed = seed;
    }
    if let Some(n) = args.n {
        cfg.estimation.n = n;
    }
    let checkpoint = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| out.join(MODEL_FILE));
    Ok((cfg, out, checkpoint))
}

fn print_rows(rows: &[rareflow::cli::EstimateRow]) {
    for r in rows {
        let rel = r
            .rel_std_error
            .map(|e| format!(" (rel. s.e. {:.3}%)", 100.0 * e))
            .unwrap_or_default();
        println!("{:<20} {:.6e}{rel}", r.estimator, r.estimate);
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(common) => {
            let (mut cfg, out) = setup(&common)?;
            if let Some(seed) = common.seed {
                cfg.train.seed = seed;
            }
            let outcome = cmd_train(&cfg, &out, |line| eprintln!("{line}"))?;
            let loss = outcome.history.final_smoothed_loss().unwrap_or(f64::NAN);
            println!("final smoothed loss {loss:.6}");
            println!("model written to {}", out.join(MODEL_FILE).display());
        }
        Command::Estimate(args) => {
            let (cfg, out, ck) = setup_model(&args)?;
            print_rows(&cmd_estimate(&cfg, &ck, &out)?);
        }
        Command::Kl(args) => {
            let (cfg, out, ck) = setup_model(&args)?;
            print_rows(std::slice::from_ref(&cmd_kl(&cfg, &ck, &out)?));
        }
        Command::Sample(args) => {
            let (cfg, out, ck) = setup_model(&args)?;
            let n = args.n.unwrap_or(cfg.estimation.n);
            let path = cmd_sample(&cfg, &ck, n, cfg.estimation.seed, &out)?;
            println!("{n} samples written to {}", path.display());
        }
        Command::Report { out } => print!("{}", cmd_report(Path::new(&out))?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
