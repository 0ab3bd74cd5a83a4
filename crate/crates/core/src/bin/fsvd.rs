use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fsvd::commands::{cmd_fit, cmd_predict, cmd_scores, cmd_simulate};
use fsvd::io::RunConfig;
use fsvd::Result;

#[derive(Parser)]
#[command(name = "fsvd", version, about = "Functional SVD of bivariate mean surfaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a decomposition and write components, scores and reconstructions.
    Fit(Settings),
    /// Write per-subject reconstructions from a fitted model.
    Predict(Settings),
    /// Run the Monte Carlo study (one design, or the full table).
    Simulate(Settings),
    /// Write component scores with robust outlier flags.
    Scores(Settings),
}

/// Flags override values from `--config`.
#[derive(Args)]
struct Settings {
    /// key=value settings file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset: long CSV (subject,s,t,value) or a JSON matrix manifest
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Directory holding a previous `fit` output
    #[arg(long)]
    model: Option<String>,
    /// Number of components, or `cv`
    #[arg(long)]
    p: Option<String>,
    #[arg(long)]
    order: Option<String>,
    #[arg(long = "max-knots")]
    max_knots: Option<String>,
    /// none | log
    #[arg(long)]
    transform: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    replicates: Option<String>,
    /// Comma-separated subset of TPS,SVf,SVo
    #[arg(long)]
    protocols: Option<String>,
    /// mu1 | mu2
    #[arg(long)]
    mean: Option<String>,
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    m: Option<String>,
    #[arg(long)]
    n: Option<String>,
}

impl Settings {
    fn into_config(self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let flags = [
            ("input", self.input),
            ("out", self.out),
            ("model", self.model),
            ("p", self.p),
            ("order", self.order),
            ("max_knots", self.max_knots),
            ("transform", self.transform),
            ("seed", self.seed),
            ("replicates", self.replicates),
            ("protocols", self.protocols),
            ("mean", self.mean),
            ("sigma", self.sigma),
            ("m", self.m),
            ("n", self.n),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                config.set(key, v)?;
            }
        }
        Ok(config)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (run, settings): (fn(&RunConfig) -> Result<String>, Settings) = match cli.command {
        Command::Fit(s) => (cmd_fit, s),
        Command::Predict(s) => (cmd_predict, s),
        Command::Simulate(s) => (cmd_simulate, s),
        Command::Scores(s) => (cmd_scores, s),
    };
    match settings.into_config().and_then(|c| run(&c)) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
