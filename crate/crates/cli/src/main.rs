//! `uatta`: simulate, select, adapt, evaluate, diagnose and report.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use uatta_core::adapt::Objective;
use uatta_core::uncertainty::UncertaintyVariant;

use crate::config::RunConfig;
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "uatta", version, about = "Uncertainty-aware test-time adaptation for text-to-image retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Debug, Args)]
struct Common {
    /// TOML run document with [simulate], [adapt] and [diagnose] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for simulation and adaptation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    rounds: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, global = true, value_enum)]
    baseline: Option<Baseline>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    Normdiff,
    Meanconf,
    Logratio,
}

impl From<VariantArg> for UncertaintyVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Normdiff => UncertaintyVariant::NormalizedDiffExp,
            VariantArg::Meanconf => UncertaintyVariant::MeanConfidence,
            VariantArg::Logratio => UncertaintyVariant::LogRatio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Uatta,
    Tent,
    /// Skip adaptation; report the unadapted scores.
    None,
}

#[derive(Debug, Args)]
pub struct Inputs {
    /// Text embeddings (UEB1).
    #[arg(long, requires = "image")]
    pub text: Option<PathBuf>,
    /// Image embeddings (UEB1).
    #[arg(long, requires = "text")]
    pub image: Option<PathBuf>,
    /// External score matrix (USM1). With --text/--image those only supply ids and labels.
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic text/image pair with a text-side shift.
    Simulate,
    /// Run cycle-consistency selection and dump the reliable set.
    Select(Inputs),
    /// Adapt the text calibration head and write head, history and report.
    Adapt(Inputs),
    /// R@1/5/10 and mAP, optionally after applying a saved head.
    Evaluate {
        #[command(flatten)]
        inputs: Inputs,
        /// Calibration head (UCH1) applied to the text side first.
        #[arg(long)]
        head: Option<PathBuf>,
    },
    /// TP/FP uncertainty histogram, separation AUC and per-pair uncertainties.
    Diagnose(Inputs),
    /// Rebuild and print the report of an `adapt` output directory.
    Report {
        /// Directory written by `adapt`.
        #[arg(long)]
        run: PathBuf,
    },
}

pub struct Resolved {
    pub config: RunConfig,
    pub baseline: Baseline,
    pub out: Option<PathBuf>,
}

fn resolve(common: Common) -> CliResult<Resolved> {
    let mut config = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.set_seed(seed);
    }
    let a = &mut config.adapt;
    if let Some(k) = common.k {
        a.k = k;
    }
    if let Some(r) = common.rounds {
        a.rounds = Some(r);
    }
    if let Some(lr) = common.lr {
        a.learning_rate = lr;
    }
    if let Some(v) = common.variant {
        a.uncertainty_variant = v.into();
    }
    let baseline = match common.baseline {
        Some(b) => b,
        None => match a.objective {
            Objective::Uatta => Baseline::Uatta,
            Objective::Tent => Baseline::Tent,
        },
    };
    match baseline {
        Baseline::Uatta => a.objective = Objective::Uatta,
        Baseline::Tent => a.objective = Objective::Tent,
        Baseline::None => {}
    }
    Ok(Resolved {
        config,
        baseline,
        out: common.out,
    })
}

fn run(cli: Cli) -> CliResult<()> {
    let res = resolve(cli.common)?;
    match cli.command {
        Command::Simulate => commands::simulate(&res),
        Command::Select(inputs) => commands::select(&res, &inputs),
        Command::Adapt(inputs) => commands::adapt(&res, &inputs),
        Command::Evaluate { inputs, head } => commands::evaluate(&res, &inputs, head.as_deref()),
        Command::Diagnose(inputs) => commands::diagnose(&res, &inputs),
        Command::Report { run } => commands::report(&res, &run),
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::CliError;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_the_file() {
        let cli = Cli::try_parse_from([
            "uatta", "adapt", "--text", "t", "--image", "i", "--k", "3", "--rounds", "0", "--lr",
            "0.01", "--variant", "logratio", "--baseline", "tent", "--seed", "5",
        ])
        .unwrap();
        let r = resolve(cli.common).unwrap();
        let a = &r.config.adapt;
        assert_eq!((a.k, a.rounds, a.seed), (3, Some(0), 5));
        assert_eq!(a.learning_rate, 0.01);
        assert_eq!(a.uncertainty_variant, UncertaintyVariant::LogRatio);
        assert_eq!(a.objective, Objective::Tent);
        assert_eq!(r.config.simulate.seed, 5);
    }

    #[test]
    fn usage_errors_are_not_panics() {
        assert!(Cli::try_parse_from(["uatta", "adapt", "--text", "t"]).is_err());
        assert!(Cli::try_parse_from(["uatta", "adapt", "--variant", "bogus"]).is_err());
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
    }
}
