//! Argument parsing and dispatch for the `module` binary.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use module_core::critic::FractionMode;
use module_core::env::EnvKind;
use module_core::risk::RiskKind;
use module_core::trainer::{Algorithm, TrainConfig};

use crate::config::{effective_config, Overrides};
use crate::formats::{export_observations_csv, load_observations, save_observations};
use crate::run::{self, DISTANCE_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "module", version, about = "Imitation from observations with distributional soft actor-critic")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a SAC expert on the ground-truth reward.
    TrainExpert(TrainExpertArgs),
    /// Roll an expert checkpoint with action noise and save (s, s') pairs.
    Collect(CollectArgs),
    /// Train an imitation learner (or SAC) and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint's deterministic policy.
    Eval(EvalArgs),
    /// LfO reward distance and transition error for every checkpoint of a run.
    Distance(DistanceArgs),
}

fn algo_parser() -> impl clap::builder::TypedValueParser<Value = Algorithm> {
    PossibleValuesParser::new(["module", "sac", "sac-gailfo"]).map(|s| s.parse().expect("listed value"))
}

fn env_parser() -> impl clap::builder::TypedValueParser<Value = EnvKind> {
    PossibleValuesParser::new(["pointmass2d", "pendulum"]).map(|s| s.parse().expect("listed value"))
}

fn fractions_parser() -> impl clap::builder::TypedValueParser<Value = FractionMode> {
    PossibleValuesParser::new(["qrdqn", "iqn", "fqf"]).map(|s| s.parse().expect("listed value"))
}

fn risk_parser() -> impl clap::builder::TypedValueParser<Value = RiskKind> {
    PossibleValuesParser::new(["neutral", "mean-variance", "var", "cpw", "wang", "cvar"])
        .map(|s| s.parse().expect("listed value"))
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON file with TrainConfig keys; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = env_parser())]
    pub env: Option<EnvKind>,
    #[arg(long)]
    pub eval_episodes: Option<usize>,
}

/// Training flags shared by `train` and `train-expert`.
#[derive(Debug, Clone, Args)]
pub struct TrainingFlags {
    /// Run directory.
    #[arg(long)]
    pub out: Option<String>,
    /// Total environment steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainExpertArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub training: TrainingFlags,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub training: TrainingFlags,
    #[arg(long, value_parser = algo_parser())]
    pub algo: Option<Algorithm>,
    /// Expert observation dataset (MODL).
    #[arg(long)]
    pub expert_data: Option<String>,
    #[arg(long, value_parser = risk_parser())]
    pub risk_measure: Option<RiskKind>,
    #[arg(long, allow_negative_numbers = true)]
    pub beta: Option<f64>,
    #[arg(long, value_parser = fractions_parser())]
    pub fractions: Option<FractionMode>,
    #[arg(long)]
    pub num_quantiles: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct CollectArgs {
    #[command(flatten)]
    pub common: Common,
    /// Expert checkpoint (MDLP).
    #[arg(long)]
    pub checkpoint: Option<String>,
    /// Output dataset; a `.csv` extension writes the inspection CSV instead.
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint (MDLP) whose actor is evaluated.
    #[arg(long)]
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct DistanceArgs {
    #[command(flatten)]
    pub common: Common,
    /// Run directory whose checkpoints are scored; the report is written there.
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub expert_data: Option<String>,
}

/// An invocation problem the user can fix; exits with [`EXIT_USAGE`].
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            env: self.env,
            eval_episodes: self.eval_episodes,
            ..Overrides::default()
        }
    }

    /// Loads the file and applies `overrides`; any problem is a usage error.
    fn config(&self, overrides: Overrides) -> Result<TrainConfig> {
        effective_config(self.config.as_deref(), &overrides).map_err(|e| usage(format!("{e:#}")))
    }
}

fn required<'a>(value: &'a Option<String>, flag: &str, cmd: &str) -> Result<&'a str> {
    value
        .as_deref()
        .ok_or_else(|| usage(format!("`{cmd}` needs --{flag} (or `{}` in the config file)", flag.replace('-', "_"))))
}

fn train_overrides(common: &Common, t: &TrainingFlags) -> Overrides {
    Overrides {
        out: t.out.clone(),
        total_steps: t.steps,
        ..common.overrides()
    }
}

fn run_training(config: &TrainConfig, cmd: &str) -> Result<()> {
    let out = required(&config.out, "out", cmd)?;
    let expert = if config.algo.uses_expert() {
        let path = required(&config.expert_data, "expert-data", cmd)?;
        Some(load_observations(Path::new(path))?)
    } else {
        None
    };
    let artifacts = run::train(config, expert, Path::new(out))?;
    println!("{}", serde_json::to_string_pretty(&artifacts.final_eval)?);
    Ok(())
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::TrainExpert(a) => {
            let o = Overrides {
                algo: Some(Algorithm::Sac),
                ..train_overrides(&a.common, &a.training)
            };
            let config = a.common.config(o)?;
            run_training(&config, "train-expert")
        }
        Command::Train(a) => {
            let o = Overrides {
                algo: a.algo,
                expert_data: a.expert_data.clone(),
                risk_measure: a.risk_measure,
                beta: a.beta,
                fractions: a.fractions,
                num_quantiles: a.num_quantiles,
                ..train_overrides(&a.common, &a.training)
            };
            let config = a.common.config(o)?;
            run_training(&config, "train")
        }
        Command::Collect(a) => {
            let o = Overrides {
                checkpoint: a.checkpoint.clone(),
                out: a.out.clone(),
                pairs: a.pairs,
                noise_std: a.noise_std,
                ..a.common.overrides()
            };
            let config = a.common.config(o)?;
            let checkpoint = required(&config.checkpoint, "checkpoint", "collect")?;
            let out = Path::new(required(&config.out, "out", "collect")?);
            let set = run::collect(&config, Path::new(checkpoint))?;
            if out.extension().is_some_and(|e| e == "csv") {
                export_observations_csv(out, &set)?;
            } else {
                save_observations(out, &set)?;
            }
            println!(
                "{}",
                serde_json::json!({
                    "pairs": set.pairs.len(),
                    "env": set.env_id,
                    "noise_std": set.noise_std,
                    "mean_return": set.mean_return,
                    "out": out,
                })
            );
            Ok(())
        }
        Command::Eval(a) => {
            let o = Overrides {
                checkpoint: a.checkpoint.clone(),
                ..a.common.overrides()
            };
            let config = a.common.config(o)?;
            let checkpoint = required(&config.checkpoint, "checkpoint", "eval")?;
            let summary = run::evaluate_checkpoint(&config, Path::new(checkpoint))?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
        Command::Distance(a) => {
            let o = Overrides {
                out: a.out.clone(),
                expert_data: a.expert_data.clone(),
                ..a.common.overrides()
            };
            let mut config = a.common.config(o)?;
            let dir = PathBuf::from(required(&config.out, "out", "distance")?);
            let expert_path = required(&config.expert_data, "expert-data", "distance")?.to_string();
            // The run's own echo supplies γ, μ and the environment unless a
            // config file was given explicitly.
            if a.common.config.is_none() {
                if let Ok(text) = fs::read_to_string(dir.join(run::CONFIG_FILE)) {
                    let run_config = crate::config::parse_config(&text).map_err(|e| usage(format!("{e:#}")))?;
                    config = Overrides {
                        out: config.out.clone(),
                        expert_data: Some(expert_path.clone()),
                        ..a.common.overrides()
                    }
                    .apply(run_config);
                }
            }
            let expert = load_observations(Path::new(&expert_path))?;
            let rows = run::distance_report(&config, &dir, &expert)?;
            let path = dir.join(DISTANCE_FILE);
            run::write_distance_csv(&path, &rows)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
            Ok(())
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    EXIT_OK
                }
                ErrorKind::UnknownArgument => {
                    let _ = e.print();
                    eprintln!("\n{}", subcommand_help(&args));
                    EXIT_USAGE
                }
                _ => {
                    let _ = e.print();
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

/// Help text of the subcommand named in `args`, or the top-level help.
fn subcommand_help(args: &[OsString]) -> String {
    let mut cmd = Cli::command();
    let name = args.get(1).and_then(|a| a.to_str()).unwrap_or_default().to_string();
    match cmd.find_subcommand_mut(&name) {
        Some(sub) => sub.render_help().to_string(),
        None => cmd.render_help().to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(main_with_args(["module", "train", "--bogus"]), EXIT_USAGE);
        assert_eq!(main_with_args(["module", "train", "--algo", "dqn"]), EXIT_USAGE);
        assert_eq!(main_with_args(["module"]), EXIT_USAGE);
    }

    #[test]
    fn missing_expert_data_is_a_usage_error() {
        let dir = std::env::temp_dir().join("module-cli-missing-expert");
        let out = dir.to_str().unwrap();
        assert_eq!(main_with_args(["module", "train", "--algo", "module", "--out", out]), EXIT_USAGE);
        assert!(!dir.join("metrics.csv").exists());
    }

    #[test]
    fn unreadable_dataset_is_a_runtime_failure() {
        let dir = std::env::temp_dir().join("module-cli-bad-expert");
        let code = main_with_args([
            "module",
            "train",
            "--algo",
            "sac-gailfo",
            "--expert-data",
            "/nonexistent/expert.modl",
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_FAILURE);
    }

    #[test]
    fn negative_beta_parses() {
        let cli = Cli::try_parse_from(["module", "train", "--risk-measure", "wang", "--beta", "-0.75"]).unwrap();
        let Command::Train(a) = cli.command else { panic!("train") };
        assert_eq!(a.beta, Some(-0.75));
    }
}
