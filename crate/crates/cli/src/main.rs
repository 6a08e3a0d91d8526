//! `cxscale`: generate synthetic scenes, train the sampler, predictor and
//! alignment head stage by stage, and evaluate, sweep or ablate the result.
//!
//! Every command reads its configuration from defaults, then `--config`,
//! then per-key flags, and writes its artifacts plus a JSON manifest into
//! `--out`. Failures print one JSON line on stderr and exit nonzero.

mod commands;
mod error;
mod workspace;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand};
use cxs_core::config::RunConfig;

use crate::error::{CliError, CliResult};
use crate::workspace::Workspace;

#[derive(Debug, Parser)]
#[command(name = "cxscale", version, about = "Budgeted cross-scale observation pipeline")]
struct Cli {
    /// `key = value` configuration file; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "cxs-out")]
    out: PathBuf,
    /// Worker threads for per-scene parallelism; results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the training and test scene files.
    GenData {
        /// Training scene count (overrides train-scenes).
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Compute the sampler supervision maps of both scene files.
    MakeSupervision,
    /// Fit the tile sampler to the training supervision.
    TrainSampler,
    /// Stage I: train the latent predictor.
    TrainPredictor,
    /// Stage II: train the alignment head on the frozen pipeline.
    TrainAlign,
    /// Pick the threshold that meets the target observation budget.
    Calibrate,
    /// Score the trained pipeline on the test scenes.
    Evaluate,
    /// Evaluate across a grid of thresholds.
    Sweep {
        /// Comma-separated thresholds; defaults to the standard grid.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
    },
    /// Train and score every ablation cell for each seed.
    Ablate,
    /// Finite-difference check of every differentiable component.
    Gradcheck,
}

fn kebab(key: &str) -> String {
    key.replace('_', "-")
}

fn command_with_config_flags() -> clap::Command {
    let defaults = RunConfig::default().to_json();
    RunConfig::keys().into_iter().fold(Cli::command(), |cmd, key| {
        let help = format!("Config key {key} (default {})", defaults[&key]);
        cmd.arg(
            Arg::new(key.clone())
                .long(kebab(&key))
                .value_name("VALUE")
                .global(true)
                .action(ArgAction::Set)
                .help(help),
        )
    })
}

/// Keys assigned in a config file, in file order.
fn keys_in(text: &str) -> Vec<String> {
    text.lines()
        .filter_map(|l| l.split('#').next()?.split_once('='))
        .map(|(k, _)| k.trim().to_string())
        .collect()
}

fn resolve_config(cli: &Cli, matches: &ArgMatches) -> CliResult<(RunConfig, BTreeSet<String>)> {
    let mut explicit = BTreeSet::new();
    let mut cfg = match &cli.config {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::MissingInput(path.clone()));
            }
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            explicit.extend(keys_in(&text));
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    let sub = matches.subcommand().map(|(_, m)| m);
    for key in RunConfig::keys() {
        let value = sub
            .and_then(|m| m.get_one::<String>(&key))
            .or_else(|| matches.get_one::<String>(&key));
        if let Some(raw) = value {
            cfg.set(&key, raw)?;
            explicit.insert(key);
        }
    }
    if let Command::GenData { scenes: Some(n) } = cli.command {
        cfg.train_scenes = n;
        explicit.insert("train_scenes".into());
    }
    cfg.validate()?;
    Ok((cfg, explicit))
}

fn run() -> CliResult<()> {
    let matches = match command_with_config_flags().try_get_matches() {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            e.print().map_err(|io| CliError::io("stdout", io))?;
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("bad arguments");
            return Err(CliError::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::Usage(e.to_string()))?;
    let (cfg, explicit) = resolve_config(&cli, &matches)?;
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let workers = rayon::current_num_threads();
    let ws = Workspace::new(cfg, explicit, cli.out, workers)?;
    match cli.command {
        Command::GenData { .. } => commands::gen_data(&ws),
        Command::MakeSupervision => commands::make_supervision(&ws),
        Command::TrainSampler => commands::train_sampler(&ws),
        Command::TrainPredictor => commands::train_predictor(&ws),
        Command::TrainAlign => commands::train_align(&ws),
        Command::Calibrate => commands::calibrate(&ws),
        Command::Evaluate => commands::evaluate(&ws),
        Command::Sweep { thresholds } => commands::sweep(&ws, thresholds),
        Command::Ablate => commands::ablate(&ws),
        Command::Gradcheck => commands::gradcheck(&ws),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_config_key_has_a_kebab_flag() {
        let cmd = command_with_config_flags();
        for key in RunConfig::keys() {
            let arg = cmd.get_arguments().find(|a| a.get_id() == key.as_str()).unwrap();
            assert_eq!(arg.get_long(), Some(kebab(&key).as_str()));
        }
        cmd.debug_assert();
    }

    #[test]
    fn flags_override_file_and_are_tracked() {
        let dir = std::env::temp_dir().join(format!("cxs-cli-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        std::fs::write(&path, "grid = 6 # small\nthreshold = 0.3\n").unwrap();
        let argv = ["cxscale", "--config", path.to_str().unwrap(), "evaluate", "--grid", "5", "--target-obr", "0.2"];
        let matches = command_with_config_flags().try_get_matches_from(argv).unwrap();
        let cli = Cli::from_arg_matches(&matches).unwrap();
        let (cfg, explicit) = resolve_config(&cli, &matches).unwrap();
        assert_eq!(cfg.scene.grid, 5);
        assert_eq!(cfg.threshold, 0.3);
        assert_eq!(cfg.target_obr, 0.2);
        assert!(explicit.contains("threshold") && explicit.contains("grid") && !explicit.contains("seed"));
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn gen_data_scene_count_overrides_train_scenes() {
        let matches = command_with_config_flags()
            .try_get_matches_from(["cxscale", "gen-data", "--scenes", "8", "--seed", "7"])
            .unwrap();
        let cli = Cli::from_arg_matches(&matches).unwrap();
        let (cfg, _) = resolve_config(&cli, &matches).unwrap();
        assert_eq!((cfg.train_scenes, cfg.seed), (8, 7));
    }
}
