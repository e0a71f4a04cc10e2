//! `cswitch`: staged pipeline for code-switching speech recognition experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cswitch::experiment::{self, ExperimentConfig, GridConfig};

#[derive(Parser)]
#[command(name = "cswitch", version, about = "Mandarin-English code-switching ASR pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment directory; every artifact of the run lives here.
    #[arg(long)]
    dir: PathBuf,
    /// TOML experiment config. Defaults to the config copy in `--dir`, else built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// System name such as `E2E`, `E2ELD`, `E2ESW+3W+F3+SF`.
    #[arg(long)]
    system: Option<String>,
    /// 1 keeps particles and noises, 2 merges them into `<dispar>`/`<nlsyms>`.
    #[arg(long)]
    label: Option<u8>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize train/dev/eval (and monolingual pools for F systems).
    GenData(RunArgs),
    /// Learn English BPE merges (no-op for character systems).
    TrainBpe(RunArgs),
    /// Map labels, augment, build the vocabulary and extract features.
    Prep(RunArgs),
    /// Train the recurrent LM used by SF/CF systems.
    LmTrain(RunArgs),
    /// Train the joint CTC-attention model.
    Train(RunArgs),
    /// Beam-search dev and eval.
    Decode(RunArgs),
    /// Score dev and eval hypotheses.
    Score(RunArgs),
    /// Every stage in order.
    Run(RunArgs),
    /// Assemble the result grid from scored run directories.
    Report {
        /// Run directories, or roots searched recursively for them.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Print JSON instead of the text table.
        #[arg(long)]
        json: bool,
    },
    /// Run a grid of systems × labels × seeds and write its report.
    Grid {
        /// TOML grid config (`systems`, `labels`, `seeds`, `[base]`).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Root directory for the runs.
        #[arg(long)]
        dir: PathBuf,
    },
    /// Print the effective experiment config.
    ShowConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let copy = args.dir.join("config.toml");
    let mut cfg = match (&args.config, copy.is_file()) {
        (Some(p), _) => ExperimentConfig::read(p)?,
        (None, true) => ExperimentConfig::read(&copy)?,
        (None, false) => ExperimentConfig::default(),
    };
    if let Some(s) = &args.system {
        cfg.system = s.clone();
    }
    if let Some(l) = args.label {
        cfg.label = l;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

type StageFn = fn(&Path, &ExperimentConfig) -> experiment::Result<()>;

fn stage(args: RunArgs, f: StageFn) -> Result<()> {
    let cfg = load_config(&args)?;
    f(&args.dir, &cfg)?;
    Ok(())
}

fn find_runs(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.join("config.toml").is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    let mut children: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for c in children {
        find_runs(&c, out)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => stage(a, experiment::gen_data),
        Command::TrainBpe(a) => stage(a, experiment::train_bpe),
        Command::Prep(a) => stage(a, experiment::prep),
        Command::LmTrain(a) => stage(a, experiment::lm_train_stage),
        Command::Train(a) => stage(a, experiment::train_stage),
        Command::Decode(a) => stage(a, experiment::decode_stage),
        Command::Score(a) => stage(a, experiment::score_stage),
        Command::Run(a) => stage(a, experiment::run_all),
        Command::Report { dirs, json } => {
            let mut runs = Vec::new();
            for d in &dirs {
                find_runs(d, &mut runs)?;
            }
            if runs.is_empty() {
                bail!("no run directories found");
            }
            let rep = experiment::report(&runs)?;
            print!("{}", if json { rep.to_json() } else { rep.to_text() });
            Ok(())
        }
        Command::Grid { config, dir } => {
            let grid = match config {
                Some(p) => GridConfig::read(&p)?,
                None => GridConfig::default(),
            };
            let mut failed = 0;
            let rep = experiment::run_grid(&grid, &dir, |cfg, r| {
                let status = match r {
                    Ok(()) => "ok".to_string(),
                    Err(e) => {
                        failed += 1;
                        format!("FAILED: {e}")
                    }
                };
                eprintln!("{} label {} seed {}: {status}", cfg.system, cfg.label, cfg.seed);
            })?;
            print!("{}", rep.to_text());
            if failed > 0 {
                bail!("{failed} run(s) failed");
            }
            Ok(())
        }
        Command::ShowConfig { config } => {
            let cfg = match config {
                Some(p) => ExperimentConfig::read(&p)?,
                None => ExperimentConfig::default(),
            };
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
