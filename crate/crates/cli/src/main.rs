use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use nucseg::datagen::LabelRatio;
use nucseg::pipeline::data::Partition;
use nucseg_cli::ablation::Axis;
use nucseg_cli::commands::{self, AblateArgs, EvalArgs, GenDataArgs, ModelArg, StageArg, TrainArgs};
use nucseg_cli::error::exit;
use nucseg_cli::{exit_code, RunConfig};

#[derive(Parser)]
#[command(name = "nucseg", version, about = "Semi-supervised nuclei instance segmentation")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset directory (overrides paths.data_dir).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output root (overrides paths.out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic scenes, crop patches and write the split manifest.
    GenData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scenes: Option<usize>,
        /// Labeled fraction: 1/8, 1/4 or 1/2.
        #[arg(long)]
        ratio: Option<LabelRatio>,
        #[arg(long)]
        force: bool,
    },
    /// Train teacher, pseudo-labels and student, or a single stage.
    Train {
        #[arg(long)]
        stage: Option<StageArg>,
        /// Explicit run directory instead of the config-hash default.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Evaluate a stored checkpoint on one split.
    Eval {
        #[arg(long, value_parser = commands::parse_partition, default_value = "test")]
        split: Partition,
        #[arg(long, default_value = "student")]
        model: ModelArg,
        #[arg(long)]
        run: Option<PathBuf>,
        /// Also write per-RoI embedding grids.
        #[arg(long)]
        dump_features: bool,
    },
    /// Run an ablation grid and emit table and plot files.
    Ablate {
        #[arg(long)]
        axis: Axis,
        /// Comma-separated axis values (defaults to the standard grid).
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(d) = cli.data {
        cfg.paths.data_dir = d;
    }
    if let Some(o) = cli.out.clone() {
        cfg.paths.out_dir = o;
    }
    match cli.cmd {
        Cmd::GenData {
            seed,
            scenes,
            ratio,
            force,
        } => {
            let dir = commands::gen_data(
                &cfg,
                &GenDataArgs {
                    out: None,
                    seed,
                    scenes,
                    ratio,
                    force,
                },
            )?;
            println!("{}", dir.display());
        }
        Cmd::Train { stage, run } => {
            let (dir, record) = commands::train(&cfg, &TrainArgs { stage, run })?;
            if let Some(r) = record {
                println!(
                    "{}",
                    nucseg::metrics::format_table(&[
                        (format!("{} (val)", r.config.heads), r.val.clone()),
                        (format!("{} (test)", r.config.heads), r.test.clone()),
                    ])
                );
            }
            println!("{}", dir.display());
        }
        Cmd::Eval {
            split,
            model,
            run,
            dump_features,
        } => {
            commands::eval(
                &cfg,
                &EvalArgs {
                    split,
                    model,
                    run,
                    dump_features,
                },
            )?;
        }
        Cmd::Ablate { axis, values, seeds } => {
            let (dir, _) = commands::ablate(&cfg, &AblateArgs { axis, values, seeds })?;
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
