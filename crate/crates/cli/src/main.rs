use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::error;

use saol::commands::{cmd_eval, cmd_train, cmd_visualize, cmd_wsol, CommandError, Phase, CHECKPOINT_FILE};
use saol::config::{HeadChoice, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "saol", version, about = "Train and evaluate spatially attentive output layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint to evaluate, or to resume training from.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory, overriding `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training seed, overriding `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output layer used for reported predictions.
    #[arg(long, global = true, value_enum)]
    head: Option<Head>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Train a model and write checkpoints and a metrics log.
    Train,
    /// Report test accuracy of both heads.
    Eval,
    /// Score weakly-supervised localization and export heatmaps.
    Wsol,
    /// Export inputs, attention maps and class score maps as images.
    Visualize,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Head {
    Saol,
    Gapfc,
}

fn load_config(cli: &Cli) -> Result<RunConfig, CommandError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
    .map_err(|source| CommandError {
        phase: Phase::Config,
        source,
    })?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(h) = cli.head {
        cfg.head = match h {
            Head::Saol => HeadChoice::Saol,
            Head::Gapfc => HeadChoice::Gapfc,
        };
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CommandError> {
    let cfg = load_config(cli)?;
    let checkpoint = cli
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
    match cli.command {
        Command::Train => {
            let out = cmd_train(&cfg, cli.checkpoint.as_deref())?;
            if let Some(last) = out.rows.last() {
                println!(
                    "epoch {} step {}: saol {:.4} gapfc {:.4}",
                    last.epoch, last.step, last.acc_saol, last.acc_gapfc
                );
            }
            println!("checkpoint {}", out.checkpoint.display());
            println!("metrics {}", out.metrics.display());
        }
        Command::Eval => {
            let out = cmd_eval(&cfg, &checkpoint)?;
            println!("saol accuracy {:.4}", out.report.acc_saol);
            println!("gapfc accuracy {:.4}", out.report.acc_gapfc);
            println!("selected {:?} accuracy {:.4} on {} images", out.head, out.accuracy(), out.report.count);
        }
        Command::Wsol => {
            let out = cmd_wsol(&cfg, &checkpoint)?;
            println!("top-1 loc accuracy {:.4}", out.top1.accuracy);
            println!("gt-known loc accuracy {:.4}", out.gt_known.accuracy);
            println!("random-box baseline {:.4}", out.random_baseline);
            if out.gt_known.skipped > 0 {
                println!("skipped {} images without boxes", out.gt_known.skipped);
            }
            println!("report {}", out.report.display());
        }
        Command::Visualize => {
            let files = cmd_visualize(&cfg, &checkpoint)?;
            println!("wrote {} images to {}", files.len(), cfg.out_dir.join("visualize").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
