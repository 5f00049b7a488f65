use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use subspace_flow::commands::{self, AblateArgs, CmdError, EvalArgs, GradcheckArgs, SampleArgs, TrainArgs};

/// Worker thread count for the rayon pool; unset uses all cores.
const THREADS_ENV: &str = "SUBFLOW_THREADS";

#[derive(Parser)]
#[command(name = "subflow", version, about = "Subspace flow-matching backbone on a synthetic lip-to-latent task")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a JSON config; writes metrics.csv, checkpoint.bin and eval.json.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override a config key, e.g. `--set train.total_steps=500`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Validate the config and print parameter counts only.
        #[arg(long)]
        dry_run: bool,
        /// Continue from OUT/checkpoint.bin if present.
        #[arg(long)]
        resume: bool,
    },
    /// Generate latents from a checkpoint.
    Sample {
        ckpt: PathBuf,
        #[arg(long, default_value_t = 10)]
        nfe: usize,
        /// Generations per condition.
        #[arg(long, default_value_t = 4)]
        n: usize,
        /// Archive with `visual.{i}` / `speaker.{i}` tensors.
        #[arg(long)]
        condition_file: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every primitive and the full model (64-bit).
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Entries perturbed per parameter tensor; 0 checks all.
        #[arg(long, default_value_t = 8)]
        max_entries: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against the synthetic world.
    Eval {
        ckpt: PathBuf,
        #[arg(long)]
        world_seed: Option<u64>,
        /// World config JSON; dimensions must match the checkpoint.
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        nfe: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train and evaluate one run per value of an ablation axis.
    Ablate {
        /// kernel, subspaces, losses, repar or backbone-rank0
        #[arg(long)]
        axis: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long, default_value = "ablations")]
        out: PathBuf,
    },
    /// Draw world samples into a dataset archive for fixed-corpus training.
    ExportDataset {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print(v: &impl Serialize) -> Result<(), CmdError> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cmd: Cmd) -> Result<(), CmdError> {
    match cmd {
        Cmd::Train {
            config,
            out,
            sets,
            dry_run,
            resume,
        } => {
            let args = TrainArgs {
                config,
                out,
                overrides: sets,
                dry_run,
                resume,
            };
            let summary = commands::train(&args, |l| {
                if l.step % 100 == 0 {
                    eprintln!(
                        "step {} lr {:.3e} loss {:.5} fm {:.5} grad_norm {:.3}",
                        l.step, l.lr, l.loss.total, l.loss.fm, l.grad_norm
                    );
                }
            })?;
            print(&summary)
        }
        Cmd::Sample {
            ckpt,
            nfe,
            n,
            condition_file,
            out,
            seed,
        } => print(&commands::sample(&SampleArgs {
            ckpt,
            nfe,
            n,
            condition_file,
            out,
            seed,
        })?),
        Cmd::Gradcheck {
            config,
            sets,
            tolerance,
            max_entries,
            report,
        } => {
            let args = GradcheckArgs {
                config,
                overrides: sets,
                tolerance,
                max_entries,
                report,
            };
            print(&commands::gradcheck(&args)?)
        }
        Cmd::Eval {
            ckpt,
            world_seed,
            world,
            nfe,
            report,
        } => print(&commands::eval(&EvalArgs {
            ckpt,
            world_seed,
            world,
            nfe,
            report,
        })?),
        Cmd::Ablate {
            axis,
            config,
            sets,
            out,
        } => {
            let path = commands::ablate(&AblateArgs {
                axis,
                config,
                overrides: sets,
                out,
            })?;
            println!("{}", path.display());
            Ok(())
        }
        Cmd::ExportDataset {
            config,
            sets,
            n,
            seed,
            out,
        } => {
            let cfg = commands::load_config(config.as_deref(), &sets)?;
            print(&commands::export_dataset(&cfg, n, seed, &out)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            }
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got `{v}`");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code.clamp(1, 255) as u8)
        }
    }
}
