use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use rsir::attention::Mechanism;
use rsir::backbone::ModelConfig;
use rsir::harness::{self, bench, checkpoint::Checkpoint, inspect, train, BenchMode, RunConfig};

#[derive(Parser)]
#[command(name = "rsir", version, about = "Train, evaluate, benchmark and inspect RSIR models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Analytic,
    Timed,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a data spec.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: String,
        /// Pin RS-Win plans during evaluation.
        #[arg(long)]
        eval_seed: Option<u64>,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Attention cost per mechanism over token counts.
    Bench {
        /// Model config TOML or preset name; its first stage sets C, K and w.
        #[arg(long)]
        config: String,
        /// Comma-separated token counts L.
        #[arg(long, value_delimiter = ',', default_value = "64,256,1024,4096")]
        resolutions: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "dense,rs_win,ir_win,rsir")]
        mechanisms: Vec<String>,
        #[arg(long, value_enum, default_value_t = Mode::Timed)]
        mode: Mode,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the groupings each layer realizes on one input.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Data spec or IDX image file.
        #[arg(long)]
        input: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> rsir::Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            resume,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let mut log = |r: &harness::MetricsRow| {
                println!(
                    "epoch {:>3} {:<5} loss {:.4} top1 {:.4} lr {:.2e} ({:.1}s)",
                    r.epoch,
                    format!("{:?}", r.split).to_lowercase(),
                    r.loss,
                    r.top1,
                    r.lr,
                    r.wall_seconds
                )
            };
            let outcome = match resume {
                Some(ck) => harness::resume(&cfg, &ck, &mut log)?,
                None => train(&cfg, &mut log)?,
            };
            println!("checkpoint: {}", outcome.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            data,
            eval_seed,
            batch_size,
        } => {
            let r = harness::evaluate_checkpoint(&checkpoint, &data, eval_seed, batch_size)?;
            println!("{}", serde_json::json!({ "samples": r.samples, "loss": r.loss, "top1": r.top1 }));
        }
        Command::Bench {
            config,
            resolutions,
            mechanisms,
            mode,
            reps,
            out,
        } => {
            let model = ModelConfig::load(&config)?;
            let mechs = mechanisms.iter().map(|m| m.parse()).collect::<rsir::Result<Vec<Mechanism>>>()?;
            let mode = match mode {
                Mode::Analytic => BenchMode::Analytic,
                Mode::Timed => BenchMode::Timed { reps },
            };
            let rows = bench(&model, &resolutions, &mechs, mode)?;
            harness::bench::write_csv(&out, &rows)?;
            println!("{} rows -> {}", rows.len(), out.display());
        }
        Command::Inspect {
            checkpoint,
            input,
            index,
            seed,
            out,
        } => {
            let ck = Checkpoint::<f32>::load(&checkpoint)?;
            let model = harness::train::load_model(&ck)?;
            let image = harness::inspect::load_input(&input, index, &ck.meta.model, ck.meta.normalization.as_ref())?;
            let dump = inspect(&model, image, seed, &input, index)?;
            std::fs::write(&out, dump.to_json())?;
            println!("{} records -> {}", dump.records.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
