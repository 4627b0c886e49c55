use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use diffattn::commands::{
    cmd_eval_needle, cmd_eval_vqa, cmd_gradcheck, cmd_inspect, cmd_train, EvalNeedleArgs, EvalVqaArgs,
    GradCheckArgs, ResponderKind, TrainArgs, DEFAULT_MAX_NEW,
};
use diffattn::error::exit;
use diffattn::par::{init_threads, Exec};
use diffattn::tape::OpKind;
use diffattn::Result;

/// Differential-attention toy VLM: training, evaluation and diagnostics.
///
/// Exit codes: 0 success, 1 failure (including failed gradient checks),
/// 2 configuration error, 3 non-finite numerics, 4 corrupt artifact.
#[derive(Parser, Debug)]
#[command(name = "diffattn", version)]
struct Cli {
    /// Worker threads; overrides DIFFATTN_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fine-tune a toy model on a VQA-format dataset.
    Train {
        /// Flat `key = value` config file.
        config: Option<PathBuf>,
        /// `key=value` override; repeatable, wins over the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print tensors, λ per layer, adapters and parameter census of a checkpoint.
    Inspect { checkpoint: PathBuf },
    /// Finite-difference check of every parameter group of a toy model.
    Gradcheck {
        /// Config whose `model.*` keys set the checked sizes.
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Check every coordinate instead of a sampled subset.
        #[arg(long)]
        full: bool,
        /// Corrupt the backward rule of one operation (harness self-test).
        #[arg(long, value_name = "OP")]
        inject_fault: Option<OpKind>,
    },
    /// Score a checkpoint on a VQA-format dataset.
    EvalVqa {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_NEW)]
        max_new: usize,
    },
    /// Needle-in-a-haystack grid probe.
    EvalNeedle {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 2)]
        grid: usize,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// model, oracle, inverted or random.
        #[arg(long, default_value = "model")]
        responder: ResponderKind,
        #[arg(long, default_value_t = DEFAULT_MAX_NEW)]
        max_new: usize,
    },
}

fn run(cli: Cli) -> Result<i32> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        init_threads(cli.threads);
        Exec::default()
    };
    match cli.command {
        Command::Train {
            config,
            set,
            seed,
            out_dir,
        } => {
            let out = cmd_train(
                &TrainArgs {
                    config,
                    overrides: set,
                    seed,
                    out_dir,
                },
                exec,
            )?;
            println!(
                "trained {} steps, final loss {:.6}",
                out.report.steps,
                out.final_loss().unwrap_or(f64::NAN)
            );
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::Inspect { checkpoint } => print!("{}", cmd_inspect(&checkpoint)?),
        Command::Gradcheck {
            config,
            seed,
            full,
            inject_fault,
        } => {
            let summary = cmd_gradcheck(
                &GradCheckArgs {
                    config,
                    seed,
                    full,
                    inject_fault,
                },
                exec,
            )?;
            print!("{}", summary.text);
            if !summary.passed {
                return Ok(exit::FAILURE);
            }
        }
        Command::EvalVqa {
            model,
            data,
            limit,
            out,
            max_new,
        } => {
            let report = cmd_eval_vqa(
                &EvalVqaArgs {
                    model,
                    data,
                    limit,
                    out,
                    max_new,
                },
                exec,
            )?;
            if report.flagged() > 0 {
                eprintln!("{} records flagged and scored 0", report.flagged());
            }
            println!("{}", report.aggregate_display());
        }
        Command::EvalNeedle {
            model,
            manifest,
            grid,
            samples,
            seed,
            out_dir,
            responder,
            max_new,
        } => {
            let report = cmd_eval_needle(
                &EvalNeedleArgs {
                    model,
                    manifest,
                    grid,
                    samples,
                    seed,
                    out_dir,
                    responder,
                    max_new,
                },
                exec,
            )?;
            let s = report.cells.summary();
            println!(
                "index accuracy {:.2}% ({}/{} trials, {} skipped)",
                s.index_accuracy_pct, s.correct, s.trials, s.skipped
            );
        }
    }
    Ok(exit::OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
