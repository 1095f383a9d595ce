//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on invalid usage or input validation failure
//! (including a failing `check`), 2 on runtime errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vcmamba::harness::check::{format_matrix, run_checks};
use vcmamba::harness::{evaluate, gen_toy_dataset, train, DatasetConfig, TrainConfig};
use vcmamba::model::load_checkpoint;
use vcmamba::scan::{generate_path, GridShape, PathId};
use vcmamba::{Error, Model, ModelSpec};

#[derive(Parser)]
#[command(name = "vcmamba", version, about = "Hybrid CNN / multi-directional SSM vision backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-stage parameter table of a preset (S, M, B or Nano).
    Params { preset: String },
    /// Multiply-accumulate estimate of a preset at a square input resolution.
    Macs {
        preset: String,
        #[arg(long, default_value_t = 224)]
        resolution: usize,
    },
    /// Train as described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the toy dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Take the dataset settings from this training config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump a scan path as CSV: step,flat_index,row,col,direction.
    ScanDump {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        /// row-tl, row-br, col-tl or col-br
        #[arg(long)]
        path: String,
    },
    /// Run the invariant suite and print a pass/fail matrix.
    Check,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument { .. }
        | Error::InvalidSpec(_)
        | Error::Config { .. }
        | Error::ShapeMismatch { .. }
        | Error::EmptyDataset => 1,
        _ => 2,
    }
}

fn run(cmd: Command) -> Result<u8, Error> {
    match cmd {
        Command::Params { preset } => {
            let spec = ModelSpec::preset(&preset)?;
            let model = Model::<f32>::build(spec, 0)?;
            let r = model.count_params();
            println!("module,params");
            for (name, n) in &r.rows {
                println!("{name},{n}");
            }
            println!("total,{}", r.total);
            println!("running_stats,{}", r.running_stats);
            eprintln!("{preset}: {:.2}M parameters", r.total as f64 / 1e6);
        }
        Command::Macs { preset, resolution } => {
            let model = Model::<f32>::build(ModelSpec::preset(&preset)?, 0)?;
            let r = model.count_macs(resolution)?;
            println!("module,macs");
            for (name, n) in &r.rows {
                println!("{name},{n}");
            }
            println!("total,{}", r.total);
            eprintln!("{preset} @ {resolution}: {:.3} GMACs", r.total as f64 / 1e9);
        }
        Command::Train { config } => {
            let cfg = TrainConfig::load(&config)?;
            let report = train(&cfg)?;
            println!(
                "final eval: accuracy {:.4}, loss {:.4} over {} samples",
                report.final_eval.accuracy, report.final_eval.loss, report.final_eval.n_samples
            );
            println!("log: {}", cfg.log.display());
            println!("checkpoint: {}", cfg.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            config,
            samples,
            seed,
        } => {
            let model: Model<f32> = load_checkpoint(&checkpoint)?;
            let data = match config {
                Some(p) => TrainConfig::load(p)?.data,
                None => DatasetConfig {
                    seed,
                    n_samples: samples,
                    resolution: model.spec().input_resolution,
                },
            };
            let r = evaluate(&model, &gen_toy_dataset(&data)?)?;
            println!("accuracy,loss,samples");
            println!("{:.9},{:.9},{}", r.accuracy, r.loss, r.n_samples);
        }
        Command::ScanDump { height, width, path } => {
            let p = generate_path(GridShape::new(height, width)?, path.parse::<PathId>()?);
            println!("step,flat_index,row,col,direction");
            for (j, (&o, d)) in p.order.iter().zip(p.dirs.iter()).enumerate() {
                let (r, c) = p.grid.position(o);
                println!("{j},{o},{r},{c},{}", d.as_str());
            }
        }
        Command::Check => {
            let results = run_checks();
            print!("{}", format_matrix(&results));
            if results.iter().any(|r| !r.passed) {
                return Ok(1);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
