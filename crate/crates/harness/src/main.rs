use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gct_core::layers::Placement;
use gct_harness::commands::{self, AblationAxis, ProbeInput};
use gct_harness::config::{Overrides, RunConfig};
use gct_harness::error::{HarnessError, HarnessResult};
use gct_harness::train::run_train;

#[derive(Parser)]
#[command(name = "gct", version, about = "Gated channel transformation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct RunArgs {
    /// JSON run config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// none, before_conv, before_bn, after_bn or last_two_convs
    #[arg(long, value_parser = parse_placement)]
    placement: Option<Placement>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> HarnessResult<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            seed: self.seed,
            placement: self.placement,
            epochs: self.epochs,
            output_dir: self.output_dir.clone(),
        });
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write metrics.csv plus checkpoint.bin.
    Train(RunArgs),
    /// Evaluate a checkpoint on the validation split of a config.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference check of every layer's backward pass in f64.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the per-case report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true, default_value_t = 0.0)]
        corrupt: f64,
    },
    /// Train one run per variant along an axis and rank them.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// embedding, normalization, adaptation or position
        #[arg(long)]
        axis: AblationAxis,
    },
    /// Per-layer gamma statistics and variance ratios of a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Probe with validation images of this config instead of random noise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Parameter and multiply-add counts for a spec file or built-in network.
    CountCost {
        #[arg(long)]
        spec: String,
        /// N,C,H,W
        #[arg(long)]
        input_shape: Option<String>,
        #[arg(long, value_parser = parse_placement)]
        placement: Option<Placement>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Eval-mode forward timing on random input.
    Time {
        #[arg(long)]
        spec: String,
        #[arg(long, value_parser = parse_placement)]
        placement: Option<Placement>,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        iterations: usize,
    },
}

fn parse_placement(s: &str) -> Result<Placement, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown placement `{s}`"))
}

fn run(cli: Cli) -> HarnessResult<()> {
    match cli.command {
        Command::Train(args) => {
            let out = run_train(&args.load()?)?;
            match out.metrics.last() {
                Some(m) => println!(
                    "epochs {} steps {} val_loss {:.4} val_acc {:.4}",
                    out.metrics.len(),
                    out.steps,
                    m.val_loss,
                    m.val_acc
                ),
                None => println!("no epochs run"),
            }
            println!("metrics {}", out.metrics_path.display());
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::Evaluate { checkpoint, config } => {
            let cfg = RunConfig::load(&config)?;
            let e = commands::cmd_evaluate(&checkpoint, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&e).expect("serializable"));
        }
        Command::Gradcheck {
            instances,
            seed,
            out,
            corrupt,
        } => {
            let report = commands::cmd_gradcheck(instances, seed, corrupt)?;
            print!("{}", report.table());
            if let Some(path) = out {
                std::fs::write(path, serde_json::to_string_pretty(&report).expect("serializable"))?;
            }
            let failed = report.cases.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(HarnessError::Numeric(format!(
                    "{failed} of {} cases exceed relative error {:e}",
                    report.cases.len(),
                    report.tolerance
                )));
            }
            println!("all {} cases pass", report.cases.len());
        }
        Command::Ablate { run, axis } => {
            let rows = commands::cmd_ablate(&run.load()?, axis)?;
            print!("{}", commands::ablation_csv(&rows));
        }
        Command::Analyze {
            checkpoint,
            config,
            batch,
            seed,
            out,
        } => {
            let probe = match config {
                Some(p) => ProbeInput::Validation {
                    config: Box::new(RunConfig::load(&p)?),
                    batch,
                },
                None => ProbeInput::Random { batch, seed },
            };
            let out = commands::cmd_analyze(&checkpoint, &probe, &out)?;
            for r in &out.records {
                let ratio = r.variance_ratio.map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into());
                println!(
                    "{:<24} gamma mean {:>9.5} std {:>9.5}  variance ratio {ratio}",
                    r.layer_name, r.gamma_mean, r.gamma_std
                );
            }
            println!("wrote {} and {}", out.analysis_path.display(), out.histogram_path.display());
        }
        Command::CountCost {
            spec,
            input_shape,
            placement,
            out,
        } => {
            let spec = commands::load_spec(&spec)?;
            let shape = input_shape.as_deref().map(commands::parse_input_shape).transpose()?;
            let json = commands::cmd_count_cost(&spec, shape, placement)?.to_json();
            match out {
                Some(p) => std::fs::write(p, json)?,
                None => println!("{json}"),
            }
        }
        Command::Time {
            spec,
            placement,
            batch,
            iterations,
        } => {
            let mut spec = commands::load_spec(&spec)?;
            if let Some(p) = placement {
                spec.placement = p;
            }
            let t = commands::cmd_time(&spec, batch, iterations)?;
            println!("{}", serde_json::to_string_pretty(&t).expect("serializable"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
