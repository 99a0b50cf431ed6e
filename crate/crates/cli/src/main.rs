//! Command-line harness for the segmentation stack.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime/numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use uctransnet::config::ExperimentSpec;
use uctransnet::error::{Error, Result};
use uctransnet::experiments;

#[derive(Parser)]
#[command(name = "uctransnet", version, about = "U-Net with channel-wise cross-attention skip connections: training, ablations and diagnostics")]
struct Cli {
    /// Force sequential execution even when built with the parallel feature.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SpecArgs {
    /// Spec file with line-oriented `key = value` assignments, `#` comments.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override any spec key, repeatable: --set seed=7 --set mode=plain
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Shorthand for --set seed=N
    #[arg(long)]
    seed: Option<u64>,

    /// Shorthand for --set iterations=N
    #[arg(long)]
    iterations: Option<usize>,

    /// Shorthand for --set out_dir=DIR
    #[arg(long)]
    out: Option<PathBuf>,
}

impl SpecArgs {
    fn build(&self, base: ExperimentSpec) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::from_file(path)?,
            None => base,
        };
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{pair}'")))?;
            spec.apply(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            spec.train.seed = seed;
        }
        if let Some(iters) = self.iterations {
            spec.train.max_iterations = iters;
        }
        if let Some(out) = &self.out {
            spec.out_dir = out.clone();
        }
        Ok(spec)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train per spec; writes loss.csv, report.csv, metrics.csv and model.uctn.
    Train(SpecArgs),
    /// Evaluate a checkpoint against a dataset; writes eval_report.csv.
    Eval {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the ten canonical skip wirings (all/none/L_i/without-L_i).
    AblateSkip(SpecArgs),
    /// Sweep query/key level subsets with the transformer skip route.
    AblateQk(SpecArgs),
    /// Finite-difference check of full-model gradients (always f64).
    Gradcheck {
        #[command(flatten)]
        spec: SpecArgs,
        /// Minimum number of sampled parameter coordinates.
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
    /// Export averaged attention matrices and CCA masks as CSV.
    ExportAttn {
        #[command(flatten)]
        spec: SpecArgs,
        /// Checkpoint to load; fresh seed-pinned weights when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write a synthetic blob corpus as paired PGM files.
    GenData {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        dir: PathBuf,
    },
}

/// Miniature defaults for `gradcheck` when no spec file is given: small
/// enough to difference a few hundred coordinates in seconds.
fn gradcheck_base() -> ExperimentSpec {
    let mut spec = ExperimentSpec::default();
    spec.model.base_channels = 4;
    spec.model.heads = 2;
    spec.model.cct_layers = 2;
    spec.image_size = 16;
    spec
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(args) => {
            let spec = args.build(ExperimentSpec::default())?;
            let out = experiments::run_single(&spec)?;
            println!("trained {} scalar parameters for {} iterations (seed {})", out.total_params, out.row.iterations, out.row.seed);
            println!("train dice {:.4}; held-out metrics:", out.train_dice);
            println!("{}", out.report.pretty());
            if let Some(matched) = out.pretrain_matched {
                println!("pretrained transfer: {matched} tensors matched");
            }
            println!("artifacts in {}", spec.out_dir.display());
        }
        Command::Eval { spec, checkpoint } => {
            let spec = spec.build(ExperimentSpec::default())?;
            let report = experiments::run_eval(&spec, checkpoint)?;
            println!("{}", report.pretty());
            println!("written to {}", spec.out_dir.join("eval_report.csv").display());
        }
        Command::AblateSkip(args) => {
            let spec = args.build(ExperimentSpec::default())?;
            let rows = experiments::run_skip_ablation(&spec)?;
            println!("{:<8} {:>8} {:>8}", "config", "dice", "iou");
            for r in &rows {
                println!("{:<8} {:>8.4} {:>8.4}", r.label, r.dice, r.iou);
            }
            println!("table in {}", spec.out_dir.join("skip_ablation.csv").display());
        }
        Command::AblateQk(args) => {
            let spec = args.build(ExperimentSpec::default())?;
            let rows = experiments::run_qk_ablation(&spec)?;
            println!("{:<8} {:>8} {:>8}", "config", "dice", "iou");
            for r in &rows {
                println!("{:<8} {:>8.4} {:>8.4}", r.label, r.dice, r.iou);
            }
            println!("table in {}", spec.out_dir.join("qk_ablation.csv").display());
        }
        Command::Gradcheck { spec, samples } => {
            let spec = spec.build(gradcheck_base())?;
            let report = experiments::run_gradcheck(&spec, *samples, None)?;
            print!("{}", report.pretty());
            if !report.passed() {
                return Err(Error::NonFinite {
                    context: format!(
                        "gradient check failed on {} coordinates (max rel error {:.3e})",
                        report.failures.len(),
                        report.max_rel_error
                    ),
                });
            }
        }
        Command::ExportAttn { spec, checkpoint } => {
            let spec = spec.build(ExperimentSpec::default())?;
            let export = experiments::export_attention(&spec, checkpoint.as_deref())?;
            println!(
                "exported {} per-level matrices, {} raw similarity maps, {} mask sets to {}",
                export.per_level.len(),
                export.raw.len(),
                export.masks.len(),
                spec.out_dir.display()
            );
        }
        Command::GenData { spec, dir } => {
            let spec = spec.build(ExperimentSpec::default())?;
            let n = experiments::run_gen_data(&spec, dir)?;
            println!("wrote {n} samples to {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.sequential {
        uctransnet::par::set_parallel(false);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
