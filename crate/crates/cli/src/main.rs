use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sgg_balance::eval::MetricsReport;
use sgg_balance::pipeline::{files, Ablation, Pipeline, PipelineConfig};
use sgg_balance::{Error, Result};

/// Balanced predicate learning with semantic adjustment.
#[derive(Parser, Debug)]
#[command(name = "sgg-balance", version)]
struct Cli {
    /// Pipeline config (JSON). Defaults to the reference synthetic setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset, oracle and corpus counts.
    Synth,
    /// Train the stage-1 model on the full training split.
    TrainSource,
    /// Build the confusion, normalized and transition matrices.
    BuildTransition,
    /// Build the undersampled target domain.
    BuildTarget,
    /// Fine-tune the stage-1 model on the target domain.
    Finetune,
    /// Evaluate a checkpoint on the test split.
    Eval {
        /// Defaults to `stage2.json` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `transition.json` when SA is enabled.
        #[arg(long, conflicts_with = "no_transition")]
        transition: Option<PathBuf>,
        /// Score without any transition.
        #[arg(long)]
        no_transition: bool,
        #[arg(long, default_value = "eval")]
        label: String,
    },
    /// Run a named sweep: alpha, transition-variant, strategy,
    /// training-approach or ic-source.
    Ablate {
        which: String,
        /// Reuse stage outputs already in the output directory.
        #[arg(long)]
        skip_prepare: bool,
    },
    /// Run every stage and write the baseline / BPL / BPL+SA comparison.
    Report,
}

fn print_rows(rows: &[MetricsReport]) {
    if let Some(first) = rows.first() {
        println!("{}", first.summary_header().join(","));
    }
    for r in rows {
        println!("{}", r.summary_row().join(","));
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::reference(0),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let pipeline = Pipeline::new(cfg, cli.out)?;
    let out = pipeline.out_dir().display().to_string();
    match cli.command {
        Command::Synth => {
            let stats = pipeline.synth()?;
            println!(
                "wrote synthetic data to {out} (relabel rate {:.4}, fitted zipf {:.4})",
                stats.observed_relabel_rate, stats.fitted_zipf_exponent
            );
        }
        Command::TrainSource => {
            let outcome = pipeline.train_source()?;
            let last = outcome.loss_history.last().copied().unwrap_or(f64::NAN);
            println!("wrote {out}/{} (final loss {last:.6})", files::STAGE1);
        }
        Command::BuildTransition => {
            let t = pipeline.build_transition()?;
            println!("wrote {out}/{} (alpha {}, checksum {})", files::TRANSITION, t.alpha(), t.checksum());
        }
        Command::BuildTarget => {
            let audit = pipeline.build_target()?;
            let kept: u64 = audit.kept.iter().map(|k| k.kept).sum();
            println!(
                "wrote {out}/{} ({kept} triplets; common: {})",
                files::TARGET,
                audit.common.join(", ")
            );
        }
        Command::Finetune => {
            let outcome = pipeline.finetune()?;
            let last = outcome.loss_history.last().copied().unwrap_or(f64::NAN);
            println!("wrote {out}/{} (final loss {last:.6})", files::STAGE2);
        }
        Command::Eval {
            checkpoint,
            transition,
            no_transition,
            label,
        } => {
            if label.is_empty() || label.contains(['/', '\\']) {
                return Err(Error::Config(format!("invalid label {label:?}")));
            }
            let checkpoint = checkpoint.unwrap_or_else(|| pipeline.path(files::STAGE2));
            let transition = match (transition, no_transition) {
                (Some(t), _) => Some(t),
                (None, true) => None,
                (None, false) => pipeline.config().sa.enabled.then(|| pipeline.path(files::TRANSITION)),
            };
            let report = pipeline.eval(&checkpoint, transition.as_deref(), &label)?;
            print_rows(&[report]);
        }
        Command::Ablate { which, skip_prepare } => {
            let which: Ablation = which.parse()?;
            let table = pipeline.ablate(which, !skip_prepare)?;
            print_rows(&table.rows);
        }
        Command::Report => {
            let report = pipeline.report()?;
            print_rows(&report.rows);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
