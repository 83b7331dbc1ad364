//! Experiment orchestration: the TOML config, binary checkpoints, the run
//! directory with one subdirectory per stage, and the `sevcon` command line.
//!
//! Every stage is also a method on [`Run`], so a pipeline can be driven from
//! code exactly as the subcommands drive it.

mod checkpoint;
mod config;
mod run;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use checkpoint::{
    autoencoder_checkpoint, backbone_checkpoint, classifier_checkpoint, load_autoencoder, load_backbone,
    load_classifier, load_probe, probe_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{AugmentConfig, BaselineConfig, DataConfig, ExperimentConfig, LabelConfig, ModelConfig, RunConfig};
pub use run::{
    all_tasks, parse_task, read_score_csv, task_name, write_score_csv, GradconCheck, Method, PretrainMode, Run,
    ScorerKind, StageRecord,
};

use crate::error::Result;
use crate::evalprobe::table_row;

#[derive(Debug, Parser)]
#[command(name = "sevcon", version, about = "Severity pseudo-labels and contrastive pretraining, one stage at a time")]
pub struct Cli {
    /// Run directory holding every stage's artifacts.
    #[arg(long, global = true, default_value = "run")]
    pub run: PathBuf,
    /// Experiment config (TOML). Defaults to <run>/config.toml, then to the
    /// built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Accept upstream artifacts produced under a different config hash.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpora into <run>/data.
    GenData,
    /// Train the gradient-constrained autoencoder on healthy images.
    TrainGradcon,
    /// Score the unlabeled corpus.
    Score {
        #[arg(long, value_enum)]
        scorer: ScorerKind,
    },
    /// Bin scores into severity labels.
    MakeLabels {
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long, value_enum, default_value = "severity")]
        scorer: ScorerKind,
    },
    /// Pretrain a backbone (or keep its random initialization).
    Pretrain {
        #[arg(long, value_enum)]
        mode: PretrainMode,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long, value_enum, default_value = "severity")]
        scorer: ScorerKind,
    },
    /// Train one linear probe on a frozen backbone.
    Probe {
        /// bio_a..bio_e or multilabel
        #[arg(long)]
        task: String,
        /// random, simclr or <scorer>_n<bins>; defaults to severity at the
        /// configured bin count.
        #[arg(long)]
        method: Option<String>,
    },
    /// Evaluate a method's probes on the test sets.
    Evaluate {
        #[arg(long)]
        method: Option<String>,
    },
    /// Compare scorers at one bin count.
    Ablate {
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Render the tables, the extreme-bin sheet and the provenance record.
    Report,
    /// Run every stage in order.
    All,
}

impl Cli {
    pub fn open_run(&self) -> Result<Run> {
        let config = self.config.as_deref().map(ExperimentConfig::load).transpose()?;
        Run::open(&self.run, config, self.force)
    }
}

fn method_arg(run: &Run, method: &Option<String>) -> Result<Method> {
    match method {
        Some(m) => m.parse(),
        None => Ok(Method::Severity {
            scorer: ScorerKind::Severity,
            n_bins: run.config().labels.n_bins,
        }),
    }
}

/// Executes one parsed command and prints a short summary.
pub fn execute(cli: &Cli) -> Result<()> {
    let run = cli.open_run()?;
    let n_bins = |bins: Option<usize>| bins.unwrap_or(run.config().labels.n_bins);
    match &cli.command {
        Command::GenData => {
            run.gen_data()?;
            println!("wrote {}", run.path("data").display());
        }
        Command::TrainGradcon => {
            let out = run.train_gradcon()?;
            if let Some(last) = out.log.last() {
                println!(
                    "{} iterations, final recon {:.5}, alignment {:.4}",
                    out.iterations, last.mean_recon, last.mean_grad_alignment
                );
            }
        }
        Command::Score { scorer } => {
            let s = run.score(*scorer)?;
            println!("scored {} images with {}", s.len(), scorer.name());
        }
        Command::MakeLabels { bins, scorer } => {
            let labels = run.make_labels(n_bins(*bins), *scorer)?;
            println!("labeled {} images into {} bins", labels.len(), n_bins(*bins));
        }
        Command::Pretrain { mode, bins, scorer } => {
            let method = match mode {
                PretrainMode::Random => Method::Random,
                PretrainMode::Simclr => Method::SimClr,
                PretrainMode::Severity => Method::Severity {
                    scorer: *scorer,
                    n_bins: n_bins(*bins),
                },
            };
            let curve = run.pretrain(method)?;
            match curve.last() {
                Some(l) => println!("{method}: {} epochs, final loss {l:.4}", curve.len()),
                None => println!("{method}: initial weights saved"),
            }
        }
        Command::Probe { task, method } => {
            let method = method_arg(&run, method)?;
            run.probe(parse_task(task)?, method)?;
            println!("trained {task} probe on {method}");
        }
        Command::Evaluate { method } => {
            let result = run.evaluate(method_arg(&run, method)?)?;
            println!("{}", table_row(&result)?);
        }
        Command::Ablate { bins } => {
            for row in run.ablate(n_bins(*bins))? {
                println!("{},{},{:.4}", row.scorer, row.n_bins, row.mean_auc);
            }
        }
        Command::Report => {
            run.report()?;
            let table = std::fs::read_to_string(run.path("report").join("table1.csv"))?;
            print!("{table}");
        }
        Command::All => {
            run.run_all()?;
            let table = std::fs::read_to_string(run.path("report").join("table1.csv"))?;
            print!("{table}");
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 success, 2 config or usage error, 3 missing artifact, 4 numerical
/// failure, 1 anything else.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
