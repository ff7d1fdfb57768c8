//! `als`: data generation, labeling, training, evaluation and reporting for
//! the adaptive label smoothing experiment.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use als_core::config::ExperimentConfig;
use als_core::io;
use als_core::labeling::{LabelingPolicy, PolicyMode};
use als_core::pipeline::{self, TransformSpec};
use als_core::Error;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "als",
    version,
    about = "Objectness-adaptive label smoothing experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config-level overrides shared by several subcommands.
#[derive(clap::Args, Default)]
struct Overrides {
    /// Experiment config (TOML). Missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; every random stream is derived from it.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset directory.
    GenData {
        #[command(flatten)]
        common: Overrides,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-sample objectness and target vectors for an annotation file.
    Label {
        /// Annotation JSON lines.
        #[arg(long)]
        annotations: PathBuf,
        /// identity, center:<fraction> or crop:x,y,w,h[,flip]
        #[arg(long, default_value = "identity")]
        transform: String,
        #[arg(long, default_value = "adaptive:1.0")]
        policy: String,
        #[arg(long, default_value_t = 10)]
        num_classes: usize,
        /// Write `y:<p>` and `rest:<p>` instead of all K entries.
        #[arg(long)]
        sparse: bool,
        /// Output CSV; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one labeling policy on a generated dataset.
    Train {
        #[command(flatten)]
        common: Overrides,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// hard, uniform:<alpha> or adaptive:<beta>
        #[arg(long)]
        policy: String,
        #[arg(long)]
        context_fraction: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Run directory for the checkpoint and epoch log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the object or context-only validation set.
    Eval {
        #[command(flatten)]
        common: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalSetKind::Object)]
        set: EvalSetKind,
        /// Comma-separated bin counts; the first also drives MCE and the bins file.
        #[arg(long, value_delimiter = ',')]
        bins: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute the report and reliability bins from a predictions CSV.
    Report {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "100,15")]
        bins: Vec<usize>,
        /// Print bootstrap mean and standard deviation of ECE over this many resamples.
        #[arg(long)]
        bootstrap: Option<usize>,
        #[arg(long, default_value_t = 0)]
        bootstrap_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare trained policies on the object and context-only sets.
    ContextExperiment {
        #[command(flatten)]
        common: Overrides,
        #[arg(long)]
        data: PathBuf,
        /// Directory holding one run directory per policy.
        #[arg(long)]
        runs: PathBuf,
        /// Defaults to the policies listed in the config.
        #[arg(long, value_delimiter = ',')]
        policies: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate data, train every configured policy and write the comparison.
    Run {
        #[command(flatten)]
        common: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalSetKind {
    Object,
    Context,
}

/// Base config from `--config`, else the dataset manifest, else defaults,
/// then flag overrides.
fn load_config(common: &Overrides, data: Option<&Path>) -> als_core::Result<ExperimentConfig> {
    let mut cfg = match (&common.config, data) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(dir)) => pipeline::load_manifest(dir)?.config,
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn parse_policy(s: &str) -> als_core::Result<PolicyMode> {
    s.parse().map_err(|e: Error| Error::Config(e.to_string()))
}

fn print_row(row: &pipeline::ComparisonRow) {
    println!(
        "{:<14} ctx acc {:.4} a.conf {:.4} u.conf {:.4} | obj acc {:.4} a.conf {:.4} mean dev {}",
        row.policy,
        row.context.accuracy,
        row.context.avg_confidence,
        row.context.underconfidence.value,
        row.object.accuracy,
        row.object.avg_confidence,
        row.object
            .mean_deviation
            .map_or("-".to_string(), |v| format!("{v:.4}")),
    );
}

fn run(cli: Cli) -> als_core::Result<()> {
    match cli.command {
        Command::GenData {
            common,
            n_train,
            n_val,
            out,
        } => {
            let mut cfg = load_config(&common, None)?;
            cfg.n_train = n_train.unwrap_or(cfg.n_train);
            cfg.n_val = n_val.unwrap_or(cfg.n_val);
            let m = pipeline::gen_data(&cfg, &out)?;
            println!(
                "wrote {} train and {} val samples to {} (mean pixel {})",
                m.n_train,
                m.n_val,
                out.display(),
                m.mean_pixel
            );
        }
        Command::Label {
            annotations,
            transform,
            policy,
            num_classes,
            sparse,
            out,
        } => {
            let transform: TransformSpec = transform.parse()?;
            let policy = LabelingPolicy::new(policy.parse()?, num_classes)?;
            let anns = io::read_annotations(&annotations)?;
            let rows = pipeline::label_annotations(&anns, &transform, &policy)?;
            let bytes = pipeline::label_csv(&rows, num_classes, sparse)?;
            match out {
                Some(path) => io::write_atomic(&path, &bytes)?,
                None => {
                    use std::io::Write;
                    std::io::stdout().write_all(&bytes).map_err(|e| Error::Io {
                        path: "<stdout>".into(),
                        source: e,
                    })?;
                }
            }
        }
        Command::Train {
            common,
            data,
            policy,
            context_fraction,
            epochs,
            out,
        } => {
            let mut cfg = load_config(&common, Some(&data))?;
            if let Some(f) = context_fraction {
                cfg.sampler.context_fraction = f;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            let mode = parse_policy(&policy)?;
            let loaded = pipeline::load_data(&data)?;
            let (_, meta) = pipeline::train_policy(&cfg, &loaded, &mode, &out)?;
            println!(
                "trained {} for {} epochs: final loss {:.4}, val acc {}; first batch {}",
                meta.policy,
                meta.epochs,
                meta.final_train_loss,
                meta.final_val_acc.map_or("-".into(), |v| format!("{v:.4}")),
                meta.first_batch_hash
            );
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            set,
            bins,
            out,
        } => {
            let cfg = load_config(&common, Some(&data))?;
            cfg.validate()?;
            let bins = bins.unwrap_or_else(|| cfg.bins.clone());
            let state = io::load_checkpoint(&checkpoint)?;
            let loaded = pipeline::load_data(&data)?;
            let (object, context) = loaded.eval_sets(&cfg)?;
            let set = match set {
                EvalSetKind::Object => object,
                EvalSetKind::Context => context,
            };
            let rep = pipeline::evaluate(&state, &set, &bins, &out)?;
            println!(
                "{}: n {} acc {:.4} ece {:.4} a.conf {:.4}",
                set.name,
                rep.n,
                rep.accuracy,
                rep.ece.first().map_or(0.0, |e| e.1),
                rep.avg_confidence
            );
        }
        Command::Report {
            predictions,
            bins,
            bootstrap,
            bootstrap_seed,
            out,
        } => {
            let rep = pipeline::report_from_predictions(&predictions, &bins, &out)?;
            println!(
                "n {} acc {:.4} ece {:.4} mce {:.4}",
                rep.n,
                rep.accuracy,
                rep.ece.first().map_or(0.0, |e| e.1),
                rep.mce
            );
            if let Some(n) = bootstrap {
                let (_, records) = io::read_predictions_csv(&predictions)?;
                let (mean, std) =
                    als_core::calibration::bootstrap_ece(&records, bins[0], n, bootstrap_seed)?;
                println!("bootstrap ece ({n} resamples): {mean:.6} +- {std:.6}");
            }
        }
        Command::ContextExperiment {
            common,
            data,
            runs,
            policies,
            out,
        } => {
            let cfg = load_config(&common, Some(&data))?;
            cfg.validate()?;
            let modes = match policies {
                Some(list) => list
                    .iter()
                    .map(|p| parse_policy(p))
                    .collect::<Result<Vec<_>, _>>()?,
                None => cfg.policy_modes()?,
            };
            let loaded = pipeline::load_data(&data)?;
            for row in pipeline::context_experiment(&cfg, &loaded, &runs, &modes, &out)? {
                print_row(&row);
            }
        }
        Command::Run { common, out } => {
            let cfg = load_config(&common, None)?;
            for row in pipeline::run_experiment(&cfg, &out)? {
                print_row(&row);
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Numeric(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match std::env::var("ALS_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                eprintln!("error: ALS_THREADS must be a positive integer, got `{v}`");
                return ExitCode::from(2);
            }
        },
        Err(_) => 1,
    };
    let result = pipeline::configure_threads(threads).and_then(|_| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
