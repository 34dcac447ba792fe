use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fungnet::config::{load_config, ExperimentConfig};
use fungnet::dataset::Split;
use fungnet::pipeline::{self, SplitOptions};
use fungnet::training::EpochRecord;

#[derive(Parser, Debug)]
#[command(name = "fungnet", version, about = "Edible vs. poisonous mushroom image classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scan `<data-root>/{edible,poisonous}` and write a manifest.
    Ingest {
        #[arg(long)]
        data_root: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Assign train/val/test splits in a manifest (rewritten in place).
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Defaults to 20% of the corpus.
        #[arg(long)]
        test_count: Option<usize>,
        /// Defaults to 8.9% of the corpus.
        #[arg(long)]
        val_count: Option<usize>,
        /// Draw held-out sets from the pooled corpus instead of per class.
        #[arg(long)]
        unstratified: bool,
    },
    /// Train one model and save its best-epoch weights.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        init_weights: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a saved model on one split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
    },
    /// Classify one image.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Merge metrics files into one table.
    Report {
        #[arg(long, value_delimiter = ',', required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated training runs; writes the mean test metrics.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        init_weights: Option<PathBuf>,
    },
}

fn resolve_config(path: Option<&PathBuf>) -> anyhow::Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    log::info!("resolved config:\n{}", cfg.to_json());
    Ok(cfg)
}

fn print_epoch(prefix: &str, e: &EpochRecord) {
    println!(
        "{prefix}epoch {:>3}  train_loss {:.4}  val_loss {:.4}  val_acc {:.3}  ({:.1}s)",
        e.epoch, e.train_loss, e.val_loss, e.val_accuracy, e.seconds
    );
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest { data_root, manifest } => {
            let ingested = pipeline::ingest_corpus(&data_root, &manifest)?;
            for s in &ingested.skipped {
                log::warn!("skipped {}: {}", s.path.display(), s.reason);
            }
            let m = &ingested.manifest;
            let poisonous = m.records().iter().filter(|r| r.label == fungnet::dataset::Label::Poisonous).count();
            println!(
                "{} images ({} edible, {} poisonous), {} skipped -> {}",
                m.len(),
                m.len() - poisonous,
                poisonous,
                ingested.skipped.len(),
                manifest.display()
            );
        }
        Command::Split { manifest, seed, test_count, val_count, unstratified } => {
            let opts = SplitOptions { seed, test_count, val_count, stratified: !unstratified };
            let m = pipeline::split_manifest(&manifest, &opts)?;
            for split in [Split::Train, Split::Val, Split::Test] {
                let c = m.split_counts(split);
                println!("{split}: {} ({} edible, {} poisonous)", c.total(), c.edible, c.poisonous);
            }
        }
        Command::Train { config, manifest, out, init_weights, log } => {
            let cfg = resolve_config(config.as_ref())?;
            let record = pipeline::train_command(
                &cfg,
                &manifest,
                &out,
                init_weights.as_deref(),
                log.as_deref(),
                &mut |e| print_epoch("", e),
            )?;
            let best = record.best();
            println!(
                "stopped after epoch {}; best epoch {} (val_loss {:.4}) saved to {}",
                record.stop_epoch,
                record.best_epoch,
                best.val_loss,
                out.display()
            );
        }
        Command::Evaluate { model, manifest, split, out, batch_size } => {
            let r = pipeline::evaluate_command(&model, &manifest, split, &out, batch_size)?;
            println!(
                "{split} ({} images): accuracy {:.3}  auc {:.3}  precision {:.3}  recall {:.3}  f1 {:.3}",
                r.count, r.accuracy, r.auc, r.precision, r.recall, r.f1
            );
        }
        Command::Predict { model, image } => {
            let p = pipeline::predict_image(&model, &image)?;
            println!("{} {:.6}", p.label, p.poisonous_probability);
        }
        Command::Report { inputs, out } => {
            print!("{}", pipeline::report_command(&inputs, &out)?);
        }
        Command::Experiment { config, manifest, out, init_weights } => {
            let cfg = resolve_config(config.as_ref())?;
            let result = pipeline::experiment_command(&cfg, &manifest, &out, init_weights.as_deref(), &mut |c, r, e| {
                print_epoch(&format!("candidate {} repeat {r}  ", c + 1), e)
            })?;
            for (i, c) in result.candidates.iter().enumerate() {
                println!("candidate {}: mean val_acc {:.3}", i + 1, c.mean_val_accuracy);
            }
            let m = result.mean;
            println!(
                "selected candidate {}; mean test accuracy {:.3}  auc {:.3}  precision {:.3}  recall {:.3}  f1 {:.3}",
                result.selected + 1,
                m.accuracy,
                m.auc,
                m.precision,
                m.recall,
                m.f1
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
