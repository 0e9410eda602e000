use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use clickseg::checkpoint::{load_model, save_model};
use clickseg::dataset::{generate_shapes, load_manifest, write_dataset, ShapeConfig, TEST_SEED, TRAIN_SEED};
use clickseg::evaluation::{evaluate_noc, EvalConfig};
use clickseg::model::Model;
use clickseg::trainer::{format_log, train, EpochLog, TrainConfig};
use clickseg::Sample;

#[derive(Parser)]
#[command(name = "clickseg", version, about = "Interactive click segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train {
        /// `key = value` config file; defaults apply without one.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch TSV loss log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Dataset manifest. Without one, synthetic shapes are generated.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Synthetic training samples when no manifest is given.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
    /// Evaluate NoC/NoF and write a JSONL report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Synthetic test samples when no manifest is given.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 20)]
        max_clicks: usize,
        /// Comma-separated IoU targets.
        #[arg(long, default_value = "0.85,0.90", value_delimiter = ',')]
        targets: Vec<f64>,
        /// Report path; stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a synthetic dataset as PNGs plus a manifest.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Defaults to the training stream; pass `--split test` for held-out data.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "train", value_parser = ["train", "test"])]
        split: String,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

fn samples(data: Option<&Path>, seed: u64, n: usize, size: usize) -> Result<Vec<Sample>> {
    match data {
        Some(p) => load_manifest(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(generate_shapes(
            seed,
            n,
            &ShapeConfig {
                size,
                ..ShapeConfig::default()
            },
        )?),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            log,
            data,
            samples: n,
        } => {
            let cfg = match &config {
                Some(p) => TrainConfig::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
                None => TrainConfig::default(),
            };
            cfg.validate()?;
            let data = samples(data.as_deref(), TRAIN_SEED, n, cfg.model.input_size)?;
            eprintln!("training on {} samples for {} epochs", data.len(), cfg.epochs);
            let mut log_file = match &log {
                Some(p) => {
                    let mut f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
                    writeln!(f, "{}", EpochLog::HEADER)?;
                    Some(f)
                }
                None => None,
            };
            let mut io_err = None;
            let output = train::<f64>(&cfg, &data, |e| {
                eprintln!("epoch {} lr {:.1e} loss {:.4}", e.epoch, e.lr, e.loss);
                if let Some(f) = log_file.as_mut() {
                    if let Err(err) = writeln!(f, "{}", e.to_tsv()) {
                        io_err.get_or_insert(err);
                    }
                }
            })?;
            if let Some(err) = io_err {
                return Err(err).context("writing the loss log");
            }
            if log.is_none() {
                eprint!("{}", format_log(&output.log));
            }
            save_model(&output.model, &out)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            samples: n,
            max_clicks,
            targets,
            report,
        } => {
            let model: Model<f64> = load_model(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let data = samples(data.as_deref(), TEST_SEED, n, model.config().input_size)?;
            let cfg = EvalConfig { targets, max_clicks };
            let rep = evaluate_noc(&model, &data, &cfg, None)?;
            for s in &rep.summary {
                eprintln!("NoC@{:.0} {:.2}  NoF@{:.0} {}", s.target * 100.0, s.noc, s.target * 100.0, s.nof);
            }
            match &report {
                Some(p) => rep.write_jsonl(std::io::BufWriter::new(fs::File::create(p)?))?,
                None => rep.write_jsonl(std::io::stdout().lock())?,
            }
        }
        Command::Generate {
            out,
            n,
            seed,
            split,
            size,
        } => {
            if n == 0 {
                bail!("--n must be positive");
            }
            let seed = seed.unwrap_or(if split == "test" { TEST_SEED } else { TRAIN_SEED });
            let data = samples(None, seed, n, size)?;
            let manifest = write_dataset(&data, &out)?;
            eprintln!("wrote {n} samples, manifest {}", manifest.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
