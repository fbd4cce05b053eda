use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use relpos::corpus::SyntheticSpec;
use relpos::eval::{self, ProbeKind};
use relpos::model::TransformerModel;
use relpos::objectives::{Objective, ReadoutKind, Task};
use relpos::trainer::{self, checkpoint, split_eval, TrainConfig};

#[derive(Parser)]
#[command(name = "relpos", version, about = "Relative-position pretraining for transformer encoders")]
struct Cli {
    /// Run every data-parallel kernel on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

impl Preset {
    fn config(self) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::desk(),
            Preset::Paper => TrainConfig::paper(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Relpos,
    Density,
    Flops,
    Probe,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a model and write metrics, checkpoints and a summary.
    Train {
        /// JSON file with TrainConfig fields; overrides the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long, value_enum)]
        objective: Option<Objective>,
        #[arg(long)]
        corruption_rate: Option<f64>,
        /// Relative-position readout: one affine layer or a width-64 MLP.
        #[arg(long, value_enum)]
        readout: Option<ReadoutKind>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        /// Directory for metrics.csv, checkpoints and summary.json.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Plain-text corpus files (one document per line).
        #[arg(long = "corpus", num_args = 1..)]
        corpus: Vec<PathBuf>,
        /// Zero the timing column so metrics files are reproducible.
        #[arg(long)]
        deterministic: bool,
        /// Print the resolved config and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Report accuracy, label density, head FLOPs or probe results as JSON.
    Eval {
        #[arg(long, value_enum)]
        metric: Metric,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sequence length for density; defaults to 128.
        #[arg(long)]
        seq_len: Option<usize>,
        /// Preset for flops when no checkpoint is given.
        #[arg(long, value_enum, default_value = "paper")]
        preset: Preset,
        #[arg(long, value_enum, default_value = "marker-order")]
        probe: ProbeKind,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 5e-4)]
        learning_rate: f64,
        #[arg(long, default_value_t = 1500)]
        train_examples: usize,
        #[arg(long, default_value_t = 600)]
        test_examples: usize,
        /// Also fine-tune a randomly initialized model on each probe seed.
        #[arg(long)]
        baseline: bool,
    },
    /// Write a synthetic corpus to a text file.
    GenCorpus {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 512)]
        vocab_size: usize,
        #[arg(long, default_value_t = 200_000)]
        num_tokens: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    relpos::exec::set_sequential(cli.sequential);
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = e.source();
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn print(v: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&v).expect("json"));
}

fn dispatch(cmd: Command) -> AnyResult<()> {
    match cmd {
        Command::Train {
            config,
            preset,
            objective,
            corruption_rate,
            readout,
            seed,
            steps,
            output,
            resume,
            corpus,
            deterministic,
            dry_run,
        } => {
            let mut cfg = match config {
                Some(path) => serde_json::from_str(&std::fs::read_to_string(&path)?)
                    .map_err(|e| format!("{}: {e}", path.display()))?,
                None => preset.config(),
            };
            if let Some(o) = objective {
                cfg = cfg.with_objective(o);
            }
            if let Some(r) = corruption_rate {
                cfg.corruption_rate = r;
            }
            if let Some(r) = readout {
                cfg.readout = r;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.total_steps = s;
            }
            if output.is_some() {
                cfg.output_dir = output;
            }
            if !corpus.is_empty() {
                cfg.corpus_paths = corpus;
                cfg.synthetic = None;
            }
            cfg.deterministic |= deterministic;
            cfg.validate()?;
            if dry_run {
                print(serde_json::to_value(&cfg)?);
                return Ok(());
            }
            if cfg.output_dir.is_none() {
                log::warn!("no --output given; only the summary is printed");
            }
            let out = trainer::run_from(cfg, resume.as_deref())?;
            print(serde_json::to_value(&out.summary)?);
            Ok(())
        }
        Command::Eval {
            metric,
            checkpoint: ckpt_path,
            seq_len,
            preset,
            probe,
            seeds,
            epochs,
            learning_rate,
            train_examples,
            test_examples,
            baseline,
        } => match metric {
            Metric::Density => {
                print(serde_json::to_value(eval::density_report(seq_len.unwrap_or(128)))?);
                Ok(())
            }
            Metric::Flops => {
                let cfg = match &ckpt_path {
                    Some(p) => checkpoint::read_manifest(p)?.config,
                    None => preset.config(),
                };
                let k = seq_len.unwrap_or(cfg.seq_len);
                print(serde_json::to_value(eval::cost_report(&cfg.model, k, cfg.batch_size, cfg.readout))?);
                Ok(())
            }
            Metric::Relpos => {
                let path = ckpt_path.ok_or("relpos needs --checkpoint")?;
                let ckpt = checkpoint::load::<f32>(&path)?;
                let mut cfg = ckpt.config.clone();
                let corpus = cfg.load_corpus()?;
                let (_, held) = split_eval(&corpus.sequences, &cfg);
                let model = TransformerModel::bind(cfg.model.clone(), &ckpt.params)?;
                let task = Task::bind(cfg.objective, cfg.corruption_rate, cfg.readout, &model, &ckpt.params)?;
                let acc = eval::relpos_accuracy(&ckpt.params, &model, &task, &held)?;
                print(json!({
                    "objective": cfg.objective,
                    "step": ckpt.step,
                    "eval_batches": held.len(),
                    "relpos_accuracy": acc,
                }));
                Ok(())
            }
            Metric::Probe => {
                let path = ckpt_path.ok_or("probe needs --checkpoint")?;
                let ckpt = checkpoint::load::<f32>(&path)?;
                let mut cfg = ckpt.config.clone();
                let corpus = cfg.load_corpus()?;
                let setup = eval::PairedProbe {
                    kind: probe,
                    seeds: (0..seeds).collect(),
                    epochs,
                    learning_rate,
                    n_train: train_examples,
                    n_test: test_examples,
                    ..eval::PairedProbe::desk(probe)
                };
                let report = if baseline {
                    setup.compare(&ckpt.params, &cfg.model, &corpus.sequences)?
                } else {
                    setup.run_only(&ckpt.params, &cfg.model, &corpus.sequences)?
                };
                print(serde_json::to_value(report)?);
                Ok(())
            }
        },
        Command::GenCorpus {
            output,
            vocab_size,
            num_tokens,
            seed,
        } => {
            let spec = SyntheticSpec {
                vocab_size,
                num_tokens,
                seed,
            };
            std::fs::write(&output, relpos::corpus::generate_synthetic(&spec)?)?;
            Ok(())
        }
    }
}
