//! Optimization loop, run configuration, checkpointing and metrics.

pub mod adam;
pub mod checkpoint;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::Checkpoint;

use crate::corpus::{next_batch, read_corpus, Corpus, CorpusError, SequenceBatch, SyntheticSpec};
use crate::eval::{flop_estimate, task_accuracy, EvalError};
use crate::model::{Mode, ModelConfig, ModelError, TransformerModel};
use crate::objectives::{CorruptionPlan, Objective, ObjectiveError, ReadoutKind, Task};
use crate::params::ParamSet;
use crate::tensor::{Graph, Precision, Scalar, Tensor, TensorError};
use crate::mix_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: String, expected: String },
    #[error("numeric failure at step {step}: {source}")]
    Numeric {
        step: u64,
        emergency_checkpoint: Option<PathBuf>,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl TrainError {
    fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteGradient(_)
                | TrainError::Tensor(TensorError::NonFinite { .. })
                | TrainError::Model(ModelError::Numeric { .. })
                | TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
                | TrainError::Objective(ObjectiveError::Tensor(TensorError::NonFinite { .. }))
                | TrainError::Objective(ObjectiveError::Model(ModelError::Numeric { .. }))
        )
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Everything that defines a training run. Serialized as the JSON config
/// file accepted by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub corruption_rate: f64,
    #[serde(default)]
    pub readout: ReadoutKind,
    pub model: ModelConfig,
    pub seq_len: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    #[serde(default)]
    pub corpus_paths: Vec<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    pub max_vocab: usize,
    #[serde(default = "one")]
    pub min_freq: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub checkpoint_every: u64,
    #[serde(default)]
    pub precision: Precision,
    /// Write 0 in the timing column so metrics files are reproducible.
    #[serde(default)]
    pub deterministic: bool,
    /// Held-out batches used for the accuracy in the summary.
    pub eval_batches: usize,
}

fn one() -> u64 {
    1
}

impl TrainConfig {
    /// CPU-sized run on the synthetic corpus.
    pub fn desk() -> Self {
        let seq_len = 32;
        Self {
            objective: Objective::Pplm,
            corruption_rate: Objective::Pplm.default_rate(),
            readout: ReadoutKind::Linear,
            model: ModelConfig::desk(8192, seq_len),
            seq_len,
            batch_size: 16,
            total_steps: 2000,
            learning_rate: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            corpus_paths: Vec::new(),
            synthetic: Some(SyntheticSpec {
                vocab_size: 512,
                num_tokens: 200_000,
                seed: 0,
            }),
            max_vocab: 8192,
            min_freq: 1,
            output_dir: None,
            checkpoint_every: 500,
            precision: Precision::F32,
            deterministic: false,
            eval_batches: 8,
        }
    }

    /// The published setup: 12 layers, h 256, 16 heads, sequences of 128 in
    /// batches of 64 for 40K steps at learning rate 5e-4.
    pub fn paper() -> Self {
        let model = ModelConfig::paper();
        Self {
            seq_len: 128,
            batch_size: 64,
            total_steps: 40_000,
            max_vocab: model.vocab_size,
            synthetic: Some(SyntheticSpec {
                vocab_size: model.vocab_size,
                num_tokens: 10_000_000,
                seed: 0,
            }),
            model,
            ..Self::desk()
        }
    }

    pub fn with_objective(mut self, objective: Objective) -> Self {
        self.objective = objective;
        self.corruption_rate = objective.default_rate();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.total_steps == 0 {
            return fail("total_steps must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return fail(format!("corruption rate {} outside [0, 1]", self.corruption_rate));
        }
        if self.objective == Objective::Mlm && self.corruption_rate == 0.0 {
            return fail("masked-token objective needs a corruption rate above 0".into());
        }
        if self.seq_len < 2 || self.seq_len > self.model.max_positions {
            return fail(format!(
                "seq_len {} must be in 2..={}",
                self.seq_len, self.model.max_positions
            ));
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return fail("batch_size and checkpoint_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return fail("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.corpus_paths.is_empty() && self.synthetic.is_none() {
            return fail("no corpus: give corpus_paths or a synthetic spec".into());
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Load the corpus this config names; the model's vocabulary size is
    /// taken from the resulting vocabulary.
    pub fn load_corpus(&mut self) -> Result<Corpus> {
        let corpus = if !self.corpus_paths.is_empty() {
            let texts = read_corpus(&self.corpus_paths)?;
            let docs: Vec<&str> = texts.iter().flat_map(|t| t.lines()).collect();
            Corpus::from_documents(&docs, self.max_vocab, self.min_freq, self.seq_len)?
        } else {
            let spec = self.synthetic.expect("validated");
            let text = crate::corpus::generate_synthetic(&spec)?;
            Corpus::from_text(&text, self.max_vocab, self.min_freq, self.seq_len)?
        };
        self.model.vocab_size = corpus.vocab.len();
        Ok(corpus)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub labels: usize,
    pub wallclock_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Trained(StepMetrics),
    /// The objective selected no labels; no update was applied.
    Skipped { step: u64 },
}

/// Model, task head, optimizer and position in the batch stream.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    config: TrainConfig,
    params: ParamSet<T>,
    model: TransformerModel,
    task: Task,
    optimizer: OptimizerState<T>,
    /// Batches drawn so far, including skipped ones.
    step: u64,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh parameters under `config.seed`. `config.model.vocab_size` must
    /// already match the corpus.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let model = TransformerModel::init(config.model.clone(), &mut params, config.seed)?;
        let task = Task::init(
            config.objective,
            config.corruption_rate,
            config.readout,
            &model,
            &mut params,
            mix_seed(config.seed, READOUT_STREAM),
        )?;
        let optimizer = OptimizerState::new(params.values());
        Ok(Self {
            config,
            params,
            model,
            task,
            optimizer,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        let config = ckpt.config;
        config.validate()?;
        let model = TransformerModel::bind(config.model.clone(), &ckpt.params)?;
        let task = Task::bind(
            config.objective,
            config.corruption_rate,
            config.readout,
            &model,
            &ckpt.params,
        )?;
        if ckpt.optimizer.m.len() != ckpt.params.len() {
            return Err(TrainError::Integrity("optimizer state does not match parameters".into()));
        }
        Ok(Self {
            config,
            params: ckpt.params,
            model,
            task,
            optimizer: ckpt.optimizer,
            step: ckpt.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn model(&self) -> &TransformerModel {
        &self.model
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn optimizer(&self) -> &OptimizerState<T> {
        &self.optimizer
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Seed shared by the corruption plans and dropout masks of batch `step`.
    pub fn batch_seed(&self, step: u64) -> u64 {
        mix_seed(self.config.seed, step.wrapping_add(1) << 1)
    }

    pub fn plans_for(&self, batch: &SequenceBatch, step: u64) -> Vec<CorruptionPlan> {
        self.task.plans(batch.batch_size, batch.seq_len, self.batch_seed(step))
    }

    /// Loss, one gradient per parameter (zeros where the loss does not
    /// depend on it) and the number of labels predicted.
    pub fn loss_and_grads(
        &self,
        params: &ParamSet<T>,
        batch: &SequenceBatch,
        plans: &[CorruptionPlan],
        mode: Mode,
    ) -> Result<(f64, Vec<Tensor<T>>, usize)> {
        let mut g = Graph::new();
        let ids = params.bind(&mut g);
        let out = self.task.build_loss(&mut g, &ids, &self.model, batch, plans, mode)?;
        let mut grads = g.backward(out.loss)?;
        let grads = ids
            .iter()
            .zip(params.values())
            .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((g.value(out.loss).item().f64(), grads, out.num_labels))
    }

    /// Accuracy of the current parameters on held-out batches.
    pub fn accuracy(&self, batches: &[SequenceBatch]) -> Result<Option<f64>> {
        Ok(task_accuracy(&self.params, &self.model, &self.task, batches)?)
    }

    /// Forward, backward and one Adam update on `batch`.
    pub fn train_step(&mut self, batch: &SequenceBatch) -> Result<StepOutcome> {
        let plans = self.plans_for(batch, self.step);
        self.train_step_with(batch, &plans)
    }

    /// [`Trainer::train_step`] under caller-chosen corruption plans.
    pub fn train_step_with(&mut self, batch: &SequenceBatch, plans: &[CorruptionPlan]) -> Result<StepOutcome> {
        let start = Instant::now();
        let step = self.step;
        let mode = Mode::Train {
            seed: self.batch_seed(step) ^ 0x00d7_0b0a,
        };
        let (loss, grads, labels) = match self.loss_and_grads(&self.params, batch, plans, mode) {
            Ok(r) => r,
            Err(TrainError::Objective(ObjectiveError::SkipBatch)) => {
                self.step += 1;
                return Ok(StepOutcome::Skipped { step });
            }
            Err(e) => return Err(e),
        };
        let adam = self.config.adam();
        let names = self.params.names().to_vec();
        adam_step(self.params.values_mut(), &names, &grads, &mut self.optimizer, &adam)?;
        if !self.params.all_finite() {
            return Err(TrainError::NonFiniteGradient("parameters after update".into()));
        }
        self.step += 1;
        Ok(StepOutcome::Trained(StepMetrics {
            step,
            loss,
            labels,
            wallclock_ms: start.elapsed().as_secs_f64() * 1e3,
        }))
    }
}

// Keeps the task head's initializer stream apart from the encoder's.
const READOUT_STREAM: u64 = 0x7ead_0000;

/// Mean of the last `window` values ending at index `end` (inclusive).
pub fn smoothed(values: &[f64], end: usize, window: usize) -> f64 {
    let start = (end + 1).saturating_sub(window);
    let s = &values[start..=end];
    s.iter().sum::<f64>() / s.len() as f64
}

/// `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub objective: Objective,
    pub corruption_rate: f64,
    pub steps: u64,
    pub updates: u64,
    pub skipped_batches: u64,
    pub final_loss: f64,
    /// Mean loss over the last 100 updates.
    pub final_loss_smoothed: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relpos_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlm_accuracy: Option<f64>,
    pub total_flops_estimate: f64,
    pub seed: u64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub vocab_size: usize,
    pub parameters: usize,
    pub wallclock_s: f64,
}

/// Result of [`run`]: the summary plus in-memory history and final weights.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub history: Vec<StepMetrics>,
    pub config: TrainConfig,
    pub params: ParamSet<f32>,
}

const METRICS_HEADER: &str = "step,loss,labels_per_batch,ms_per_step";

/// Held-out batches for accuracy: the last `eval_batches * batch_size`
/// sequences are reserved when the pool is large enough.
pub fn split_eval(sequences: &[Vec<u32>], config: &TrainConfig) -> (Vec<Vec<u32>>, Vec<SequenceBatch>) {
    let need = config.eval_batches * config.batch_size;
    if config.eval_batches == 0 || sequences.len() < 2 * need.max(config.batch_size) {
        return (sequences.to_vec(), Vec::new());
    }
    let (train, held) = sequences.split_at(sequences.len() - need);
    let batches = held
        .chunks(config.batch_size)
        .map(|c| SequenceBatch::new(c.to_vec()).expect("equal-length rows"))
        .collect();
    (train.to_vec(), batches)
}

/// Execute a full run (or resume one from a checkpoint directory).
pub fn run(config: TrainConfig) -> Result<RunOutput> {
    run_from(config, None)
}

pub fn run_from(mut config: TrainConfig, resume: Option<&Path>) -> Result<RunOutput> {
    config.validate()?;
    let corpus = config.load_corpus()?;
    config.validate()?;
    match config.precision {
        Precision::F32 => run_typed::<f32>(config, corpus, resume),
        Precision::F64 => run_typed::<f64>(config, corpus, resume),
    }
}

fn run_typed<T: Scalar>(config: TrainConfig, corpus: Corpus, resume: Option<&Path>) -> Result<RunOutput> {
    let started = Instant::now();
    let (train_seqs, eval_batches) = split_eval(&corpus.sequences, &config);
    if train_seqs.len() < config.batch_size {
        return Err(TrainError::Config(format!(
            "corpus yields {} sequences of length {}, fewer than one batch of {}",
            train_seqs.len(),
            config.seq_len,
            config.batch_size
        )));
    }
    let mut trainer = match resume {
        Some(dir) => {
            let ckpt = checkpoint::load::<T>(dir)?;
            if ckpt.config.model != config.model {
                return Err(TrainError::Config("checkpoint model config differs from the run".into()));
            }
            let mut t = Trainer::from_checkpoint(ckpt)?;
            t.config.total_steps = config.total_steps;
            t.config.output_dir = config.output_dir.clone();
            t
        }
        None => Trainer::<T>::new(config.clone())?,
    };

    let out_dir = config.output_dir.clone();
    let mut metrics = match &out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            corpus.vocab.save(&dir.join("vocab.json"))?;
            let path = dir.join("metrics.csv");
            let appending = resume.is_some() && path.exists();
            let file = fs::OpenOptions::new()
                .create(true)
                .append(appending)
                .write(true)
                .truncate(!appending)
                .open(path)?;
            let mut w = BufWriter::new(file);
            if !appending {
                writeln!(w, "{METRICS_HEADER}")?;
            }
            Some(w)
        }
        None => None,
    };

    let initial_accuracy = trainer.accuracy(&eval_batches)?;
    let mut history = Vec::new();
    let mut skipped = 0;
    while trainer.step() < config.total_steps {
        let step = trainer.step();
        let batch = next_batch(&train_seqs, config.batch_size, config.seed, step)?;
        let outcome = match trainer.train_step(&batch) {
            Ok(o) => o,
            Err(e) if e.is_numeric() => {
                let emergency = out_dir.as_ref().map(|d| d.join("emergency"));
                if let Some(dir) = &emergency {
                    checkpoint::save(dir, &trainer.checkpoint())?;
                }
                return Err(TrainError::Numeric {
                    step,
                    emergency_checkpoint: emergency,
                    source: Box::new(e),
                });
            }
            Err(e) => return Err(e),
        };
        match outcome {
            StepOutcome::Trained(m) => {
                if let Some(w) = metrics.as_mut() {
                    let ms = if config.deterministic { 0.0 } else { m.wallclock_ms };
                    writeln!(w, "{},{},{},{:.3}", m.step, m.loss, m.labels, ms)?;
                }
                if m.step % 100 == 0 {
                    log::info!("step {} loss {:.4}", m.step, m.loss);
                }
                history.push(m);
            }
            StepOutcome::Skipped { step } => {
                log::debug!("step {step} skipped: no labels");
                skipped += 1;
            }
        }
        let done = trainer.step();
        if let Some(dir) = &out_dir {
            if done % config.checkpoint_every == 0 || done == config.total_steps {
                checkpoint::save(&dir.join(format!("ckpt-{done:06}")), &trainer.checkpoint())?;
            }
        }
    }
    if let Some(w) = metrics.as_mut() {
        w.flush()?;
    }

    let accuracy = trainer.accuracy(&eval_batches)?;
    let losses: Vec<f64> = history.iter().map(|m| m.loss).collect();
    let (final_loss, final_loss_smoothed) = match losses.len() {
        0 => (f64::NAN, f64::NAN),
        n => (losses[n - 1], smoothed(&losses, n - 1, 100)),
    };
    let cfg = trainer.config().clone();
    let cost = flop_estimate(&cfg.model, cfg.seq_len, cfg.objective, cfg.corruption_rate, cfg.readout);
    let total_flops = 3.0 * (cost.body_flops + cost.head_flops) as f64 * cfg.batch_size as f64 * history.len() as f64;
    let positional = cfg.objective.is_positional();
    let summary = RunSummary {
        objective: cfg.objective,
        corruption_rate: cfg.corruption_rate,
        steps: trainer.step(),
        updates: trainer.optimizer().step,
        skipped_batches: skipped,
        final_loss,
        final_loss_smoothed,
        initial_accuracy,
        relpos_accuracy: accuracy.filter(|_| positional),
        mlm_accuracy: accuracy.filter(|_| !positional),
        total_flops_estimate: total_flops,
        seed: cfg.seed,
        learning_rate: cfg.learning_rate,
        adam_beta1: cfg.adam_beta1,
        adam_beta2: cfg.adam_beta2,
        adam_eps: cfg.adam_eps,
        vocab_size: cfg.model.vocab_size,
        parameters: trainer.params().num_scalars(),
        wallclock_s: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &out_dir {
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        let mut f = File::create(dir.join("summary.json"))?;
        f.write_all(json.as_bytes())?;
    }
    Ok(RunOutput {
        summary,
        history,
        config: cfg,
        params: trainer.params().cast(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_matches_published_setup() {
        let c = TrainConfig::paper();
        assert_eq!(c.seq_len, 128);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.total_steps, 40_000);
        assert_eq!(c.learning_rate, 5e-4);
        assert_eq!(c.model.num_layers, 12);
        assert_eq!(c.model.hidden_size, 256);
        assert_eq!(c.model.num_heads, 16);
        c.validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = TrainConfig::desk();
        c.total_steps = 0;
        assert!(matches!(c.validate(), Err(TrainError::Config(_))));
        let mut c = TrainConfig::desk();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.corruption_rate = 1.5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.seq_len = 64;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_roundtrip() {
        let c = TrainConfig::desk().with_objective(Objective::PplmSome);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"objective\":\"pplm-some\""));
        let back: TrainConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn smoothing_window() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(smoothed(&v, 3, 2), 3.5);
        assert_eq!(smoothed(&v, 1, 100), 1.5);
    }
}
