//! Accuracy of the pretraining tasks, label and FLOP accounting, and the
//! synthetic fine-tuning probe.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{SequenceBatch, NUM_SPECIALS};
use crate::exec::map_indexed;
use crate::model::{init_tensor, Mode, ModelConfig, ModelError, TransformerModel};
use crate::objectives::{
    readout_flops, selected_count, CorruptionPlan, Objective, ObjectiveError, ReadoutKind, Task,
};
use crate::params::ParamSet;
use crate::tensor::{Graph, NodeId, Scalar, Tensor, TensorError};
use crate::trainer::{adam_step, AdamConfig, OptimizerState, TrainError};
use crate::{mix_seed, seeded_rng};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation setup: {0}")]
    Config(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(Box<TrainError>),
}

impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        EvalError::Train(Box::new(e))
    }
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Corruption seed for evaluation batches, fixed so that accuracies of
/// different checkpoints are measured on the same plans.
pub const EVAL_SEED: u64 = 0xe7a1_5eed;

// ── Accuracy ──────────────────────────────────────────────────────────────

/// Row-wise argmax of `logits` `[n, C]` (first maximum wins).
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Fraction of rows whose argmax equals the target.
pub fn argmax_accuracy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> f64 {
    let pred = argmax_rows(logits);
    assert_eq!(pred.len(), targets.len(), "one target per row");
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(targets).filter(|(p, t)| p == t).count();
    hits as f64 / pred.len() as f64
}

/// Correct and total predictions of `task` on one batch under eval-mode
/// forward and the fixed evaluation plans for index `i`.
fn batch_hits<T: Scalar>(
    params: &ParamSet<T>,
    model: &TransformerModel,
    task: &Task,
    batch: &SequenceBatch,
    i: usize,
) -> Result<(usize, usize)> {
    let plans = task.plans(batch.batch_size, batch.seq_len, mix_seed(EVAL_SEED, i as u64));
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.values().iter().map(|t| g.constant(t.clone())).collect();
    let out = match task.build_loss(&mut g, &ids, model, batch, &plans, Mode::Eval) {
        Ok(o) => o,
        Err(ObjectiveError::SkipBatch) => return Ok((0, 0)),
        Err(e) => return Err(e.into()),
    };
    let pred = argmax_rows(g.value(out.logits));
    let hits = pred.iter().zip(&out.targets).filter(|(p, t)| p == t).count();
    Ok((hits, out.targets.len()))
}

/// Accuracy of the task's own predictions (relative-position classes,
/// binary correctness, or masked tokens) over `batches`. `None` when no
/// label was selected at all.
pub fn task_accuracy<T: Scalar>(
    params: &ParamSet<T>,
    model: &TransformerModel,
    task: &Task,
    batches: &[SequenceBatch],
) -> Result<Option<f64>> {
    let counts = map_indexed(batches.len(), |i| batch_hits(params, model, task, &batches[i], i));
    let (mut hits, mut total) = (0, 0);
    for c in counts {
        let (h, t) = c?;
        hits += h;
        total += t;
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

/// [`task_accuracy`] restricted to the position objectives.
pub fn relpos_accuracy<T: Scalar>(
    params: &ParamSet<T>,
    model: &TransformerModel,
    task: &Task,
    batches: &[SequenceBatch],
) -> Result<Option<f64>> {
    if !task.objective.is_positional() {
        return Err(EvalError::Config(format!(
            "{} is not a relative-position objective",
            task.objective
        )));
    }
    task_accuracy(params, model, task, batches)
}

// ── Label density ─────────────────────────────────────────────────────────

/// Labels predicted per sequence of length `k`.
pub fn label_density(k: usize, objective: Objective, rate: f64) -> usize {
    let s = selected_count(k, rate);
    match objective {
        Objective::Mlm => s,
        Objective::Pplm | Objective::PplmBinary => k * k,
        Objective::PplmSome => s * s,
        Objective::Pmlm => 2 * k * s - s * s,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub objective: Objective,
    pub rate: f64,
    pub seq_len: usize,
    pub labels_per_sequence: usize,
}

/// Density of every objective at its default rate.
pub fn density_report(k: usize) -> Vec<DensityRow> {
    Objective::ALL
        .iter()
        .map(|&o| DensityRow {
            objective: o,
            rate: o.default_rate(),
            seq_len: k,
            labels_per_sequence: label_density(k, o, o.default_rate()),
        })
        .collect()
}

// ── FLOP accounting ───────────────────────────────────────────────────────

/// Closed-form cost of one sequence under one objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub objective: Objective,
    pub rate: f64,
    pub labels: usize,
    /// Output-head FLOPs: vocabulary projection or relative-position readout.
    pub head_flops: u64,
    /// Encoder FLOPs, identical for every objective.
    pub body_flops: u64,
    /// Vocabulary size below which the masked-token head would be cheaper
    /// than the all-pairs readout (`k·n_h·n_p / (rate·h)`); masked-token rows
    /// only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crossover_vocab: Option<f64>,
}

/// Forward FLOPs (two per multiply-add) of one length-`k` sequence through
/// the encoder.
pub fn body_flops(cfg: &ModelConfig, k: usize) -> u64 {
    let (k, h, i) = (k as u64, cfg.hidden_size as u64, cfg.intermediate_size as u64);
    let projections = 4 * 2 * k * h * h;
    let attention = 2 * 2 * k * k * h;
    let ffn = 2 * 2 * k * h * i;
    cfg.num_layers as u64 * (projections + attention + ffn)
}

pub fn flop_estimate(
    cfg: &ModelConfig,
    k: usize,
    objective: Objective,
    rate: f64,
    readout: ReadoutKind,
) -> CostEntry {
    let labels = label_density(k, objective, rate);
    let n_p = cfg.num_relpos_classes();
    let (head_flops, crossover_vocab) = match objective {
        Objective::Mlm => {
            let head = 2 * (labels * cfg.hidden_size * cfg.vocab_size) as u64;
            let crossover = (rate > 0.0)
                .then(|| (k * cfg.num_heads * n_p) as f64 / (rate * cfg.hidden_size as f64));
            (head, crossover)
        }
        o => {
            let out = if o == Objective::PplmBinary { 2 } else { n_p };
            (readout_flops(readout, cfg.num_heads, out, labels), None)
        }
    };
    CostEntry {
        objective,
        rate,
        labels,
        head_flops,
        body_flops: body_flops(cfg, k),
        crossover_vocab,
    }
}

/// Per-batch costs of every objective at its default rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub seq_len: usize,
    pub batch_size: usize,
    pub rows: Vec<CostRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    #[serde(flatten)]
    pub per_sequence: CostEntry,
    pub head_flops_per_batch: u64,
    pub labels_per_batch: usize,
    /// Filled in only when a timing run was requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ms_per_step: Option<f64>,
}

pub fn cost_report(cfg: &ModelConfig, k: usize, batch_size: usize, readout: ReadoutKind) -> CostReport {
    let rows = Objective::ALL
        .iter()
        .map(|&o| {
            let e = flop_estimate(cfg, k, o, o.default_rate(), readout);
            CostRow {
                head_flops_per_batch: e.head_flops * batch_size as u64,
                labels_per_batch: e.labels * batch_size,
                per_sequence: e,
                ms_per_step: None,
            }
        })
        .collect();
    CostReport {
        seq_len: k,
        batch_size,
        rows,
    }
}

// ── Probe ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeKind {
    /// Three classes over a pair of spans (A, B) cut from one text window:
    /// presented as A B, as B A, or with the whole window reversed. All three
    /// share a bag of tokens, so only order separates them.
    SpanOrder,
    /// Two classes: two marker tokens are written into a text window at
    /// random slots, and the class says which marker comes first. Both
    /// classes share a bag of tokens.
    MarkerOrder,
    /// The class is the identity of the first token, drawn from a small set
    /// of marker tokens.
    FirstToken,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeExample {
    pub tokens: Vec<u32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub kind: ProbeKind,
    pub num_classes: usize,
    pub seq_len: usize,
    pub train: Vec<ProbeExample>,
    pub test: Vec<ProbeExample>,
}

const FIRST_TOKEN_CLASSES: usize = 4;

/// Marker pair for the marker-order probe. Neither id occurs in encoded
/// text, so the markers are unambiguous.
const MARKERS: (u32, u32) = (crate::corpus::UNK, crate::corpus::MASK);

impl ProbeDataset {
    /// Build a probe from `sources` (token windows of at least `seq_len`).
    /// Train and test draw from disjoint source windows after a seeded
    /// shuffle; labels cycle through the classes so each split is balanced.
    pub fn generate(
        kind: ProbeKind,
        sources: &[Vec<u32>],
        seq_len: usize,
        n_train: usize,
        n_test: usize,
        seed: u64,
    ) -> Result<Self> {
        if seq_len < 2 {
            return Err(EvalError::Config("probe sequences need at least two tokens".into()));
        }
        let usable: Vec<&Vec<u32>> = sources.iter().filter(|s| s.len() >= seq_len).collect();
        if usable.len() < n_train + n_test {
            return Err(EvalError::Config(format!(
                "probe needs {} source windows, corpus has {}",
                n_train + n_test,
                usable.len()
            )));
        }
        let mut rng = seeded_rng(seed, 0x960be);
        let mut order: Vec<usize> = (0..usable.len()).collect();
        order.shuffle(&mut rng);
        let vocab_hi = usable.iter().flat_map(|s| s.iter()).copied().max().unwrap_or(0) as usize + 1;
        let num_classes = match kind {
            ProbeKind::SpanOrder => 3,
            ProbeKind::MarkerOrder => 2,
            ProbeKind::FirstToken => FIRST_TOKEN_CLASSES,
        };
        if kind == ProbeKind::FirstToken && vocab_hi < NUM_SPECIALS + num_classes {
            return Err(EvalError::Config("vocabulary too small for marker tokens".into()));
        }
        let make = |idx: &[usize], rng: &mut rand_chacha::ChaCha8Rng| -> Vec<ProbeExample> {
            idx.iter()
                .enumerate()
                .map(|(n, &src)| {
                    let label = n % num_classes;
                    let window = &usable[src][..seq_len];
                    let tokens = match kind {
                        ProbeKind::SpanOrder => order_variant(window, label, rng.random_range(1..seq_len)),
                        ProbeKind::MarkerOrder => {
                            let slots = rand::seq::index::sample(rng, seq_len, 2);
                            let (p, q) = (slots.index(0).min(slots.index(1)), slots.index(0).max(slots.index(1)));
                            let (first, second) = if label == 0 { MARKERS } else { (MARKERS.1, MARKERS.0) };
                            let mut t = window.to_vec();
                            t[p] = first;
                            t[q] = second;
                            t
                        }
                        ProbeKind::FirstToken => {
                            let mut t = window.to_vec();
                            t[0] = (NUM_SPECIALS + label) as u32;
                            t
                        }
                    };
                    ProbeExample { tokens, label }
                })
                .collect()
        };
        let train = make(&order[..n_train], &mut rng);
        let test = make(&order[n_train..n_train + n_test], &mut rng);
        Ok(Self {
            kind,
            num_classes,
            seq_len,
            train,
            test,
        })
    }

    pub fn class_counts(examples: &[ProbeExample], num_classes: usize) -> Vec<usize> {
        let mut c = vec![0; num_classes];
        for e in examples {
            c[e.label] += 1;
        }
        c
    }
}

/// Class 0: `A B` as written; class 1: `B A`; class 2: the window reversed.
/// `cut` is where `A` ends.
pub fn order_variant(window: &[u32], class: usize, cut: usize) -> Vec<u32> {
    match class {
        0 => window.to_vec(),
        1 => window[cut..].iter().chain(&window[..cut]).copied().collect(),
        2 => window.iter().rev().copied().collect(),
        _ => panic!("order probe has three classes"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Classes the new head is built for; must match the dataset.
    pub num_classes: usize,
}

impl ProbeConfig {
    pub fn for_dataset(probe: &ProbeDataset, seed: u64) -> Self {
        Self {
            epochs: 3,
            batch_size: 16,
            learning_rate: 5e-4,
            seed,
            num_classes: probe.num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub kind: ProbeKind,
    pub seed: u64,
    pub epochs: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    pub final_train_loss: f64,
    pub test_accuracy: f64,
}

const PROBE_WEIGHT: &str = "probe.weight";
const PROBE_BIAS: &str = "probe.bias";

fn probe_logits<T: Scalar>(
    g: &mut Graph<T>,
    ids: &[NodeId],
    model: &TransformerModel,
    batch: &SequenceBatch,
    head: (usize, usize),
    mode: Mode,
) -> Result<NodeId> {
    let (b, k, h) = (batch.batch_size, batch.seq_len, model.config().hidden_size);
    let plans: Vec<CorruptionPlan> = (0..b).map(|_| CorruptionPlan::identity(k)).collect();
    let x = model.embed(g, ids, batch, &plans)?;
    let out = model.forward(g, ids, x, mode)?;
    let flat = g.reshape(out.hidden, &[b * k, h])?;
    let first = g.gather_rows(flat, (0..b).map(|r| r * k).collect())?;
    let logits = g.matmul(first, ids[head.0], false)?;
    Ok(g.add_bias(logits, ids[head.1])?)
}

fn to_batch(examples: &[&ProbeExample]) -> Result<SequenceBatch> {
    SequenceBatch::new(examples.iter().map(|e| e.tokens.clone()).collect())
        .map_err(|e| EvalError::Config(e.to_string()))
}

/// Attach a fresh affine head to the first token's final hidden state,
/// fine-tune every parameter on the probe's training split and report
/// held-out accuracy.
pub fn probe_finetune<T: Scalar>(
    pretrained: &ParamSet<T>,
    model_cfg: &ModelConfig,
    probe: &ProbeDataset,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if cfg.num_classes != probe.num_classes {
        return Err(EvalError::Config(format!(
            "probe has {} classes, head was configured for {}",
            probe.num_classes, cfg.num_classes
        )));
    }
    if let Some(e) = probe.train.iter().chain(&probe.test).find(|e| e.label >= cfg.num_classes) {
        return Err(EvalError::Config(format!("label {} outside the head's classes", e.label)));
    }
    if probe.seq_len > model_cfg.max_positions || cfg.batch_size == 0 {
        return Err(EvalError::Config("probe does not fit the model".into()));
    }
    let mut params = pretrained.clone();
    let model = TransformerModel::bind(model_cfg.clone(), &params)?;
    let h = model_cfg.hidden_size;
    let mut rng = seeded_rng(cfg.seed, 0x9e4d);
    let w = params.insert(PROBE_WEIGHT, init_tensor(PROBE_WEIGHT, &[h, cfg.num_classes], model_cfg.init_std, &mut rng));
    let b = params.insert(PROBE_BIAS, init_tensor(PROBE_BIAS, &[cfg.num_classes], model_cfg.init_std, &mut rng));
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut state = OptimizerState::new(params.values());
    let names = params.names().to_vec();
    let mut order: Vec<usize> = (0..probe.train.len()).collect();
    let mut last_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (n, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let ex: Vec<&ProbeExample> = chunk.iter().map(|&i| &probe.train[i]).collect();
            let batch = to_batch(&ex)?;
            let targets: Vec<usize> = ex.iter().map(|e| e.label).collect();
            let mut g = Graph::new();
            let ids = params.bind(&mut g);
            let mode = Mode::Train {
                seed: mix_seed(cfg.seed, ((epoch as u64) << 32) | n as u64),
            };
            let logits = probe_logits(&mut g, &ids, &model, &batch, (w, b), mode)?;
            let loss = g.cross_entropy(logits, &targets)?;
            last_loss = g.value(loss).item().f64();
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor<T>> = ids
                .iter()
                .zip(params.values())
                .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            adam_step(params.values_mut(), &names, &grads, &mut state, &adam)?;
        }
    }
    let chunks: Vec<&[ProbeExample]> = probe.test.chunks(cfg.batch_size.max(32)).collect();
    let hits = map_indexed(chunks.len(), |i| -> Result<usize> {
        let ex: Vec<&ProbeExample> = chunks[i].iter().collect();
        let batch = to_batch(&ex)?;
        let mut g = Graph::new();
        let ids: Vec<NodeId> = params.values().iter().map(|t| g.constant(t.clone())).collect();
        let logits = probe_logits(&mut g, &ids, &model, &batch, (w, b), Mode::Eval)?;
        let pred = argmax_rows(g.value(logits));
        Ok(pred.iter().zip(&ex).filter(|(p, e)| **p == e.label).count())
    });
    let mut correct = 0;
    for h in hits {
        correct += h?;
    }
    Ok(ProbeReport {
        kind: probe.kind,
        seed: cfg.seed,
        epochs: cfg.epochs,
        train_examples: probe.train.len(),
        test_examples: probe.test.len(),
        final_train_loss: last_loss,
        test_accuracy: if probe.test.is_empty() {
            0.0
        } else {
            correct as f64 / probe.test.len() as f64
        },
    })
}

/// Accuracy of always answering the most frequent training class.
pub fn majority_baseline(probe: &ProbeDataset) -> f64 {
    let counts = ProbeDataset::class_counts(&probe.train, probe.num_classes);
    let major = (0..probe.num_classes).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap_or(0);
    if probe.test.is_empty() {
        return 0.0;
    }
    probe.test.iter().filter(|e| e.label == major).count() as f64 / probe.test.len() as f64
}

/// Fine-tune on one probe across several seeds, optionally paired with a
/// randomly initialized encoder given the same data, head init and order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedProbe {
    pub kind: ProbeKind,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedProbeReport {
    pub kind: ProbeKind,
    pub pretrained: Vec<ProbeReport>,
    pub mean_pretrained: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub baseline: Vec<ProbeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_baseline: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_difference: Option<f64>,
}

fn mean(v: &[ProbeReport]) -> f64 {
    v.iter().map(|r| r.test_accuracy).sum::<f64>() / v.len().max(1) as f64
}

impl PairedProbe {
    pub fn desk(kind: ProbeKind) -> Self {
        Self {
            kind,
            seeds: (0..5).collect(),
            epochs: 3,
            n_train: 1500,
            n_test: 600,
            batch_size: 16,
            learning_rate: 5e-4,
        }
    }

    fn one<T: Scalar>(&self, params: &ParamSet<T>, model_cfg: &ModelConfig, sources: &[Vec<u32>], seed: u64) -> Result<ProbeReport> {
        let k = model_cfg.max_positions.min(sources.iter().map(Vec::len).max().unwrap_or(0));
        let probe = ProbeDataset::generate(self.kind, sources, k, self.n_train, self.n_test, seed)?;
        let cfg = ProbeConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            num_classes: probe.num_classes,
        };
        probe_finetune(params, model_cfg, &probe, &cfg)
    }

    pub fn run_only<T: Scalar>(&self, params: &ParamSet<T>, model_cfg: &ModelConfig, sources: &[Vec<u32>]) -> Result<PairedProbeReport> {
        let runs: Result<Vec<_>> = map_indexed(self.seeds.len(), |i| self.one(params, model_cfg, sources, self.seeds[i]))
            .into_iter()
            .collect();
        let pretrained = runs?;
        Ok(PairedProbeReport {
            kind: self.kind,
            mean_pretrained: mean(&pretrained),
            pretrained,
            baseline: Vec::new(),
            mean_baseline: None,
            mean_difference: None,
        })
    }

    /// Pretrained against random initialization, seed by seed.
    pub fn compare<T: Scalar>(&self, params: &ParamSet<T>, model_cfg: &ModelConfig, sources: &[Vec<u32>]) -> Result<PairedProbeReport> {
        let n = self.seeds.len();
        let runs = map_indexed(2 * n, |j| {
            let seed = self.seeds[j % n];
            if j < n {
                self.one(params, model_cfg, sources, seed)
            } else {
                let mut fresh = ParamSet::<T>::new();
                TransformerModel::init(model_cfg.clone(), &mut fresh, mix_seed(seed, 0xba5e))?;
                self.one(&fresh, model_cfg, sources, seed)
            }
        });
        let mut runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
        let baseline = runs.split_off(n);
        let pretrained = runs;
        let (mp, mb) = (mean(&pretrained), mean(&baseline));
        Ok(PairedProbeReport {
            kind: self.kind,
            pretrained,
            mean_pretrained: mp,
            baseline,
            mean_baseline: Some(mb),
            mean_difference: Some(mp - mb),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn oracle_predictor_is_exact() {
        let targets = vec![3, 0, 62, 17];
        let mut logits = Tensor::<f32>::zeros(&[4, 63]);
        for (r, &t) in targets.iter().enumerate() {
            logits.data_mut()[r * 63 + t] = 1.0;
        }
        assert_eq!(argmax_accuracy(&logits, &targets), 1.0);
    }

    #[test]
    fn uniform_random_predictor_near_chance() {
        let n = 200_000;
        let c = 63;
        let mut rng = seeded_rng(5, 0);
        let data: Vec<f64> = (0..n * c).map(|_| rng.random::<f64>()).collect();
        let logits = Tensor::new(vec![n, c], data).unwrap();
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let acc = argmax_accuracy(&logits, &targets);
        let p = 1.0 / c as f64;
        let ci = 4.0 * (p * (1.0 - p) / n as f64).sqrt();
        assert!((acc - p).abs() < ci, "acc {acc} vs {p} ± {ci}");
    }

    #[test]
    fn density_examples() {
        assert_eq!(label_density(128, Objective::Mlm, 0.3), 38);
        assert_eq!(label_density(128, Objective::Pplm, 0.6), 16384);
        assert_eq!(label_density(128, Objective::PplmSome, 0.6), 5776);
        assert_eq!(label_density(128, Objective::Pmlm, 0.6), 13680);
        for o in [Objective::Mlm, Objective::Pmlm, Objective::PplmSome] {
            assert_eq!(label_density(128, o, 0.0), 0);
        }
        assert_eq!(label_density(128, Objective::Pplm, 0.0), 16384);
    }

    #[test]
    fn paper_preset_head_flops() {
        let cfg = ModelConfig::paper();
        let mlm = flop_estimate(&cfg, 128, Objective::Mlm, 0.3, ReadoutKind::Linear);
        let pplm = flop_estimate(&cfg, 128, Objective::Pplm, 0.6, ReadoutKind::Linear);
        assert_eq!(mlm.head_flops, 2 * 38 * 256 * 50265);
        assert_eq!(mlm.head_flops, 977_955_840);
        assert_eq!(pplm.head_flops, 2 * 16384 * 16 * 255);
        assert_eq!(mlm.body_flops, pplm.body_flops);
        let crossover = mlm.crossover_vocab.unwrap();
        assert!((crossover - 128.0 * 16.0 * 255.0 / (0.3 * 256.0)).abs() < 1e-6);
    }

    #[test]
    fn rate_zero_mlm_has_no_head_cost() {
        let cfg = ModelConfig::paper();
        assert_eq!(flop_estimate(&cfg, 128, Objective::Mlm, 0.0, ReadoutKind::Linear).head_flops, 0);
    }

    #[test]
    fn order_variants_share_tokens() {
        let w: Vec<u32> = (10..20).collect();
        let mut sorted: Vec<Vec<u32>> = (0..3)
            .map(|c| {
                let mut v = order_variant(&w, c, 4);
                v.sort();
                v
            })
            .collect();
        sorted.dedup();
        assert_eq!(sorted.len(), 1);
        assert_eq!(order_variant(&w, 1, 4)[..6], w[4..]);
    }

    #[test]
    fn probe_is_balanced_and_disjoint() {
        let sources: Vec<Vec<u32>> = (0..400).map(|i| (0..8).map(|t| 3 + i * 8 + t).collect()).collect();
        let p = ProbeDataset::generate(ProbeKind::SpanOrder, &sources, 8, 300, 90, 1).unwrap();
        let counts = ProbeDataset::class_counts(&p.train, 3);
        assert_eq!(counts, vec![100, 100, 100]);
        assert!((majority_baseline(&p) - 1.0 / 3.0).abs() < 0.01);
        // Every source window is distinct, so disjoint sources give disjoint sets.
        let train: std::collections::HashSet<Vec<u32>> = p.train.iter().map(|e| {
            let mut t = e.tokens.clone();
            t.sort();
            t
        }).collect();
        assert!(p.test.iter().all(|e| {
            let mut t = e.tokens.clone();
            t.sort();
            !train.contains(&t)
        }));
    }

    #[test]
    fn marker_classes_differ_only_in_order() {
        let sources: Vec<Vec<u32>> = (0..200).map(|i| (0..12).map(|t| 3 + i * 12 + t).collect()).collect();
        let p = ProbeDataset::generate(ProbeKind::MarkerOrder, &sources, 12, 100, 50, 9).unwrap();
        assert_eq!(ProbeDataset::class_counts(&p.train, 2), vec![50, 50]);
        for e in p.train.iter().chain(&p.test) {
            let unk = e.tokens.iter().position(|&t| t == MARKERS.0).unwrap();
            let mask = e.tokens.iter().position(|&t| t == MARKERS.1).unwrap();
            assert_eq!(e.label, (mask < unk) as usize);
        }
    }

    #[test]
    fn head_label_mismatch_is_config_error() {
        let sources: Vec<Vec<u32>> = (0..40).map(|i| (0..8).map(|t| 3 + ((i + t) % 20) as u32).collect()).collect();
        let p = ProbeDataset::generate(ProbeKind::SpanOrder, &sources, 8, 30, 9, 1).unwrap();
        let cfg = ModelConfig::desk(32, 8);
        let mut params = ParamSet::<f32>::new();
        TransformerModel::init(cfg.clone(), &mut params, 0).unwrap();
        let pc = ProbeConfig {
            num_classes: 2,
            ..ProbeConfig::for_dataset(&p, 0)
        };
        assert!(matches!(probe_finetune(&params, &cfg, &p, &pc), Err(EvalError::Config(_))));
    }
}
