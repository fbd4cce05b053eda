//! Corruption plans, relative-position labels, per-objective pair
//! selection, the relative-position readout and every pretraining loss.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{SequenceBatch, MASK};
use crate::model::{init_tensor, HeadScores, Mode, ModelError, TransformerModel};
use crate::params::ParamSet;
use crate::tensor::{Graph, NodeId, Scalar, Tensor, TensorError};
use crate::{mix_seed, seeded_rng};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    /// The objective selects no label for this batch; the caller should skip
    /// the update rather than treat it as zero loss.
    #[error("no pairs selected; skip this batch")]
    SkipBatch,
    #[error("invalid objective configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

/// Pretraining objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Masked tokens predicted over the full vocabulary.
    Mlm,
    /// Masked position signal; predict offsets of pairs touching a masked slot.
    Pmlm,
    /// Permuted position signal; predict offsets of all pairs.
    Pplm,
    /// Permuted position signal; predict offsets among permuted slots only.
    PplmSome,
    /// Permuted position signal; predict whether each pair's presented
    /// offset is correct.
    PplmBinary,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Mlm,
        Objective::Pmlm,
        Objective::Pplm,
        Objective::PplmSome,
        Objective::PplmBinary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Mlm => "mlm",
            Objective::Pmlm => "pmlm",
            Objective::Pplm => "pplm",
            Objective::PplmSome => "pplm-some",
            Objective::PplmBinary => "pplm-binary",
        }
    }

    /// Corruption rates of the published comparison: 30% for MLM, 60% for
    /// every position objective.
    pub fn default_rate(self) -> f64 {
        match self {
            Objective::Mlm => 0.3,
            _ => 0.6,
        }
    }

    pub fn is_positional(self) -> bool {
        self != Objective::Mlm
    }

    pub fn corruption_mode(self) -> CorruptionMode {
        match self {
            Objective::Mlm => CorruptionMode::None,
            Objective::Pmlm => CorruptionMode::Mask,
            _ => CorruptionMode::Permute,
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionMode {
    None,
    Mask,
    Permute,
}

/// `floor(rate · k)`, tolerant of rates like 0.29 whose product lands a hair
/// below an integer.
pub fn selected_count(k: usize, rate: f64) -> usize {
    ((rate * k as f64) + 1e-9).floor().min(k as f64) as usize
}

/// Which position slots of one sequence are corrupted, and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionPlan {
    pub mode: CorruptionMode,
    pub rate: f64,
    pub seq_len: usize,
    /// Sorted corrupted slots.
    pub selected: Vec<usize>,
    /// Position assigned to each slot; a bijection on `selected`, identity
    /// elsewhere.
    pub pi: Vec<usize>,
    /// Token slots replaced by MASK (masked-token objective only).
    pub token_mask_targets: Vec<usize>,
}

impl CorruptionPlan {
    pub fn identity(k: usize) -> Self {
        Self {
            mode: CorruptionMode::None,
            rate: 0.0,
            seq_len: k,
            selected: Vec::new(),
            pi: (0..k).collect(),
            token_mask_targets: Vec::new(),
        }
    }

    pub fn is_selected(&self, t: usize) -> bool {
        self.selected.binary_search(&t).is_ok()
    }
}

/// Draw `floor(rate·k)` slots uniformly without replacement. Permute mode
/// shuffles their positions uniformly (fixed points allowed); mask mode
/// leaves `pi` as the identity.
pub fn sample_corruption(k: usize, rate: f64, mode: CorruptionMode, seed: u64) -> CorruptionPlan {
    assert!((0.0..=1.0).contains(&rate), "rate {rate} outside [0, 1]");
    let mut rng = seeded_rng(seed, 0xc0_0001);
    let n = selected_count(k, rate);
    let mut selected = sample(&mut rng, k, n).into_vec();
    selected.sort_unstable();
    let mut pi: Vec<usize> = (0..k).collect();
    if mode == CorruptionMode::Permute {
        let mut targets = selected.clone();
        targets.shuffle(&mut rng);
        for (&slot, &pos) in selected.iter().zip(&targets) {
            pi[slot] = pos;
        }
    }
    let token_mask_targets = if mode == CorruptionMode::None {
        selected.clone()
    } else {
        Vec::new()
    };
    CorruptionPlan {
        mode,
        rate,
        seq_len: k,
        selected,
        pi,
        token_mask_targets,
    }
}

/// Ground-truth relative positions for one sequence, always in the original
/// slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct RelPosLabels {
    pub seq_len: usize,
    pub max_positions: usize,
    /// `offsets[i*k + j] = j - i`.
    pub offsets: Vec<i64>,
    /// `offsets + (L - 1)`, in `0..n_p`.
    pub class_index: Vec<usize>,
    pub num_classes: usize,
    /// 1 where the presented offset agrees with the original:
    /// `pi(i) - pi(j) == i - j`.
    pub binary_correct: Vec<u8>,
}

impl RelPosLabels {
    pub fn offset(&self, i: usize, j: usize) -> i64 {
        self.offsets[i * self.seq_len + j]
    }

    pub fn class(&self, i: usize, j: usize) -> usize {
        self.class_index[i * self.seq_len + j]
    }

    pub fn correct(&self, i: usize, j: usize) -> u8 {
        self.binary_correct[i * self.seq_len + j]
    }
}

pub fn rel_pos_labels(k: usize, max_positions: usize, plan: &CorruptionPlan) -> Result<RelPosLabels> {
    if k > max_positions {
        return Err(ObjectiveError::Config(format!(
            "sequence length {k} exceeds max positions {max_positions}"
        )));
    }
    if plan.seq_len != k {
        return Err(ObjectiveError::Contract(format!("plan length {} != {k}", plan.seq_len)));
    }
    let l = max_positions as i64;
    let mut offsets = Vec::with_capacity(k * k);
    let mut class_index = Vec::with_capacity(k * k);
    let mut binary_correct = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let off = j as i64 - i as i64;
            offsets.push(off);
            class_index.push((off + l - 1) as usize);
            let presented = plan.pi[i] as i64 - plan.pi[j] as i64;
            binary_correct.push(u8::from(presented == i as i64 - j as i64));
        }
    }
    Ok(RelPosLabels {
        seq_len: k,
        max_positions,
        offsets,
        class_index,
        num_classes: 2 * max_positions - 1,
        binary_correct,
    })
}

/// Flat pair indices `i*k + j` an objective predicts for one sequence.
///
/// PPLM and PPLM-Binary use all `k²` ordered pairs; PPLM-Some the pairs with
/// both ends corrupted; PMLM the pairs with at least one masked end.
pub fn select_pairs(plan: &CorruptionPlan, objective: Objective) -> Result<Vec<usize>> {
    let k = plan.seq_len;
    let expected = objective.corruption_mode();
    if !objective.is_positional() || plan.mode != expected {
        return Err(ObjectiveError::Contract(format!(
            "{objective} needs a {expected:?} plan, got {:?}",
            plan.mode
        )));
    }
    let mut sel = vec![false; k];
    for &t in &plan.selected {
        sel[t] = true;
    }
    let keep = |i: usize, j: usize| match objective {
        Objective::Pplm | Objective::PplmBinary => true,
        Objective::PplmSome => sel[i] && sel[j],
        Objective::Pmlm => sel[i] || sel[j],
        Objective::Mlm => unreachable!(),
    };
    let pairs: Vec<usize> = (0..k * k).filter(|&p| keep(p / k, p % k)).collect();
    if pairs.is_empty() {
        return Err(ObjectiveError::SkipBatch);
    }
    Ok(pairs)
}

/// Training targets for the given pairs.
pub fn pair_targets(labels: &RelPosLabels, pairs: &[usize], objective: Objective) -> Vec<usize> {
    pairs
        .iter()
        .map(|&p| match objective {
            Objective::PplmBinary => labels.binary_correct[p] as usize,
            _ => labels.class_index[p],
        })
        .collect()
}

// ── Readout ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReadoutKind {
    /// A single affine map.
    #[default]
    Linear,
    /// One GELU hidden layer of width 64.
    Mlp,
}

pub const MLP_READOUT_WIDTH: usize = 64;

/// Maps a pair's `n_h` head scores to logits over relative-position classes
/// (or over {incorrect, correct} for the binary objective).
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutHead {
    pub kind: ReadoutKind,
    pub in_dim: usize,
    pub out_dim: usize,
    slots: Vec<usize>,
}

impl ReadoutHead {
    fn layer_names(kind: ReadoutKind) -> &'static [&'static str] {
        match kind {
            ReadoutKind::Linear => &["readout.weight", "readout.bias"],
            ReadoutKind::Mlp => &[
                "readout.hidden.weight",
                "readout.hidden.bias",
                "readout.weight",
                "readout.bias",
            ],
        }
    }

    fn shapes(kind: ReadoutKind, in_dim: usize, out_dim: usize) -> Vec<Vec<usize>> {
        match kind {
            ReadoutKind::Linear => vec![vec![in_dim, out_dim], vec![out_dim]],
            ReadoutKind::Mlp => vec![
                vec![in_dim, MLP_READOUT_WIDTH],
                vec![MLP_READOUT_WIDTH],
                vec![MLP_READOUT_WIDTH, out_dim],
                vec![out_dim],
            ],
        }
    }

    pub fn init<T: Scalar>(
        params: &mut ParamSet<T>,
        kind: ReadoutKind,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        seed: u64,
    ) -> Self {
        let mut rng = seeded_rng(seed, 0x4ead);
        let slots = Self::layer_names(kind)
            .iter()
            .zip(Self::shapes(kind, in_dim, out_dim))
            .map(|(name, shape)| params.insert(name, init_tensor(name, &shape, std, &mut rng)))
            .collect();
        Self {
            kind,
            in_dim,
            out_dim,
            slots,
        }
    }

    pub fn bind<T: Scalar>(params: &ParamSet<T>, kind: ReadoutKind, in_dim: usize, out_dim: usize) -> Result<Self> {
        let mut slots = Vec::new();
        for (name, shape) in Self::layer_names(kind).iter().zip(Self::shapes(kind, in_dim, out_dim)) {
            let slot = params
                .index_of(name)
                .ok_or_else(|| ObjectiveError::Config(format!("missing parameter {name}")))?;
            if params.value(slot).shape() != shape.as_slice() {
                return Err(ObjectiveError::Config(format!("parameter {name} has the wrong shape")));
            }
            slots.push(slot);
        }
        Ok(Self {
            kind,
            in_dim,
            out_dim,
            slots,
        })
    }

    /// `[rows, in_dim] -> [rows, out_dim]` inside a graph.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
        let s = &self.slots;
        let mut h = x;
        if self.kind == ReadoutKind::Mlp {
            h = g.matmul(h, ids[s[0]], false)?;
            h = g.add_bias(h, ids[s[1]])?;
            h = g.gelu(h)?;
        }
        let (w, b) = (s[s.len() - 2], s[s.len() - 1]);
        let out = g.matmul(h, ids[w], false)?;
        Ok(g.add_bias(out, ids[b])?)
    }

    /// Multiply-adds times two for `rows` inputs.
    pub fn flops(&self, rows: usize) -> u64 {
        readout_flops(self.kind, self.in_dim, self.out_dim, rows)
    }
}

/// FLOPs (two per multiply-add) of a readout applied to `rows` inputs.
pub fn readout_flops(kind: ReadoutKind, in_dim: usize, out_dim: usize, rows: usize) -> u64 {
    let r = rows as u64;
    match kind {
        ReadoutKind::Linear => 2 * r * (in_dim * out_dim) as u64,
        ReadoutKind::Mlp => 2 * r * (in_dim * MLP_READOUT_WIDTH + MLP_READOUT_WIDTH * out_dim) as u64,
    }
}

/// Readout logits `[pairs.len(), out_dim]` for one sequence's head scores.
pub fn relpos_logits<T: Scalar>(
    scores: &HeadScores<T>,
    readout: &ReadoutHead,
    params: &ParamSet<T>,
    pairs: &[usize],
) -> Result<Tensor<T>> {
    let nh = scores.num_heads();
    if nh != readout.in_dim {
        return Err(ObjectiveError::Contract(format!(
            "readout expects {} heads, scores carry {nh}",
            readout.in_dim
        )));
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.values().iter().map(|t| g.constant(t.clone())).collect();
    let k = scores.seq_len();
    let rows = scores.scores.clone().reshape(&[k * k, nh])?;
    let x = g.constant(rows);
    let x = g.gather_rows(x, pairs.to_vec())?;
    let out = readout.forward(&mut g, &ids, x)?;
    Ok(g.value(out).clone())
}

/// Mean cross-entropy of per-pair logits `[pairs.len(), C]` against the
/// objective's targets.
pub fn variant_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &RelPosLabels,
    pairs: &[usize],
    objective: Objective,
) -> Result<T> {
    if pairs.is_empty() {
        return Err(ObjectiveError::SkipBatch);
    }
    let targets = pair_targets(labels, pairs, objective);
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, &targets)?;
    Ok(g.value(loss).item())
}

// ── Batch losses ──────────────────────────────────────────────────────────

/// An objective with its corruption rate and (for position objectives) its
/// readout head.
#[derive(Debug, Clone)]
pub struct Task {
    pub objective: Objective,
    pub rate: f64,
    pub readout: Option<ReadoutHead>,
}

/// Loss node plus what was predicted, for metrics.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: NodeId,
    /// `[num_labels, classes]`
    pub logits: NodeId,
    pub targets: Vec<usize>,
    pub num_labels: usize,
}

/// Seed of the corruption plan for row `row` of the batch drawn under
/// `batch_seed`.
pub fn plan_seed(batch_seed: u64, row: usize) -> u64 {
    mix_seed(batch_seed, row as u64)
}

impl Task {
    /// Attach a task head for `objective` (none for MLM, which reuses the
    /// target embeddings).
    pub fn init<T: Scalar>(
        objective: Objective,
        rate: f64,
        readout: ReadoutKind,
        model: &TransformerModel,
        params: &mut ParamSet<T>,
        seed: u64,
    ) -> Result<Self> {
        Self::validate_rate(objective, rate)?;
        let cfg = model.config();
        let readout = objective.is_positional().then(|| {
            ReadoutHead::init(
                params,
                readout,
                cfg.num_heads,
                Self::readout_classes(objective, cfg.num_relpos_classes()),
                cfg.init_std,
                seed,
            )
        });
        Ok(Self {
            objective,
            rate,
            readout,
        })
    }

    pub fn bind<T: Scalar>(
        objective: Objective,
        rate: f64,
        readout: ReadoutKind,
        model: &TransformerModel,
        params: &ParamSet<T>,
    ) -> Result<Self> {
        Self::validate_rate(objective, rate)?;
        let cfg = model.config();
        let readout = if objective.is_positional() {
            Some(ReadoutHead::bind(
                params,
                readout,
                cfg.num_heads,
                Self::readout_classes(objective, cfg.num_relpos_classes()),
            )?)
        } else {
            None
        };
        Ok(Self {
            objective,
            rate,
            readout,
        })
    }

    fn readout_classes(objective: Objective, n_p: usize) -> usize {
        if objective == Objective::PplmBinary {
            2
        } else {
            n_p
        }
    }

    fn validate_rate(objective: Objective, rate: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(ObjectiveError::Config(format!("corruption rate {rate} outside [0, 1]")));
        }
        if objective == Objective::Mlm && rate == 0.0 {
            return Err(ObjectiveError::Config("masked-token objective needs a rate above 0".into()));
        }
        Ok(())
    }

    /// One corruption plan per row of a batch.
    pub fn plans(&self, batch_size: usize, seq_len: usize, batch_seed: u64) -> Vec<CorruptionPlan> {
        (0..batch_size)
            .map(|r| sample_corruption(seq_len, self.rate, self.objective.corruption_mode(), plan_seed(batch_seed, r)))
            .collect()
    }

    /// Record the forward pass and loss for `batch` under `plans`.
    #[allow(clippy::too_many_arguments)]
    pub fn build_loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ids: &[NodeId],
        model: &TransformerModel,
        batch: &SequenceBatch,
        plans: &[CorruptionPlan],
        mode: Mode,
    ) -> Result<BatchLoss> {
        let (b, k) = (batch.batch_size, batch.seq_len);
        let cfg = model.config();
        match self.objective {
            Objective::Mlm => {
                let mut corrupted = batch.clone();
                let mut rows = Vec::new();
                let mut targets = Vec::new();
                for (r, plan) in plans.iter().enumerate() {
                    for &t in &plan.token_mask_targets {
                        let flat = r * k + t;
                        targets.push(batch.token_ids[flat] as usize);
                        corrupted.token_ids[flat] = MASK;
                        rows.push(flat);
                    }
                }
                if rows.is_empty() {
                    return Err(ObjectiveError::SkipBatch);
                }
                // Positions stay uncorrupted for the token objective.
                let clean: Vec<CorruptionPlan> = (0..b).map(|_| CorruptionPlan::identity(k)).collect();
                let x = model.embed(g, ids, &corrupted, &clean)?;
                let out = model.forward(g, ids, x, mode)?;
                let flat = g.reshape(out.hidden, &[b * k, cfg.hidden_size])?;
                let sel = g.gather_rows(flat, rows)?;
                let logits = model.vocab_logits_node(g, ids, sel)?;
                let loss = g.cross_entropy(logits, &targets)?;
                Ok(BatchLoss {
                    loss,
                    logits,
                    num_labels: targets.len(),
                    targets,
                })
            }
            objective => {
                let readout = self
                    .readout
                    .as_ref()
                    .ok_or_else(|| ObjectiveError::Contract("position objective without readout".into()))?;
                let mut rows = Vec::new();
                let mut targets = Vec::new();
                for (r, plan) in plans.iter().enumerate() {
                    let pairs = match select_pairs(plan, objective) {
                        Ok(p) => p,
                        Err(ObjectiveError::SkipBatch) => continue,
                        Err(e) => return Err(e),
                    };
                    let labels = rel_pos_labels(k, cfg.max_positions, plan)?;
                    targets.extend(pair_targets(&labels, &pairs, objective));
                    rows.extend(pairs.iter().map(|&p| r * k * k + p));
                }
                if rows.is_empty() {
                    return Err(ObjectiveError::SkipBatch);
                }
                let x = model.embed(g, ids, batch, plans)?;
                let out = model.forward(g, ids, x, mode)?;
                let nh = cfg.num_heads;
                let s = g.permute(out.head_scores, &[0, 2, 3, 1])?;
                let s = g.reshape(s, &[b * k * k, nh])?;
                let s = g.gather_rows(s, rows)?;
                let logits = readout.forward(g, ids, s)?;
                let loss = g.cross_entropy(logits, &targets)?;
                Ok(BatchLoss {
                    loss,
                    logits,
                    num_labels: targets.len(),
                    targets,
                })
            }
        }
    }
}

/// Masked-token loss of `batch` (value only), with plans drawn from `seed`.
pub fn mlm_loss<T: Scalar>(
    batch: &SequenceBatch,
    model: &TransformerModel,
    params: &ParamSet<T>,
    rate: f64,
    seed: u64,
) -> Result<T> {
    let task = Task::bind(Objective::Mlm, rate, ReadoutKind::Linear, model, params)?;
    let plans = task.plans(batch.batch_size, batch.seq_len, seed);
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.values().iter().map(|t| g.constant(t.clone())).collect();
    let out = task.build_loss(&mut g, &ids, model, batch, &plans, Mode::Eval)?;
    Ok(g.value(out.loss).item())
}
