//! Pre-norm transformer encoder with corruptible absolute positions, the
//! last layer's per-pair head scores, and the vocabulary output head.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SequenceBatch;
use crate::objectives::{CorruptionMode, CorruptionPlan};
use crate::params::ParamSet;
use crate::seeded_rng;
use crate::tensor::{matmul_into, Graph, NodeId, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("non-finite activation in layer {layer}: {source}")]
    Numeric {
        layer: usize,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_heads: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub attention_dropout: f64,
    pub hidden_dropout: f64,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_ln_eps() -> f64 {
    1e-5
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    /// Hyperparameters of the published 12-layer runs.
    pub fn paper() -> Self {
        Self {
            num_layers: 12,
            hidden_size: 256,
            intermediate_size: 1024,
            num_heads: 16,
            max_positions: 128,
            vocab_size: 50265,
            attention_dropout: 0.1,
            hidden_dropout: 0.1,
            layer_norm_eps: default_ln_eps(),
            init_std: default_init_std(),
        }
    }

    /// Two-layer CPU configuration.
    pub fn desk(vocab_size: usize, max_positions: usize) -> Self {
        Self {
            num_layers: 2,
            hidden_size: 64,
            intermediate_size: 256,
            num_heads: 8,
            max_positions,
            vocab_size,
            attention_dropout: 0.1,
            hidden_dropout: 0.1,
            layer_norm_eps: default_ln_eps(),
            init_std: default_init_std(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads) {
            return fail(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden_size, self.num_heads
            ));
        }
        if self.num_layers == 0 || self.intermediate_size == 0 || self.max_positions == 0 {
            return fail("layers, intermediate size and max positions must be positive".into());
        }
        if self.vocab_size <= crate::corpus::NUM_SPECIALS {
            return fail(format!("vocab size {} is too small", self.vocab_size));
        }
        for p in [self.attention_dropout, self.hidden_dropout] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("dropout {p} outside [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Number of signed offsets in `-(L-1)..=(L-1)`.
    pub fn num_relpos_classes(&self) -> usize {
        2 * self.max_positions - 1
    }

    /// Named parameter shapes in registration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, i, v, l) = (self.hidden_size, self.intermediate_size, self.vocab_size, self.max_positions);
        let mut out = vec![
            ("token_embeddings".to_string(), vec![v, h]),
            ("position_embeddings".to_string(), vec![l, h]),
            ("mask_position_embedding".to_string(), vec![h]),
        ];
        for n in 0..self.num_layers {
            for (name, shape) in [
                ("ln1.gamma", vec![h]),
                ("ln1.beta", vec![h]),
                ("attn.w_q", vec![h, h]),
                ("attn.w_k", vec![h, h]),
                ("attn.w_v", vec![h, h]),
                ("attn.b_v", vec![h]),
                ("attn.w_o", vec![h, h]),
                ("attn.b_o", vec![h]),
                ("ln2.gamma", vec![h]),
                ("ln2.beta", vec![h]),
                ("ffn.w_1", vec![h, i]),
                ("ffn.b_1", vec![i]),
                ("ffn.w_2", vec![i, h]),
                ("ffn.b_2", vec![h]),
            ] {
                out.push((format!("layers.{n}.{name}"), shape));
            }
        }
        out.push(("final_ln.gamma".to_string(), vec![h]));
        out.push(("final_ln.beta".to_string(), vec![h]));
        out.push(("target_embeddings".to_string(), vec![v, h]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Parameter initializer: `N(0, std)` for matrices and embeddings, zero for
/// biases and layer-norm shifts, one for layer-norm scales.
pub(crate) fn init_tensor<T: Scalar, R: Rng>(name: &str, shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    if name.ends_with("gamma") {
        return Tensor::full(shape, T::one());
    }
    if name.ends_with("beta") || name.contains(".b_") || name.ends_with(".bias") {
        return Tensor::zeros(shape);
    }
    let normal = Normal::new(0.0, std).expect("std is positive");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

#[derive(Debug, Clone, Copy)]
struct LayerSlots {
    ln1_g: usize,
    ln1_b: usize,
    w_q: usize,
    w_k: usize,
    w_v: usize,
    b_v: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_1: usize,
    b_1: usize,
    w_2: usize,
    b_2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    token_emb: usize,
    pos_emb: usize,
    mask_pos: usize,
    layers: Vec<LayerSlots>,
    final_g: usize,
    final_b: usize,
    target_emb: usize,
}

impl Layout {
    fn resolve<T: Scalar>(cfg: &ModelConfig, params: &ParamSet<T>) -> Result<Self> {
        for (name, shape) in cfg.param_shapes() {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::Config(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(ModelError::Config(format!("missing parameter {name}"))),
            }
        }
        let idx = |n: &str| params.index_of(n).expect("checked above");
        let layers = (0..cfg.num_layers)
            .map(|n| {
                let f = |s: &str| idx(&format!("layers.{n}.{s}"));
                LayerSlots {
                    ln1_g: f("ln1.gamma"),
                    ln1_b: f("ln1.beta"),
                    w_q: f("attn.w_q"),
                    w_k: f("attn.w_k"),
                    w_v: f("attn.w_v"),
                    b_v: f("attn.b_v"),
                    w_o: f("attn.w_o"),
                    b_o: f("attn.b_o"),
                    ln2_g: f("ln2.gamma"),
                    ln2_b: f("ln2.beta"),
                    w_1: f("ffn.w_1"),
                    b_1: f("ffn.b_1"),
                    w_2: f("ffn.w_2"),
                    b_2: f("ffn.b_2"),
                }
            })
            .collect();
        Ok(Self {
            token_emb: idx("token_embeddings"),
            pos_emb: idx("position_embeddings"),
            mask_pos: idx("mask_position_embedding"),
            layers,
            final_g: idx("final_ln.gamma"),
            final_b: idx("final_ln.beta"),
            target_emb: idx("target_embeddings"),
        })
    }
}

/// Forward-pass mode. Training applies seeded dropout masks; evaluation is
/// deterministic and dropout-free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

/// Graph handles produced by [`TransformerModel::forward`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Final hidden states `[b, k, h]` after the closing layer norm.
    pub hidden: NodeId,
    /// Unscaled, pre-softmax query·key scores of the last layer,
    /// `[b, n_h, k, k]`.
    pub head_scores: NodeId,
    /// Normalized input of the last attention layer, `[b, k, h]`.
    pub last_attn_input: NodeId,
}

/// The encoder's parameters and their layout.
///
/// The model does not own its parameters: they live in a shared
/// [`ParamSet`] alongside any task heads, so a single optimizer and
/// checkpoint cover everything.
#[derive(Debug, Clone)]
pub struct TransformerModel {
    config: ModelConfig,
    layout: Layout,
}

impl TransformerModel {
    /// Register freshly initialized encoder parameters in `params`.
    pub fn init<T: Scalar>(config: ModelConfig, params: &mut ParamSet<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed, 0x1417);
        for (name, shape) in config.param_shapes() {
            let t = init_tensor(&name, &shape, config.init_std, &mut rng);
            params.insert(&name, t);
        }
        Self::bind(config, params)
    }

    /// Attach to parameters that already exist in `params`.
    pub fn bind<T: Scalar>(config: ModelConfig, params: &ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&config, params)?;
        Ok(Self { config, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Slot `t` receives `token_embeddings[x_t] + P(t)`, where `P(t)` is the
    /// original position, the shared mask embedding, or the position the
    /// plan's permutation assigns to it.
    pub fn embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ids: &[NodeId],
        batch: &SequenceBatch,
        plans: &[CorruptionPlan],
    ) -> Result<NodeId> {
        let (b, k, h) = (batch.batch_size, batch.seq_len, self.config.hidden_size);
        let l = self.config.max_positions;
        if plans.len() != b {
            return Err(ModelError::Contract(format!("{} plans for a batch of {b}", plans.len())));
        }
        if k > l {
            return Err(ModelError::Contract(format!("sequence length {k} exceeds max positions {l}")));
        }
        let mut pos_idx = Vec::with_capacity(b * k);
        for plan in plans {
            if plan.seq_len != k {
                return Err(ModelError::Contract(format!(
                    "plan length {} does not match sequence length {k}",
                    plan.seq_len
                )));
            }
            pos_idx.extend(position_slots(plan, l));
        }
        if let Some(&bad) = batch.token_ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::Contract(format!("token id {bad} outside vocab")));
        }
        let tok_ids: Vec<usize> = batch.token_ids.iter().map(|&t| t as usize).collect();
        let tok = g.gather_rows(ids[self.layout.token_emb], tok_ids)?;
        let mask = g.reshape(ids[self.layout.mask_pos], &[1, h])?;
        let table = g.concat_rows(ids[self.layout.pos_emb], mask)?;
        let pos = g.gather_rows(table, pos_idx)?;
        let x = g.add(tok, pos)?;
        Ok(g.reshape(x, &[b, k, h])?)
    }

    /// Run the encoder stack over embedded input `[b, k, h]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ids: &[NodeId], x: NodeId, mode: Mode) -> Result<ForwardOutput> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.config.hidden_size {
            return Err(ModelError::Contract(format!("forward expects [b, k, h], got {shape:?}")));
        }
        let mut drop = Dropout::new(mode);
        let mut x = drop.apply(g, x, self.config.hidden_dropout)?;
        let mut out = None;
        for (n, slots) in self.layout.layers.iter().enumerate() {
            let wrap = |source| ModelError::Numeric { layer: n, source };
            let (nx, scores, attn_in) = self.layer(g, ids, slots, x, &mut drop).map_err(wrap)?;
            x = nx;
            out = Some((scores, attn_in));
        }
        let (head_scores, last_attn_input) = out.expect("at least one layer");
        let last = self.config.num_layers;
        let hidden = g
            .layer_norm(
                x,
                ids[self.layout.final_g],
                ids[self.layout.final_b],
                self.config.layer_norm_eps,
            )
            .map_err(|source| ModelError::Numeric { layer: last, source })?;
        Ok(ForwardOutput {
            hidden,
            head_scores,
            last_attn_input,
        })
    }

    fn layer<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ids: &[NodeId],
        s: &LayerSlots,
        x: NodeId,
        drop: &mut Dropout,
    ) -> std::result::Result<(NodeId, NodeId, NodeId), TensorError> {
        let cfg = &self.config;
        let shape = g.shape(x).to_vec();
        let (b, k, h) = (shape[0], shape[1], shape[2]);
        let (nh, dh) = (cfg.num_heads, cfg.head_dim());
        let eps = cfg.layer_norm_eps;

        let a = g.layer_norm(x, ids[s.ln1_g], ids[s.ln1_b], eps)?;
        let split = |g: &mut Graph<T>, t: NodeId| -> std::result::Result<NodeId, TensorError> {
            let t = g.reshape(t, &[b, k, nh, dh])?;
            g.permute(t, &[0, 2, 1, 3])
        };
        let q = g.matmul(a, ids[s.w_q], false)?;
        let q = split(g, q)?;
        let kk = g.matmul(a, ids[s.w_k], false)?;
        let kk = split(g, kk)?;
        let v = g.matmul(a, ids[s.w_v], false)?;
        let v = g.add_bias(v, ids[s.b_v])?;
        let v = split(g, v)?;

        let scores = g.matmul(q, kk, true)?;
        let scaled = g.scale(scores, T::of(1.0 / (dh as f64).sqrt()))?;
        let probs = g.softmax(scaled)?;
        let probs = drop.apply(g, probs, cfg.attention_dropout)?;
        let ctx = g.matmul(probs, v, false)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, k, h])?;
        let o = g.matmul(ctx, ids[s.w_o], false)?;
        let o = g.add_bias(o, ids[s.b_o])?;
        let o = drop.apply(g, o, cfg.hidden_dropout)?;
        let x = g.add(x, o)?;

        let f = g.layer_norm(x, ids[s.ln2_g], ids[s.ln2_b], eps)?;
        let f = g.matmul(f, ids[s.w_1], false)?;
        let f = g.add_bias(f, ids[s.b_1])?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, ids[s.w_2], false)?;
        let f = g.add_bias(f, ids[s.b_2])?;
        let f = drop.apply(g, f, cfg.hidden_dropout)?;
        let x = g.add(x, f)?;
        Ok((x, scores, a))
    }

    /// Vocabulary logits `e_T(v)ᵀ·hidden` for rows of `hidden` viewed as
    /// `[rows, h]`; output `[rows, |V|]`.
    pub fn vocab_logits_node<T: Scalar>(&self, g: &mut Graph<T>, ids: &[NodeId], hidden_rows: NodeId) -> Result<NodeId> {
        Ok(g.matmul(hidden_rows, ids[self.layout.target_emb], true)?)
    }

    /// Index of the target embedding table inside the parameter set.
    pub fn target_embeddings_slot(&self) -> usize {
        self.layout.target_emb
    }

    /// Query and key weights of the last layer.
    pub fn last_layer_qk<'a, T: Scalar>(&self, params: &'a ParamSet<T>) -> (&'a Tensor<T>, &'a Tensor<T>) {
        let s = self.layout.layers.last().expect("at least one layer");
        (params.value(s.w_q), params.value(s.w_k))
    }
}

/// Position-table row for each slot: `L` selects the mask embedding that is
/// appended after the `L` position rows.
fn position_slots(plan: &CorruptionPlan, max_positions: usize) -> Vec<usize> {
    let mut masked = vec![false; plan.seq_len];
    if plan.mode == CorruptionMode::Mask {
        for &t in &plan.selected {
            masked[t] = true;
        }
    }
    (0..plan.seq_len)
        .map(|t| if masked[t] { max_positions } else { plan.pi[t] })
        .collect()
}

struct Dropout {
    mode: Mode,
    calls: u64,
}

impl Dropout {
    fn new(mode: Mode) -> Self {
        Self { mode, calls: 0 }
    }

    fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: NodeId, p: f64) -> std::result::Result<NodeId, TensorError> {
        let Mode::Train { seed } = self.mode else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        self.calls += 1;
        let mut rng = seeded_rng(seed, 0xd0d0_0000 + self.calls);
        let keep = T::of(1.0 / (1.0 - p));
        let mask = (0..g.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        g.dropout(x, mask)
    }
}

/// `[k, k, n_h]` scores of one sequence: entry `(i, j, l)` is head `l`'s
/// unscaled query·key product for the pair `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadScores<T> {
    pub scores: Tensor<T>,
}

impl<T: Scalar> HeadScores<T> {
    /// Extract sequence `b` from a `[batch, n_h, k, k]` score tensor.
    pub fn from_batched(scores: &Tensor<T>, b: usize) -> Self {
        let s = scores.shape();
        let (nh, k) = (s[1], s[2]);
        let src = scores.data();
        let mut out = vec![T::zero(); k * k * nh];
        for l in 0..nh {
            for i in 0..k {
                for j in 0..k {
                    out[(i * k + j) * nh + l] = src[((b * nh + l) * k + i) * k + j];
                }
            }
        }
        Self {
            scores: Tensor::new(vec![k, k, nh], out).expect("shape matches"),
        }
    }

    pub fn seq_len(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn num_heads(&self) -> usize {
        self.scores.shape()[2]
    }

    pub fn pair(&self, i: usize, j: usize) -> &[T] {
        let (k, nh) = (self.seq_len(), self.num_heads());
        &self.scores.data()[(i * k + j) * nh..(i * k + j + 1) * nh]
    }
}

/// Direct evaluation of `(F_i W_q^l)ᵀ (F_j W_k^l)` for every pair and head,
/// where `W^l` is the `l`-th column block of width `h / n_h`.
pub fn pair_head_scores<T: Scalar>(
    features: &Tensor<T>,
    w_q: &Tensor<T>,
    w_k: &Tensor<T>,
    num_heads: usize,
) -> Result<HeadScores<T>> {
    let (k, h) = (features.shape()[0], features.shape()[1]);
    if w_q.shape() != [h, h] || w_k.shape() != [h, h] || h % num_heads != 0 {
        return Err(ModelError::Contract(format!(
            "pair_head_scores: features {:?}, w_q {:?}, w_k {:?}, heads {num_heads}",
            features.shape(),
            w_q.shape(),
            w_k.shape()
        )));
    }
    let dh = h / num_heads;
    let mut q = vec![T::zero(); k * h];
    let mut key = vec![T::zero(); k * h];
    matmul_into(k, h, h, features.data(), false, w_q.data(), false, &mut q);
    matmul_into(k, h, h, features.data(), false, w_k.data(), false, &mut key);
    let mut out = vec![T::zero(); k * k * num_heads];
    for i in 0..k {
        for j in 0..k {
            for l in 0..num_heads {
                let mut s = T::zero();
                for d in l * dh..(l + 1) * dh {
                    s += q[i * h + d] * key[j * h + d];
                }
                out[(i * k + j) * num_heads + l] = s;
            }
        }
    }
    Ok(HeadScores {
        scores: Tensor::new(vec![k, k, num_heads], out)?,
    })
}

/// `logits[v] = e_T(v)ᵀ · hidden` for one hidden vector.
pub fn vocab_logits<T: Scalar>(hidden: &[T], target_embeddings: &Tensor<T>) -> Result<Tensor<T>> {
    let s = target_embeddings.shape();
    if s.len() != 2 || s[1] != hidden.len() {
        return Err(ModelError::Contract(format!(
            "hidden size {} does not match target embeddings {s:?}",
            hidden.len()
        )));
    }
    let mut out = vec![T::zero(); s[0]];
    matmul_into(s[0], s[1], 1, target_embeddings.data(), false, hidden, false, &mut out);
    Ok(Tensor::new(vec![s[0]], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax_rows;

    #[test]
    fn paper_preset_matches_published_hyperparameters() {
        let c = ModelConfig::paper();
        assert_eq!(c.vocab_size, 50265);
        assert_eq!(c.num_layers, 12);
        assert_eq!(c.hidden_size, 256);
        assert_eq!(c.intermediate_size, 1024);
        assert_eq!(c.max_positions, 128);
        assert_eq!(c.num_heads, 16);
        assert_eq!(c.attention_dropout, 0.1);
        assert_eq!(c.hidden_dropout, 0.1);
        assert_eq!(c.num_relpos_classes(), 255);
        c.validate().unwrap();
    }

    #[test]
    fn paper_preset_parameter_count() {
        // 2·V·h (input and target tables) + L·h + h (mask) + 2h (final norm)
        // + per layer 4h² + 2·h·I + 7h + I
        let (v, h, l, i, n) = (50265usize, 256usize, 128usize, 1024usize, 12usize);
        let per_layer = 4 * h * h + 2 * h * i + 7 * h + i;
        let want = 2 * v * h + l * h + h + 2 * h + n * per_layer;
        assert_eq!(want, 35_240_192);
        assert_eq!(ModelConfig::paper().param_count(), want);
    }

    #[test]
    fn heads_must_divide_hidden() {
        let mut c = ModelConfig::desk(100, 16);
        c.num_heads = 3;
        assert!(matches!(c.validate(), Err(ModelError::Config(_))));
    }

    #[test]
    fn hand_computed_head_score() {
        let f = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let eye = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = pair_head_scores(&f, &eye, &eye, 1).unwrap();
        assert_eq!(s.pair(0, 1), &[0.0]);
        assert_eq!(s.pair(0, 0), &[1.0]);
    }

    #[test]
    fn zero_key_weights_zero_scores() {
        let f = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 2.0, -1.0, 0.5, 3.0, 1.0]).unwrap();
        let w = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = pair_head_scores(&f, &w, &Tensor::zeros(&[2, 2]), 2).unwrap();
        assert!(s.scores.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vocab_logits_zero_targets_uniform() {
        let e = Tensor::<f64>::zeros(&[5, 4]);
        let mut l = vocab_logits(&[0.3, -0.2, 1.0, 0.5], &e).unwrap().into_data();
        softmax_rows(&mut l, 5);
        assert!(l.iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn vocab_logits_argmax_aligned() {
        let mut e = Tensor::<f64>::zeros(&[4, 4]);
        for v in 0..4 {
            e.data_mut()[v * 4 + v] = 1.0;
        }
        let l = vocab_logits(&[0.0, 0.0, 2.0, 0.0], &e).unwrap();
        let argmax = (0..4).max_by(|&a, &b| l.data()[a].total_cmp(&l.data()[b])).unwrap();
        assert_eq!(argmax, 2);
    }
}
