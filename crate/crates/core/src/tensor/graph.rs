use super::kernels::{log_sum_exp, matmul_acc, matmul_into, softmax_row};
use super::{Result, Scalar, Tensor, TensorError};
use crate::exec;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

// Each variant carries whatever the backward rule needs beyond the input and
// output values already stored on the tape.
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
        batched: bool,
    },
    Gelu(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    ConcatRows(NodeId, NodeId),
    Reshape(NodeId),
    Permute {
        x: NodeId,
        axes: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(NodeId),
    Mean(NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A tape of tensor operations recorded in topological order.
///
/// Forward values are computed eagerly as operations are added;
/// [`Graph::backward`] walks the tape in exact reverse order and accumulates
/// contributions from every path by addition.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar root with respect to every leaf that requested one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn finite<T: Scalar>(op: &'static str, t: Tensor<T>) -> Result<Tensor<T>> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

fn permuted_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    axes.iter().map(|&a| shape[a]).collect()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gather `src` (with `shape`) into the layout given by `axes`.
fn permute_data<T: Scalar>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let out_shape = permuted_shape(shape, axes);
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![T::zero(); src.len()];
    let rank = out_shape.len();
    if rank == 0 || src.is_empty() {
        out.copy_from_slice(src);
        return out;
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    exec::rows_mut(&mut out, inner, |row, dst| {
        // Decompose the row index over all but the last output axis.
        let mut rem = row;
        let mut base = 0;
        for ax in (0..rank - 1).rev() {
            let i = rem % out_shape[ax];
            rem /= out_shape[ax];
            base += i * src_strides[ax];
        }
        for (j, d) in dst.iter_mut().enumerate() {
            *d = src[base + j * inner_stride];
        }
    });
    out
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable leaf whose gradient [`Graph::backward`] reports.
    pub fn param(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = finite("add", Tensor::new(va.shape().to_vec(), data)?)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// `x + bias` with `bias` broadcast over every leading index of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.rank() != 1 || vx.last_dim() != vb.len() {
            return Err(shape_err("add_bias", vx.shape(), vb.shape()));
        }
        let mut data = vx.data().to_vec();
        let b = vb.data();
        exec::rows_mut(&mut data, b.len(), |_, row| {
            row.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb)
        });
        let out = finite("add_bias", Tensor::new(vx.shape().to_vec(), data)?)?;
        let ng = self.ng(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = finite("mul", Tensor::new(va.shape().to_vec(), data)?)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * c).collect();
        let out = finite("scale", Tensor::new(vx.shape().to_vec(), data)?)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Scale(x, c), ng))
    }

    /// Matrix product. A rank-2 `b` is shared across all leading indices of
    /// `a`; a higher-rank `b` must carry the same leading (batch) dimensions.
    /// With `trans_b`, the last two axes of `b` are read transposed.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let err = || shape_err("matmul", sa, sb);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let k = sa[sa.len() - 1];
        let (bk, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != bk {
            return Err(err());
        }
        let batched = sb.len() > 2;
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut data = vec![T::zero(); out_shape.iter().product()];
        if batched {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(err());
            }
            let m = sa[sa.len() - 2];
            let (ad, bd) = (va.data(), vb.data());
            exec::rows_mut(&mut data, m * n, |bi, c| {
                let a_s = &ad[bi * m * k..(bi + 1) * m * k];
                let b_s = &bd[bi * k * n..(bi + 1) * k * n];
                matmul_into(m, k, n, a_s, false, b_s, trans_b, c);
            });
        } else {
            let rows = va.rows();
            matmul_into(rows, k, n, va.data(), false, vb.data(), trans_b, &mut data);
        }
        let out = finite("matmul", Tensor::new(out_shape, data)?)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            out,
            Op::MatMul {
                a,
                b,
                trans_b,
                batched,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu(v)).collect();
        let out = finite("gelu", Tensor::new(vx.shape().to_vec(), data)?)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Gelu(x), ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let n = vx.last_dim();
        if n == 0 {
            return Err(TensorError::Contract("softmax over an empty axis".into()));
        }
        let mut data = vx.data().to_vec();
        exec::rows_mut(&mut data, n, |_, row| softmax_row(row));
        let out = finite("softmax", Tensor::new(vx.shape().to_vec(), data)?)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = vx.last_dim();
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(shape_err("layer_norm", vx.shape(), vg.shape()));
        }
        let rows = vx.rows();
        let mut data = vx.data().to_vec();
        let mut rstd = vec![T::zero(); rows];
        let mut xhat = data.clone();
        let (g, b) = (vg.data(), vb.data());
        let eps = T::of(eps);
        let inv_d = T::one() / T::of(d as f64);
        exec::rows2_mut(&mut xhat, d, &mut rstd, 1, |_, row, rs| {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rs[0] = r;
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
        });
        exec::rows_mut(&mut data, d, |r, row| {
            let xh = &xhat[r * d..(r + 1) * d];
            for i in 0..d {
                row[i] = xh[i] * g[i] + b[i];
            }
        });
        let out = finite("layer_norm", Tensor::new(vx.shape().to_vec(), data)?)?;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Elementwise product with a fixed, pre-scaled keep mask.
    pub fn dropout(&mut self, x: NodeId, mask: Vec<T>) -> Result<NodeId> {
        let vx = self.value(x);
        if mask.len() != vx.len() {
            return Err(shape_err("dropout", vx.shape(), &[mask.len()]));
        }
        let data = vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = finite("dropout", Tensor::new(vx.shape().to_vec(), data)?)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, ng))
    }

    /// Rows of `x` (viewed as `[rows, last_dim]`) selected by `idx`; output
    /// shape `[idx.len(), last_dim]`.
    pub fn gather_rows(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let vx = self.value(x);
        let (rows, d) = (vx.rows(), vx.last_dim());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index {
                op: "gather_rows",
                index: bad,
                bound: rows,
            });
        }
        let src = vx.data();
        let mut data = vec![T::zero(); idx.len() * d];
        exec::rows_mut(&mut data, d, |r, dst| {
            let s = idx[r] * d;
            dst.copy_from_slice(&src[s..s + d]);
        });
        let out = Tensor::new(vec![idx.len(), d], data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::GatherRows { x, idx }, ng))
    }

    /// Stack the rows of two rank-2 tensors with equal widths.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[1] {
            return Err(shape_err("concat_rows", va.shape(), vb.shape()));
        }
        let mut data = va.data().to_vec();
        data.extend_from_slice(vb.data());
        let out = Tensor::new(vec![va.shape()[0] + vb.shape()[0], va.shape()[1]], data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::ConcatRows(a, b), ng))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let vx = self.value(x);
        let mut seen = vec![false; vx.rank()];
        let valid = axes.len() == vx.rank()
            && axes.iter().all(|&a| a < seen.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(shape_err("permute", vx.shape(), axes));
        }
        let data = permute_data(vx.data(), vx.shape(), axes);
        let out = Tensor::new(permuted_shape(vx.shape(), axes), data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(
            out,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            ng,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`. `logits` is viewed
    /// as `[rows, classes]` with one target per row.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let vl = self.value(logits);
        let (rows, c) = (vl.rows(), vl.last_dim());
        if targets.len() != rows || rows == 0 {
            return Err(shape_err("cross_entropy", vl.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: bad,
                bound: c,
            });
        }
        let mut probs = vl.data().to_vec();
        let mut losses = vec![T::zero(); rows];
        exec::rows2_mut(&mut probs, c, &mut losses, 1, |r, row, loss| {
            loss[0] = log_sum_exp(row) - row[targets[r]];
            softmax_row(row);
        });
        // Fixed left-to-right summation keeps the reduction deterministic.
        let total: T = losses.iter().copied().sum();
        let out = finite("cross_entropy", Tensor::scalar(total / T::of(rows as f64)))?;
        let ng = self.ng(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: T = self.value(x).data().iter().copied().sum();
        let out = finite("sum", Tensor::scalar(s))?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Sum(x), ng))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(TensorError::Contract("mean of an empty tensor".into()));
        }
        let s: T = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        let out = finite("mean", Tensor::scalar(s))?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Mean(x), ng))
    }

    /// Reverse-mode sweep from a scalar `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape(), T::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_backward(node, &g, &mut grads);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !(matches!(n.op, Op::Leaf) && n.needs_grad) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn apply_backward(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for id in [a, b] {
                    self.accumulate(grads, *id, |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y));
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y));
                let n = self.value(*bias).len();
                self.accumulate(grads, *bias, |d| {
                    for row in gd.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((x, &y), &w) in d.iter_mut().zip(gd).zip(vb) {
                        *x += y * w;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((x, &y), &w) in d.iter_mut().zip(gd).zip(va) {
                        *x += y * w;
                    }
                });
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y * *c));
            }
            Op::MatMul {
                a,
                b,
                trans_b,
                batched,
            } => self.matmul_backward(*a, *b, *trans_b, *batched, gd, grads),
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for ((o, &y), &v) in d.iter_mut().zip(gd).zip(vx) {
                        *o += y * gelu_grad(v);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                self.accumulate(grads, *x, |d| {
                    exec::rows_mut(d, n, |r, drow| {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &gd[r * n..(r + 1) * n];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            drow[j] += yr[j] * (gr[j] - dot);
                        }
                    })
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => self.layer_norm_backward(*x, *gamma, *beta, xhat, rstd, gd, grads),
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, |d| {
                    for ((o, &y), &m) in d.iter_mut().zip(gd).zip(mask) {
                        *o += y * m;
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let dcols = node.value.last_dim();
                // Scatter-add in index order; duplicate indices accumulate.
                self.accumulate(grads, *x, |d| {
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = &mut d[src * dcols..(src + 1) * dcols];
                        dst.iter_mut()
                            .zip(&gd[r * dcols..(r + 1) * dcols])
                            .for_each(|(o, &y)| *o += y);
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).len();
                self.accumulate(grads, *a, |d| {
                    d.iter_mut().zip(&gd[..na]).for_each(|(o, &y)| *o += y)
                });
                self.accumulate(grads, *b, |d| {
                    d.iter_mut().zip(&gd[na..]).for_each(|(o, &y)| *o += y)
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |d| d.iter_mut().zip(gd).for_each(|(o, &y)| *o += y));
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = permute_data(gd, node.value.shape(), &inverse);
                self.accumulate(grads, *x, |d| d.iter_mut().zip(&back).for_each(|(o, &y)| *o += y));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).last_dim();
                let scale = gd[0] / T::of(targets.len() as f64);
                self.accumulate(grads, *logits, |d| {
                    exec::rows_mut(d, c, |r, drow| {
                        let pr = &probs[r * c..(r + 1) * c];
                        for j in 0..c {
                            drow[j] += pr[j] * scale;
                        }
                        drow[targets[r]] -= scale;
                    })
                });
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|o| *o += s));
            }
            Op::Mean(x) => {
                let s = gd[0] / T::of(self.value(*x).len() as f64);
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|o| *o += s));
            }
        }
    }

    fn accumulate<F: FnOnce(&mut [T])>(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, f: F) {
        let node = &self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        let slot = &mut grads[id.0];
        let g = slot.get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        f(g.data_mut());
    }

    fn matmul_backward(
        &self,
        a: NodeId,
        b: NodeId,
        trans_b: bool,
        batched: bool,
        gd: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (va, vb) = (self.value(a), self.value(b));
        let sa = va.shape();
        let k = sa[sa.len() - 1];
        let sb = vb.shape();
        let n = if trans_b { sb[sb.len() - 2] } else { sb[sb.len() - 1] };
        let (ad, bd) = (va.data(), vb.data());
        if !batched {
            let rows = va.rows();
            // dA = dC · op(B)ᵀ
            self.accumulate(grads, a, |d| matmul_acc(rows, n, k, gd, false, bd, !trans_b, d));
            // dB = Aᵀ · dC, or dCᵀ · A when B is stored transposed
            self.accumulate(grads, b, |d| {
                if trans_b {
                    matmul_acc(n, rows, k, gd, true, ad, false, d)
                } else {
                    matmul_acc(k, rows, n, ad, true, gd, false, d)
                }
            });
            return;
        }
        let m = sa[sa.len() - 2];
        self.accumulate(grads, a, |d| {
            exec::rows_mut(d, m * k, |bi, da| {
                let g = &gd[bi * m * n..(bi + 1) * m * n];
                let bs = &bd[bi * k * n..(bi + 1) * k * n];
                matmul_acc(m, n, k, g, false, bs, !trans_b, da);
            })
        });
        self.accumulate(grads, b, |d| {
            exec::rows_mut(d, k * n, |bi, db| {
                let g = &gd[bi * m * n..(bi + 1) * m * n];
                let as_ = &ad[bi * m * k..(bi + 1) * m * k];
                if trans_b {
                    matmul_acc(n, m, k, g, true, as_, false, db)
                } else {
                    matmul_acc(k, m, n, as_, true, g, false, db)
                }
            })
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_norm_backward(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: &[T],
        rstd: &[T],
        gd: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let d = self.value(x).last_dim();
        let gam = self.value(gamma).data();
        self.accumulate(grads, gamma, |dg| {
            for (r, row) in gd.chunks(d).enumerate() {
                for j in 0..d {
                    dg[j] += row[j] * xhat[r * d + j];
                }
            }
        });
        self.accumulate(grads, beta, |db| {
            for row in gd.chunks(d) {
                db.iter_mut().zip(row).for_each(|(o, &y)| *o += y);
            }
        });
        let inv_d = T::one() / T::of(d as f64);
        self.accumulate(grads, x, |dx| {
            exec::rows_mut(dx, d, |r, drow| {
                let g = &gd[r * d..(r + 1) * d];
                let xh = &xhat[r * d..(r + 1) * d];
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                for j in 0..d {
                    let dxh = g[j] * gam[j];
                    m1 += dxh;
                    m2 += dxh * xh[j];
                }
                m1 *= inv_d;
                m2 *= inv_d;
                for j in 0..d {
                    drow[j] += rstd[r] * (g[j] * gam[j] - m1 - xh[j] * m2);
                }
            })
        });
    }
}
