//! Tape-based reverse-mode automatic differentiation.
//!
//! Every forward op appends a node holding its output value and whatever
//! activations its gradient rule needs. Nodes are therefore stored in
//! topological order and [`Graph::backward`] walks them once in reverse.

use super::kernels::{gemm, Layout};
use super::{Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op kinds, exposed so tests can target a single gradient rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulBT,
    Add,
    AddBias,
    Mul,
    Scale,
    Relu,
    Softmax,
    LayerNorm,
    Embedding,
    Attention,
    CrossEntropy,
    Dropout,
    Sum,
}

/// Batch geometry for [`Graph::attention`].
///
/// Queries are packed as `[batch * q_len, d]`, keys and values as
/// `[batch * k_len, d]`. `key_mask[b * k_len + j]` marks valid keys.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub n_heads: usize,
    pub key_mask: Vec<bool>,
    /// Query `i` may only see keys `j <= i`.
    pub causal: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulBT {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum {
        x: Var,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::MatMulBT { .. } => OpKind::MatMulBT,
            Op::Add { .. } => OpKind::Add,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Relu { .. } => OpKind::Relu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::Attention { .. } => OpKind::Attention,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Sum { .. } => OpKind::Sum,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::MatMulBT { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Scale { x, .. } | Op::Relu { x } | Op::Softmax { x, .. } | Op::Dropout { x, .. } | Op::Sum { x } => {
                vec![*x]
            }
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// A single forward/backward tape. Confined to one thread.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backpropagated: bool,
    corrupted: Option<OpKind>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fault injection for negative-control gradient checks: the backward
    /// rule of `kind` is scaled by 1.5.
    pub fn corrupt_gradient_rule(&mut self, kind: OpKind) {
        self.corrupted = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward target with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.value(v).shape().to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape matches value"),
            None => Tensor::zeros(shape),
        }
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        if cfg!(debug_assertions) && !matches!(op, Op::Leaf) && !value.is_finite() {
            let inputs_finite = op.inputs().iter().all(|i| self.nodes[i.0].value.is_finite());
            debug_assert!(
                !inputs_finite,
                "{:?} produced a non-finite value from finite inputs",
                op.kind()
            );
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let shape = self.value(v).shape();
        match shape {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::RankMismatch {
                op,
                expected: 2,
                shape: shape.to_vec(),
            }),
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    /// `a[m x k] * b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Normal,
            0.0,
            &mut out,
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul { a, b }, Tensor::new(vec![m, n], out)?, rg))
    }

    /// `a[m x k] * b[n x k]^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a, "matmul_bt")?;
        let (n, k2) = self.dims2(b, "matmul_bt")?;
        if k != k2 {
            return Err(self.mismatch("matmul_bt", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Transposed,
            0.0,
            &mut out,
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::MatMulBT { a, b }, Tensor::new(vec![m, n], out)?, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch("add", a, b));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Add { a, b }, Tensor::new(shape, out)?, rg))
    }

    /// Adds a length-`cols` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let cols = self.value(x).cols();
        if self.value(bias).len() != cols {
            return Err(self.mismatch("add_bias", x, bias));
        }
        let b = self.value(bias).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % cols])
            .collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.needs(&[x, bias]);
        Ok(self.push(Op::AddBias { x, bias }, Tensor::new(shape, out)?, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch("mul", a, b));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Mul { a, b }, Tensor::new(shape, out)?, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x);
        let out = Tensor::new(
            value.shape().to_vec(),
            value.data().iter().map(|v| v * factor).collect(),
        )
        .expect("same shape");
        let rg = self.needs(&[x]);
        self.push(Op::Scale { x, factor }, out, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x);
        let out = Tensor::new(
            value.shape().to_vec(),
            value.data().iter().map(|v| v.max(0.0)).collect(),
        )
        .expect("same shape");
        let rg = self.needs(&[x]);
        self.push(Op::Relu { x }, out, rg)
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let input = self.value(x).data();
        let mut out = vec![0.0; input.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * len * inner + i * inner + j;
                let max = (0..len).map(|i| input[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..len {
                    let e = (input[at(i)] - max).exp();
                    out[at(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[at(i)] /= total;
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Softmax { x, outer, len, inner }, Tensor::new(shape, out)?, rg))
    }

    /// Normalizes each last-axis vector to zero mean and unit variance
    /// (`eps` added to the variance), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let d = self.value(x).cols();
        if d == 0 {
            return Err(TensorError::InvalidShape {
                shape: self.value(x).shape().to_vec(),
                len: 0,
            });
        }
        if self.value(gain).len() != d {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.value(bias).len() != d {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let rows = self.value(x).rows();
        let input = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; input.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; input.len()];
        for r in 0..rows {
            let row = &input[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for c in 0..d {
                let h = (row[c] - mean) * s;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            Tensor::new(shape, out)?,
            rg,
        ))
    }

    /// Gathers rows of a `[vocab x d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (vocab, d) = self.dims2(table, "embedding")?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let rg = self.needs(&[table]);
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            Tensor::new(vec![ids.len(), d], out)?,
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var, TensorError> {
        let (qr, d) = self.dims2(q, "attention")?;
        let (kr, dk) = self.dims2(k, "attention")?;
        let (vr, dv) = self.dims2(v, "attention")?;
        let AttentionLayout {
            batch,
            q_len,
            k_len,
            n_heads,
            ..
        } = layout;
        if qr != batch * q_len || d != dk {
            return Err(self.mismatch("attention", q, k));
        }
        if kr != batch * k_len || vr != kr || dv != d {
            return Err(self.mismatch("attention", k, v));
        }
        if n_heads == 0 || d % n_heads != 0 || layout.key_mask.len() != kr {
            return Err(TensorError::InvalidShape {
                shape: vec![batch, k_len, n_heads],
                len: layout.key_mask.len(),
            });
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![0.0; batch * n_heads * q_len * k_len];
        let mut out = vec![0.0; qr * d];
        let mut scores = vec![0.0; k_len];
        for b in 0..batch {
            for h in 0..n_heads {
                let off = h * dh;
                for i in 0..q_len {
                    let qrow = &qd[(b * q_len + i) * d + off..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..k_len {
                        let visible = layout.key_mask[b * k_len + j] && !(layout.causal && j > i);
                        scores[j] = if visible {
                            let krow = &kd[(b * k_len + j) * d + off..][..dh];
                            let s = scale * dot(qrow, krow);
                            max = max.max(s);
                            s
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let p = &mut probs[((b * n_heads + h) * q_len + i) * k_len..][..k_len];
                    let mut total = 0.0;
                    for j in 0..k_len {
                        let e = if scores[j] == f64::NEG_INFINITY {
                            0.0
                        } else {
                            (scores[j] - max).exp()
                        };
                        p[j] = e;
                        total += e;
                    }
                    let orow = &mut out[(b * q_len + i) * d + off..][..dh];
                    for j in 0..k_len {
                        p[j] /= total;
                        if p[j] != 0.0 {
                            let vrow = &vd[(b * k_len + j) * d + off..][..dh];
                            for c in 0..dh {
                                orow[c] += p[j] * vrow[c];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.needs(&[q, k, v]);
        Ok(self.push(
            Op::Attention { q, k, v, layout, probs },
            Tensor::new(vec![qr, d], out)?,
            rg,
        ))
    }

    /// Mean token-level negative log-likelihood over rows whose target is
    /// `Some`. Errors when no row has a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, TensorError> {
        let (n, vocab) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(TensorError::InvalidShape {
                shape: vec![n, vocab],
                len: targets.len(),
            });
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(TensorError::EmptyTargets);
        }
        let l = self.value(logits).data();
        let mut probs = vec![0.0; n * vocab];
        let mut total = 0.0;
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            if t >= vocab {
                return Err(TensorError::IndexOutOfRange { index: t, bound: vocab });
            }
            let row = &l[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            let mut z = 0.0;
            for (pj, x) in p.iter_mut().zip(row) {
                *pj = (x - max).exp();
                z += *pj;
            }
            p.iter_mut().for_each(|pj| *pj /= z);
            total += z.ln() + max - row[t];
        }
        let loss = total / count as f64;
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    /// Elementwise multiply by a fixed mask (entries 0 or `1/(1-p)`).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var, TensorError> {
        if mask.len() != self.value(x).len() {
            return Err(TensorError::InvalidShape {
                shape: self.value(x).shape().to_vec(),
                len: mask.len(),
            });
        }
        let value = self.value(x);
        let out = Tensor::new(
            value.shape().to_vec(),
            value.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        )?;
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Dropout { x, mask }, out, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Op::Sum { x }, Tensor::scalar(total), rg)
    }

    /// Clears gradient buffers so [`Graph::backward`] may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backpropagated = false;
    }

    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        self.backward_with(loss, 1.0)
    }

    /// Backpropagates from scalar `loss`, seeding its gradient with `seed`.
    pub fn backward_with(&mut self, loss: Var, seed: f64) -> Result<(), TensorError> {
        if self.backpropagated {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        self.backpropagated = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![seed]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            let factor = if self.corrupted == Some(self.nodes[idx].op.kind()) {
                1.5
            } else {
                1.0
            };
            self.propagate(idx, &g, factor);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, g: &[f64], factor: f64) {
        let scaled: Vec<f64>;
        let g = if factor != 1.0 {
            scaled = g.iter().map(|v| v * factor).collect();
            &scaled[..]
        } else {
            g
        };
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let [m, k] = *self.value(a).shape() else { unreachable!() };
                let n = self.value(b).cols();
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        Layout::Normal,
                        self.value(b).data(),
                        Layout::Transposed,
                        0.0,
                        &mut da,
                    );
                    self.accumulate(a, da);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        self.value(a).data(),
                        Layout::Transposed,
                        g,
                        Layout::Normal,
                        0.0,
                        &mut db,
                    );
                    self.accumulate(b, db);
                }
            }
            Op::MatMulBT { a, b } => {
                let (a, b) = (*a, *b);
                let [m, k] = *self.value(a).shape() else { unreachable!() };
                let n = self.value(b).rows();
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        Layout::Normal,
                        self.value(b).data(),
                        Layout::Normal,
                        0.0,
                        &mut da,
                    );
                    self.accumulate(a, da);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; n * k];
                    gemm(
                        n,
                        m,
                        k,
                        g,
                        Layout::Transposed,
                        self.value(a).data(),
                        Layout::Normal,
                        0.0,
                        &mut db,
                    );
                    self.accumulate(b, db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.to_vec());
            }
            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let cols = self.value(bias).len();
                if self.wants(bias) {
                    let mut db = vec![0.0; cols];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % cols] += gv;
                    }
                    self.accumulate(bias, db);
                }
                self.accumulate(x, g.to_vec());
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.wants(a) {
                    let da = g.iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(a, da);
                }
                if self.wants(b) {
                    let db = g.iter().zip(self.value(a).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(b, db);
                }
            }
            Op::Scale { x, factor } => {
                let (x, f) = (*x, *factor);
                self.accumulate(x, g.iter().map(|v| v * f).collect());
            }
            Op::Relu { x } => {
                let x = *x;
                let dx = g
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(x, dx);
            }
            Op::Softmax { x, outer, len, inner } => {
                let (x, outer, len, inner) = (*x, *outer, *len, *inner);
                let y = self.nodes[idx].value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| o * len * inner + i * inner + j;
                        let dotp: f64 = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..len {
                            dx[at(i)] = y[at(i)] * (g[at(i)] - dotp);
                        }
                    }
                }
                self.accumulate(x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = self.value(gain).len();
                let gv = self.value(gain).data();
                let rows = rstd.len();
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dx = vec![0.0; rows * d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..d {
                        dgain[c] += gr[c] * hr[c];
                        dbias[c] += gr[c];
                        let dh = gr[c] * gv[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[c];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for c in 0..d {
                        let dh = gr[c] * gv[c];
                        dx[r * d + c] = rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                    }
                }
                self.accumulate(gain, dgain);
                self.accumulate(bias, dbias);
                self.accumulate(x, dx);
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let [vocab, d] = *self.value(table).shape() else {
                    unreachable!()
                };
                let mut dt = vec![0.0; vocab * d];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += g[r * d + c];
                    }
                }
                self.accumulate(table, dt);
            }
            Op::Attention { q, k, v, layout, probs } => {
                let (q, k, v) = (*q, *k, *v);
                let (dq, dk, dv) = attention_backward(
                    self.value(q).data(),
                    self.value(k).data(),
                    self.value(v).data(),
                    self.value(q).cols(),
                    layout,
                    probs,
                    g,
                );
                self.accumulate(q, dq);
                self.accumulate(k, dk);
                self.accumulate(v, dv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let logits = *logits;
                let vocab = self.value(logits).cols();
                let s = g[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (r, target) in targets.iter().enumerate() {
                    let Some(t) = *target else { continue };
                    for j in 0..vocab {
                        dl[r * vocab + j] = s * probs[r * vocab + j];
                    }
                    dl[r * vocab + t] -= s;
                }
                self.accumulate(logits, dl);
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let dx = g.iter().zip(mask).map(|(a, b)| a * b).collect();
                self.accumulate(x, dx);
            }
            Op::Sum { x } => {
                let x = *x;
                let n = self.value(x).len();
                self.accumulate(x, vec![g[0]; n]);
            }
        }
        self.nodes[idx].op = op;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[allow(clippy::type_complexity)]
fn attention_backward(
    qd: &[f64],
    kd: &[f64],
    vd: &[f64],
    d: usize,
    layout: &AttentionLayout,
    probs: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttentionLayout {
        batch,
        q_len,
        k_len,
        n_heads,
        ..
    } = *layout;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; qd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut dv = vec![0.0; vd.len()];
    let mut dp = vec![0.0; k_len];
    for b in 0..batch {
        for h in 0..n_heads {
            let off = h * dh;
            for i in 0..q_len {
                let p = &probs[((b * n_heads + h) * q_len + i) * k_len..][..k_len];
                let grow = &g[(b * q_len + i) * d + off..][..dh];
                let mut weighted = 0.0;
                for j in 0..k_len {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vrow = &vd[(b * k_len + j) * d + off..][..dh];
                    dp[j] = dot(grow, vrow);
                    weighted += dp[j] * p[j];
                    let dvrow = &mut dv[(b * k_len + j) * d + off..][..dh];
                    for c in 0..dh {
                        dvrow[c] += p[j] * grow[c];
                    }
                }
                let qrow_at = (b * q_len + i) * d + off;
                for j in 0..k_len {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    let krow_at = (b * k_len + j) * d + off;
                    for c in 0..dh {
                        dq[qrow_at + c] += ds * kd[krow_at + c];
                        dk[krow_at + c] += ds * qd[qrow_at + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
