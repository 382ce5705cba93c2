//! Operation recording and reverse-mode differentiation.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::band::{self, BandImpl, BandProbs, MemoryAccount};
use crate::kernels::dense::{self as k, LayerNormCache};
use crate::params::{ParamId, ParamStore};
use crate::pattern::PatternConfig;
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op<T: Element> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Sum(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: LayerNormCache<T>,
    },
    MaskedSoftmax(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
        total_weight: T,
    },
    GatherRows(NodeId, Vec<usize>),
    ScatterRows {
        base: NodeId,
        rows: NodeId,
        idx: Vec<usize>,
    },
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    SelectCols(NodeId, Vec<usize>),
    Reshape(NodeId),
    Dropout(NodeId, Vec<T>),
    BandQk {
        q: NodeId,
        k: NodeId,
        cfg: PatternConfig,
        imp: BandImpl,
    },
    BandSoftmax {
        scores: NodeId,
        global: Option<NodeId>,
        probs: BandProbs<T>,
    },
    BandPv {
        probs: NodeId,
        v: NodeId,
        vg: Option<NodeId>,
        cfg: PatternConfig,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of operations. Backward visits nodes in exact reverse
/// recording order.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, NodeId>,
    memory: Vec<MemoryAccount>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            memory: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    /// Records an input; gradients flow to it when `t.requires_grad` is set.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor<T>) -> NodeId {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    /// Records a value that receives gradients.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> NodeId {
        t.requires_grad = true;
        self.push(t, Op::Leaf, true)
    }

    /// Records parameter `id` of `store` once per graph.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let t = store.get(id);
        let rg = t.requires_grad;
        let mut value = Tensor::new(t.shape(), t.data().to_vec()).expect("param shape");
        value.requires_grad = rg;
        let n = self.push(value, Op::Leaf, rg);
        self.params.insert(id, n);
        n
    }

    /// Parameters recorded in this graph, with their nodes.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, NodeId)> + '_ {
        self.params.iter().map(|(&p, &n)| (p, n))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Score-element accounts of every band kernel run in this graph.
    pub fn memory_accounts(&self) -> &[MemoryAccount] {
        &self.memory
    }

    pub fn grad(&self, id: NodeId) -> Option<Tensor<T>> {
        let g = self.grads.get(id.0)?.as_ref()?;
        Tensor::new(self.nodes[id.0].value.shape(), g.clone()).ok()
    }

    pub(crate) fn grad_slice(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0)?.as_deref()
    }

    // ---- forward operations -------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, p) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let c = k::matmul(self.value(a).data(), self.value(b).data(), m, ka, p);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, p], c)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).dims2()?;
        let (p, kb) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul_nt inner dimensions differ: {:?} x {:?}ᵀ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let c = k::matmul_nt(self.value(a).data(), self.value(b).data(), m, ka, p);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, p], c)?, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds `bias` (length = last dimension of `x`) to every row of `x`.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let d = self.value(x).last_dim();
        if self.value(bias).numel() != d {
            return Err(Error::Shape(format!(
                "bias {:?} does not match row width {d}",
                self.value(bias).shape()
            )));
        }
        let b = self.value(bias).data();
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|r| r.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let t = Tensor::new(self.value(x).shape(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddRowBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let c = T::from_f64(c);
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.value(a).shape(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| k::gelu(x)).collect();
        let t = Tensor::new(self.value(a).shape(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Normalizes each row over the last axis, then applies `gamma`, `beta`.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let d = self.value(x).last_dim();
        if d == 0 || self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::Shape(format!(
                "layernorm over width {d} with gamma {:?} and beta {:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let (y, cache) = k::layernorm(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            d,
            eps,
        );
        let t = Tensor::new(self.value(x).shape(), y)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, cache }, rg))
    }

    /// Softmax over the last axis; `mask` entries set to false get exactly 0.
    pub fn masked_softmax(&mut self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let v = self.value(x);
        if let Some(m) = mask {
            if m.len() != v.numel() {
                return Err(Error::Shape(format!(
                    "mask has {} entries for a tensor of shape {:?}",
                    m.len(),
                    v.shape()
                )));
            }
        }
        let d = v.last_dim();
        let p = k::masked_softmax_rows(v.data(), mask, d).map_err(|row| Error::FullyMaskedRow { row })?;
        let t = Tensor::new(v.shape(), p)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MaskedSoftmax(x), rg))
    }

    /// Weighted mean negative log-likelihood (nats) of `targets` under
    /// `logits[t, V]`: `Σ w_i·nll_i / Σ w_i`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], weights: Option<&[f64]>) -> Result<NodeId> {
        let (t, v) = self.value(logits).dims2()?;
        if targets.len() != t {
            return Err(Error::Shape(format!("{} targets for {t} logit rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::OutOfRange(format!("target id {bad} outside vocabulary of {v}")));
        }
        let weights: Vec<T> = match weights {
            Some(w) if w.len() != t => {
                return Err(Error::Shape(format!("{} weights for {t} rows", w.len())))
            }
            Some(w) if w.iter().any(|&x| x < 0.0 || !x.is_finite()) => {
                return Err(Error::Data("cross-entropy weights must be finite and >= 0".into()))
            }
            Some(w) => w.iter().map(|&x| T::from_f64(x)).collect(),
            None => vec![T::one(); t],
        };
        let total_weight: T = weights.iter().copied().sum();
        if total_weight <= T::zero() {
            return Err(Error::Data("cross-entropy weights sum to zero".into()));
        }
        let logp = k::log_softmax_rows(self.value(logits).data(), v);
        let mut loss = T::zero();
        for (i, (&tgt, &w)) in targets.iter().zip(&weights).enumerate() {
            if w != T::zero() {
                loss = loss - w * logp[i * v + tgt];
            }
        }
        loss = loss / total_weight;
        let probs = logp.into_iter().map(|x| x.exp()).collect();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
                total_weight,
            },
            rg,
        ))
    }

    /// Rows `idx` of a 2-D tensor (embedding lookup).
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let t = self.value(x).gather_rows(idx)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// Copy of `base` with rows `idx` replaced by the rows of `rows`.
    pub fn scatter_rows(&mut self, base: NodeId, rows: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (n, d) = self.value(base).dims2()?;
        let (g, dr) = self.value(rows).dims2()?;
        if g != idx.len() || d != dr {
            return Err(Error::Shape(format!(
                "scatter of {:?} into {:?} at {} positions",
                self.value(rows).shape(),
                self.value(base).shape(),
                idx.len()
            )));
        }
        let mut seen = vec![false; n];
        for &i in idx {
            if i >= n {
                return Err(Error::OutOfRange(format!("row {i} of {n}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Data(format!("row {i} scattered twice")));
            }
        }
        let mut out = self.value(base).clone();
        out.requires_grad = false;
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.value(rows).row(r));
        }
        let rg = self.rg(&[base, rows]);
        Ok(self.push(
            out,
            Op::ScatterRows {
                base,
                rows,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `[start, start + width)` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let (n, d) = self.value(x).dims2()?;
        if start + width > d {
            return Err(Error::Shape(format!("columns {start}..{} of {d}", start + width)));
        }
        let v = self.value(x);
        let data = (0..n).flat_map(|i| v.row(i)[start..start + width].iter().copied()).collect();
        let t = Tensor::new(&[n, width], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceCols(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let n = match parts.first() {
            Some(&p) => self.value(p).dims2()?.0,
            None => return Err(Error::Shape("concat of zero tensors".into())),
        };
        let mut width = 0;
        for &p in parts {
            let (pn, pd) = self.value(p).dims2()?;
            if pn != n {
                return Err(Error::Shape(format!("concat rows differ: {pn} vs {n}")));
            }
            width += pd;
        }
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(&[n, width], data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `cols` (in that order) of a 2-D tensor.
    pub fn select_cols(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId> {
        let (n, d) = self.value(x).dims2()?;
        if let Some(&c) = cols.iter().find(|&&c| c >= d) {
            return Err(Error::OutOfRange(format!("column {c} of {d}")));
        }
        let v = self.value(x);
        let data = (0..n).flat_map(|i| cols.iter().map(move |&c| v.row(i)[c])).collect();
        let t = Tensor::new(&[n, cols.len()], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SelectCols(x, cols.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = Tensor::new(self.value(x).shape(), self.value(x).data().to_vec())?.reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 − p)`.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, p: f64, rng: &mut R) -> NodeId {
        if p <= 0.0 {
            return x;
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = zip_map(self.value(x).data(), &mask, |a, m| a * m);
        let t = Tensor::new(self.value(x).shape(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Dropout(x, mask), rg)
    }

    /// Banded `QKᵀ/√dk` of one head, in band storage `[n, slots]`.
    pub fn band_qk(&mut self, q: NodeId, kk: NodeId, cfg: &PatternConfig, imp: BandImpl) -> Result<NodeId> {
        let (scores, account) = band::band_qk(imp, self.value(q), self.value(kk), cfg)?;
        self.memory.push(account);
        let rg = self.rg(&[q, kk]);
        Ok(self.push(
            scores.data,
            Op::BandQk {
                q,
                k: kk,
                cfg: cfg.clone(),
                imp,
            },
            rg,
        ))
    }

    /// Joint softmax over band slots `[n, S]` and global columns `[n, G]`.
    /// Returns probabilities `[n, S + G]`.
    pub fn band_softmax(
        &mut self,
        scores: NodeId,
        global: Option<NodeId>,
        cfg: &PatternConfig,
        dedupe: Option<&[bool]>,
    ) -> Result<NodeId> {
        let local = band::BandScores {
            cfg: cfg.clone(),
            data: self.value(scores).clone(),
            valid_mask: band::valid_slots(cfg),
        };
        let probs = band::band_softmax(&local, global.map(|g| self.value(g)), dedupe)?;
        let value = probs.probs.clone();
        let mut ids = vec![scores];
        ids.extend(global);
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::BandSoftmax { scores, global, probs }, rg))
    }

    /// Probability-weighted sum of band values plus global values.
    pub fn band_pv(&mut self, probs: NodeId, v: NodeId, vg: Option<NodeId>, cfg: &PatternConfig) -> Result<NodeId> {
        let out = band::band_pv(self.value(probs), cfg, self.value(v), vg.map(|g| self.value(g)))?;
        let mut ids = vec![probs, v];
        ids.extend(vg);
        let rg = self.rg(&ids);
        Ok(self.push(
            out,
            Op::BandPv {
                probs,
                v,
                vg,
                cfg: cfg.clone(),
            },
            rg,
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Populates gradients of every tracked node with respect to the scalar
    /// `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            self.backward_node(idx, &g)?;
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, id: NodeId, g: Vec<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e = *e + v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&mut self, idx: usize, g: &[T]) -> Result<()> {
        let node = &self.nodes[idx];
        // Gradients are computed against immutable borrows and applied after.
        let mut out: Vec<(NodeId, Vec<T>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, kd) = self.value(*a).dims2()?;
                let p = self.value(*b).last_dim();
                if self.requires_grad(*a) {
                    out.push((*a, k::matmul_nt(g, self.value(*b).data(), m, p, kd)));
                }
                if self.requires_grad(*b) {
                    out.push((*b, k::matmul_tn(self.value(*a).data(), g, m, kd, p)));
                }
            }
            Op::MatMulNt(a, b) => {
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                let (m, kd) = self.value(*a).dims2()?;
                let p = self.value(*b).dims2()?.0;
                if self.requires_grad(*a) {
                    out.push((*a, k::matmul(g, self.value(*b).data(), m, p, kd)));
                }
                if self.requires_grad(*b) {
                    out.push((*b, k::matmul_tn(g, self.value(*a).data(), m, p, kd)));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2()?;
                out.push((*a, k::transpose(g, n, m)));
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::AddRowBias(x, b) => {
                let d = self.value(*x).last_dim();
                out.push((*x, g.to_vec()));
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Mul(a, b) => {
                out.push((*a, zip_map(g, self.value(*b).data(), |x, y| x * y)));
                out.push((*b, zip_map(g, self.value(*a).data(), |x, y| x * y)));
            }
            Op::Scale(a, c) => out.push((*a, g.iter().map(|&x| x * *c).collect())),
            Op::Sum(a) => out.push((*a, vec![g[0]; self.value(*a).numel()])),
            Op::Gelu(a) => {
                let d = zip_map(g, self.value(*a).data(), |gv, x| gv * k::gelu_grad(x));
                out.push((*a, d));
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let d = self.value(*x).last_dim();
                let (dx, dg, db) = k::layernorm_backward(g, self.value(*gamma).data(), cache, d);
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::MaskedSoftmax(x) => {
                let d = node.value.last_dim();
                out.push((*x, k::softmax_rows_backward(node.value.data(), g, d)));
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                total_weight,
            } => {
                let v = self.value(*logits).last_dim();
                let scale = g[0] / *total_weight;
                let mut d = vec![T::zero(); probs.len()];
                for (i, (&tgt, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let f = scale * w;
                    for j in 0..v {
                        d[i * v + j] = f * probs[i * v + j];
                    }
                    d[i * v + tgt] = d[i * v + tgt] - f;
                }
                out.push((*logits, d));
            }
            Op::GatherRows(x, ids) => {
                let d = self.value(*x).last_dim();
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (r, &i) in ids.iter().enumerate() {
                    for (acc, &v) in dx[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *acc = *acc + v;
                    }
                }
                out.push((*x, dx));
            }
            Op::ScatterRows { base, rows, idx: ids } => {
                let d = node.value.last_dim();
                let mut db = g.to_vec();
                let mut dr = Vec::with_capacity(ids.len() * d);
                for &i in ids {
                    dr.extend_from_slice(&g[i * d..(i + 1) * d]);
                    db[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = T::zero());
                }
                out.push((*base, db));
                out.push((*rows, dr));
            }
            Op::SliceCols(x, start) => {
                let (n, d) = self.value(*x).dims2()?;
                let w = node.value.last_dim();
                let mut dx = vec![T::zero(); n * d];
                for i in 0..n {
                    dx[i * d + start..i * d + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                out.push((*x, dx));
            }
            Op::ConcatCols(parts) => {
                let n = node.value.dims2()?.0;
                let width = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let pd = self.value(p).last_dim();
                    let mut dp = Vec::with_capacity(n * pd);
                    for i in 0..n {
                        dp.extend_from_slice(&g[i * width + offset..i * width + offset + pd]);
                    }
                    offset += pd;
                    out.push((p, dp));
                }
            }
            Op::SelectCols(x, cols) => {
                let (n, d) = self.value(*x).dims2()?;
                let w = cols.len();
                let mut dx = vec![T::zero(); n * d];
                for i in 0..n {
                    for (c, &col) in cols.iter().enumerate() {
                        dx[i * d + col] = dx[i * d + col] + g[i * w + c];
                    }
                }
                out.push((*x, dx));
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Dropout(x, mask) => out.push((*x, zip_map(g, mask, |a, m| a * m))),
            Op::BandQk { q, k: kk, cfg, imp } => {
                let (dq, dk) = band::band_qk_backward(*imp, self.value(*q), self.value(*kk), cfg, g)?;
                out.push((*q, dq.into_data()));
                out.push((*kk, dk.into_data()));
            }
            Op::BandSoftmax { scores, global, probs } => {
                let dlogits = band::band_softmax_backward(probs, g);
                let n = probs.probs.dims2()?.0;
                let (s, gc) = (probs.slots, probs.globals);
                let mut ds = Vec::with_capacity(n * s);
                let mut dg = Vec::with_capacity(n * gc);
                for row in dlogits.chunks(s + gc) {
                    ds.extend_from_slice(&row[..s]);
                    dg.extend_from_slice(&row[s..]);
                }
                out.push((*scores, ds));
                if let Some(gl) = global {
                    out.push((*gl, dg));
                }
            }
            Op::BandPv { probs, v, vg, cfg } => {
                let (dp, dv, dvg) = band::band_pv_backward(
                    self.value(*probs),
                    cfg,
                    self.value(*v),
                    vg.map(|x| self.value(x)),
                    g,
                )?;
                out.push((*probs, dp));
                out.push((*v, dv));
                if let Some(x) = vg {
                    out.push((*x, dvg));
                }
            }
        }
        for (id, grad) in out {
            self.acc(id, grad);
        }
        Ok(())
    }
}

fn zip_map<T: Element>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
