//! Banded attention kernels.
//!
//! Scores are kept in band storage: row `i` holds one column per window slot,
//! and slot `k` maps to key `i + (k − h)·d` (bidirectional) or
//! `i − (h − k)·d` (causal). Three interchangeable implementations compute
//! the banded `QKᵀ/√dk`:
//!
//! * [`BandImpl::Loop`] walks every slot with a dot product. Supports any
//!   dilation; materializes only the valid slots.
//! * [`BandImpl::Chunk`] splits `Q` and `K` into blocks of `2h` rows with
//!   stride `h`, multiplies each block pair densely and reads the band out
//!   of the blocks. Contiguous windows only; about twice the memory of the
//!   loop kernel.
//! * [`BandImpl::Dense`] computes the full `n × n` product and gathers the
//!   band from it. Quadratic memory; used as the reference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::dense::{dot, matmul, matmul_nt, matmul_tn, masked_softmax_rows, softmax_rows_backward};
use crate::pattern::PatternConfig;
use crate::tensor::{Element, Tensor};

/// Largest `n` accepted by [`band_to_dense`].
pub const DENSE_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandImpl {
    Loop,
    Chunk,
    Dense,
}

impl std::str::FromStr for BandImpl {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loop" => Ok(BandImpl::Loop),
            "chunk" | "chunks" => Ok(BandImpl::Chunk),
            "dense" => Ok(BandImpl::Dense),
            other => Err(Error::Config(format!(
                "unknown implementation {other:?} (expected loop, chunk or dense)"
            ))),
        }
    }
}

impl std::fmt::Display for BandImpl {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BandImpl::Loop => "loop",
            BandImpl::Chunk => "chunk",
            BandImpl::Dense => "dense",
        })
    }
}

/// Element accounting of one score computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryAccount {
    #[serde(rename = "impl")]
    pub implementation: BandImpl,
    /// Score values materialized by the kernel.
    pub score_elements: usize,
    /// Largest number of score values alive at once (including the band output).
    pub peak_elements: usize,
}

/// Attention logits in band storage.
#[derive(Debug, Clone, PartialEq)]
pub struct BandScores<T: Element> {
    /// Single-head pattern that produced the scores.
    pub cfg: PatternConfig,
    /// `[n, slots]`; invalid slots hold zero.
    pub data: Tensor<T>,
    /// `[n · slots]`, true where the slot's key lies inside `[0, n)`.
    pub valid_mask: Vec<bool>,
}

impl<T: Element> BandScores<T> {
    pub fn n(&self) -> usize {
        self.cfg.n
    }

    pub fn slots(&self) -> usize {
        self.cfg.window.slots(self.cfg.mode)
    }
}

/// In-range mask of every `(row, slot)` of `cfg`.
pub fn valid_slots(cfg: &PatternConfig) -> Vec<bool> {
    let s = cfg.window.slots(cfg.mode);
    (0..cfg.n)
        .flat_map(|i| (0..s).map(move |k| (i, k)))
        .map(|(i, k)| cfg.slot_key(i, k).is_some())
        .collect()
}

/// Marks slots whose key is a global position. Those keys are scored once,
/// through the global columns, so the local slot is dropped.
pub fn dedupe_mask(cfg: &PatternConfig) -> Vec<bool> {
    let s = cfg.window.slots(cfg.mode);
    (0..cfg.n)
        .flat_map(|i| (0..s).map(move |k| (i, k)))
        .map(|(i, k)| cfg.slot_key(i, k).is_some_and(|j| cfg.is_global(j)))
        .collect()
}

fn check_qk<T: Element>(q: &Tensor<T>, k: &Tensor<T>, cfg: &PatternConfig) -> Result<(usize, usize)> {
    let (n, dk) = q.dims2()?;
    let (nk, dkk) = k.dims2()?;
    if n != nk || dk != dkk {
        return Err(Error::Shape(format!(
            "Q {:?} and K {:?} must have identical shapes",
            q.shape(),
            k.shape()
        )));
    }
    if n != cfg.n {
        return Err(Error::Shape(format!("pattern is for n = {}, got {n} rows", cfg.n)));
    }
    cfg.window.validate()?;
    Ok((n, dk))
}

fn scale_for<T: Element>(dk: usize) -> T {
    T::from_f64(1.0 / (dk as f64).sqrt())
}

pub fn band_qk<T: Element>(
    imp: BandImpl,
    q: &Tensor<T>,
    k: &Tensor<T>,
    cfg: &PatternConfig,
) -> Result<(BandScores<T>, MemoryAccount)> {
    match imp {
        BandImpl::Loop => band_qk_loop(q, k, cfg),
        BandImpl::Chunk => band_qk_chunk(q, k, cfg),
        BandImpl::Dense => band_qk_dense(q, k, cfg),
    }
}

/// One dot product per valid slot.
pub fn band_qk_loop<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    cfg: &PatternConfig,
) -> Result<(BandScores<T>, MemoryAccount)> {
    let (n, _dk) = check_qk(q, k, cfg)?;
    let dk = q.last_dim();
    let s = cfg.window.slots(cfg.mode);
    let scale = scale_for::<T>(dk);
    let mut data = vec![T::zero(); n * s];
    let valid = valid_slots(cfg);
    let mut computed = 0;
    for i in 0..n {
        for slot in 0..s {
            if let Some(j) = cfg.slot_key(i, slot) {
                data[i * s + slot] = dot(q.row(i), k.row(j)) * scale;
                computed += 1;
            }
        }
    }
    let scores = BandScores {
        cfg: cfg.clone(),
        data: Tensor::new(&[n, s], data)?,
        valid_mask: valid,
    };
    Ok((
        scores,
        MemoryAccount {
            implementation: BandImpl::Loop,
            score_elements: computed,
            peak_elements: computed,
        },
    ))
}

/// Block geometry of the chunked kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkPlan {
    pub h: usize,
    /// Length after padding: a multiple of `h`, at least `2h`.
    pub padded: usize,
    /// Number of `2h × 2h` blocks (`padded / h − 1`).
    pub chunks: usize,
}

impl ChunkPlan {
    pub fn new(n: usize, cfg: &PatternConfig) -> Result<Self> {
        if cfg.window.dilation != 1 {
            return Err(Error::Unsupported(format!(
                "the chunk kernel only supports contiguous windows (dilation 1), got {}",
                cfg.window.dilation
            )));
        }
        let h = cfg.window.half_window;
        if h == 0 {
            return Err(Error::Unsupported(
                "the chunk kernel needs a half-window of at least 1".into(),
            ));
        }
        let padded = n.div_ceil(h).max(2) * h;
        Ok(ChunkPlan {
            h,
            padded,
            chunks: padded / h - 1,
        })
    }

    /// Block holding the pair `(i, j)`; `|i − j| ≤ h` is required.
    #[inline]
    pub fn chunk_of(&self, i: usize, j: usize) -> usize {
        (i.min(j) / self.h).min(self.chunks - 1)
    }

    pub fn block_elements(&self) -> usize {
        self.chunks * 4 * self.h * self.h
    }
}

fn pad_rows<T: Element>(x: &Tensor<T>, padded: usize) -> Vec<T> {
    let mut out = x.data().to_vec();
    out.resize(padded * x.last_dim(), T::zero());
    out
}

/// Overlapping-block kernel: blocks of `2h` rows with stride `h`.
///
/// The input is zero-padded to a multiple of `h`; padded keys are never
/// selected and padded query rows are dropped.
pub fn band_qk_chunk<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    cfg: &PatternConfig,
) -> Result<(BandScores<T>, MemoryAccount)> {
    let (n, dk) = check_qk(q, k, cfg)?;
    let plan = ChunkPlan::new(n, cfg)?;
    let s = cfg.window.slots(cfg.mode);
    let scale = scale_for::<T>(dk);
    let qp = pad_rows(q, plan.padded);
    let kp = pad_rows(k, plan.padded);
    let w = 2 * plan.h;
    let mut blocks = Vec::with_capacity(plan.block_elements());
    for c in 0..plan.chunks {
        let rows = c * plan.h * dk..(c * plan.h + w) * dk;
        blocks.extend(matmul_nt(&qp[rows.clone()], &kp[rows], w, dk, w));
    }
    let mut data = vec![T::zero(); n * s];
    for i in 0..n {
        for slot in 0..s {
            if let Some(j) = cfg.slot_key(i, slot) {
                let c = plan.chunk_of(i, j);
                let base = c * plan.h;
                data[i * s + slot] = blocks[c * w * w + (i - base) * w + (j - base)] * scale;
            }
        }
    }
    let scores = BandScores {
        cfg: cfg.clone(),
        data: Tensor::new(&[n, s], data)?,
        valid_mask: valid_slots(cfg),
    };
    Ok((
        scores,
        MemoryAccount {
            implementation: BandImpl::Chunk,
            score_elements: plan.block_elements(),
            peak_elements: plan.block_elements() + n * s,
        },
    ))
}

/// Full `QKᵀ` followed by a gather of the band.
pub fn band_qk_dense<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    cfg: &PatternConfig,
) -> Result<(BandScores<T>, MemoryAccount)> {
    let (n, dk) = check_qk(q, k, cfg)?;
    let s = cfg.window.slots(cfg.mode);
    let scale = scale_for::<T>(dk);
    let full = matmul_nt(q.data(), k.data(), n, dk, n);
    let mut data = vec![T::zero(); n * s];
    for i in 0..n {
        for slot in 0..s {
            if let Some(j) = cfg.slot_key(i, slot) {
                data[i * s + slot] = full[i * n + j] * scale;
            }
        }
    }
    let scores = BandScores {
        cfg: cfg.clone(),
        data: Tensor::new(&[n, s], data)?,
        valid_mask: valid_slots(cfg),
    };
    Ok((
        scores,
        MemoryAccount {
            implementation: BandImpl::Dense,
            score_elements: n * n,
            peak_elements: n * n + n * s,
        },
    ))
}

/// Gradients of the banded product with respect to `Q` and `K`.
///
/// `grad` is `[n, slots]`; entries at invalid slots are ignored.
pub fn band_qk_backward<T: Element>(
    imp: BandImpl,
    q: &Tensor<T>,
    k: &Tensor<T>,
    cfg: &PatternConfig,
    grad: &[T],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, dk) = check_qk(q, k, cfg)?;
    let s = cfg.window.slots(cfg.mode);
    if grad.len() != n * s {
        return Err(Error::Shape(format!(
            "band gradient has {} values, expected {}",
            grad.len(),
            n * s
        )));
    }
    let scale = scale_for::<T>(dk);
    let (dq, dkk) = match imp {
        BandImpl::Chunk => chunk_backward(q, k, cfg, grad, scale)?,
        BandImpl::Loop | BandImpl::Dense => loop_backward(q, k, cfg, grad, scale),
    };
    Ok((Tensor::new(&[n, dk], dq)?, Tensor::new(&[n, dk], dkk)?))
}

fn loop_backward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    cfg: &PatternConfig,
    grad: &[T],
    scale: T,
) -> (Vec<T>, Vec<T>) {
    let n = cfg.n;
    let dk = q.last_dim();
    let s = cfg.window.slots(cfg.mode);
    let mut dq = vec![T::zero(); n * dk];
    let mut dkk = vec![T::zero(); n * dk];
    for i in 0..n {
        for slot in 0..s {
            let Some(j) = cfg.slot_key(i, slot) else { continue };
            let g = grad[i * s + slot] * scale;
            if g == T::zero() {
                continue;
            }
            let (qi, kj) = (q.row(i), k.row(j));
            for t in 0..dk {
                dq[i * dk + t] = dq[i * dk + t] + g * kj[t];
                dkk[j * dk + t] = dkk[j * dk + t] + g * qi[t];
            }
        }
    }
    (dq, dkk)
}

/// Recomputes in blocks: scatters the band gradient into the `2h × 2h`
/// blocks, then `dQ_c = G_c·K_c` and `dK_c = G_cᵀ·Q_c`.
fn chunk_backward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    cfg: &PatternConfig,
    grad: &[T],
    scale: T,
) -> Result<(Vec<T>, Vec<T>)> {
    let n = cfg.n;
    let dk = q.last_dim();
    let plan = ChunkPlan::new(n, cfg)?;
    let s = cfg.window.slots(cfg.mode);
    let w = 2 * plan.h;
    let mut g_blocks = vec![T::zero(); plan.block_elements()];
    for i in 0..n {
        for slot in 0..s {
            if let Some(j) = cfg.slot_key(i, slot) {
                let c = plan.chunk_of(i, j);
                let base = c * plan.h;
                g_blocks[c * w * w + (i - base) * w + (j - base)] = grad[i * s + slot] * scale;
            }
        }
    }
    let qp = pad_rows(q, plan.padded);
    let kp = pad_rows(k, plan.padded);
    let mut dq = vec![T::zero(); plan.padded * dk];
    let mut dkk = vec![T::zero(); plan.padded * dk];
    for c in 0..plan.chunks {
        let g = &g_blocks[c * w * w..(c + 1) * w * w];
        let rows = c * plan.h * dk..(c * plan.h + w) * dk;
        let dq_c = matmul(g, &kp[rows.clone()], w, w, dk);
        let dk_c = matmul_tn(g, &qp[rows.clone()], w, w, dk);
        for (acc, v) in dq[rows.clone()].iter_mut().zip(dq_c) {
            *acc = *acc + v;
        }
        for (acc, v) in dkk[rows].iter_mut().zip(dk_c) {
            *acc = *acc + v;
        }
    }
    dq.truncate(n * dk);
    dkk.truncate(n * dk);
    Ok((dq, dkk))
}

/// Joint probabilities over band slots followed by global-key columns.
#[derive(Debug, Clone, PartialEq)]
pub struct BandProbs<T: Element> {
    /// `[n, slots + globals]`.
    pub probs: Tensor<T>,
    pub slots: usize,
    pub globals: usize,
    /// `[n · (slots + globals)]`, true where the entry took part in the softmax.
    pub mask: Vec<bool>,
}

/// Joint softmax mask: valid, non-deduplicated band slots plus all global columns.
pub fn joint_mask(valid: &[bool], dedupe: Option<&[bool]>, n: usize, slots: usize, globals: usize) -> Vec<bool> {
    let width = slots + globals;
    let mut mask = vec![true; n * width];
    for i in 0..n {
        for s in 0..slots {
            let idx = i * slots + s;
            mask[i * width + s] = valid[idx] && !dedupe.is_some_and(|d| d[idx]);
        }
    }
    mask
}

/// Concatenates band scores `[n, S]` and global scores `[n, G]` row-wise.
pub fn join_scores<T: Element>(band: &Tensor<T>, global: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, s) = band.dims2()?;
    let g = match global {
        Some(t) => {
            let (gn, g) = t.dims2()?;
            if gn != n {
                return Err(Error::Shape(format!(
                    "global scores {:?} do not match band rows {n}",
                    t.shape()
                )));
            }
            g
        }
        None => 0,
    };
    let mut out = Vec::with_capacity(n * (s + g));
    for i in 0..n {
        out.extend_from_slice(band.row(i));
        if let Some(t) = global {
            out.extend_from_slice(t.row(i));
        }
    }
    Tensor::new(&[n, s + g], out)
}

/// One softmax per query over its valid band slots and all global keys.
///
/// `dedupe` marks band slots whose key is a global position; those slots are
/// excluded so each key contributes exactly one logit.
pub fn band_softmax<T: Element>(
    local: &BandScores<T>,
    global_cols: Option<&Tensor<T>>,
    dedupe: Option<&[bool]>,
) -> Result<BandProbs<T>> {
    let n = local.n();
    let s = local.slots();
    let joined = join_scores(&local.data, global_cols)?;
    let g = joined.last_dim() - s;
    let mask = joint_mask(&local.valid_mask, dedupe, n, s, g);
    let probs = masked_softmax_rows(joined.data(), Some(&mask), s + g)
        .map_err(|row| Error::FullyMaskedRow { row })?;
    Ok(BandProbs {
        probs: Tensor::new(&[n, s + g], probs)?,
        slots: s,
        globals: g,
        mask,
    })
}

/// Gradient of the joint softmax with respect to its logits `[n, S + G]`.
pub fn band_softmax_backward<T: Element>(p: &BandProbs<T>, dprobs: &[T]) -> Vec<T> {
    softmax_rows_backward(p.probs.data(), dprobs, p.slots + p.globals)
}

/// `out[i] = Σ_band p·V[j] + Σ_global p·V_g[g]`.
pub fn band_pv<T: Element>(
    probs: &Tensor<T>,
    cfg: &PatternConfig,
    v: &Tensor<T>,
    vg_rows: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, dk) = v.dims2()?;
    let s = cfg.window.slots(cfg.mode);
    let g = check_pv(probs, cfg, n, dk, s, vg_rows)?;
    let width = s + g;
    let mut out = vec![T::zero(); n * dk];
    for i in 0..n {
        let pr = probs.row(i);
        let orow = &mut out[i * dk..(i + 1) * dk];
        for slot in 0..s {
            let p = pr[slot];
            if p == T::zero() {
                continue;
            }
            if let Some(j) = cfg.slot_key(i, slot) {
                for (o, &x) in orow.iter_mut().zip(v.row(j)) {
                    *o = *o + p * x;
                }
            }
        }
        if let Some(vg) = vg_rows {
            for gi in 0..g {
                let p = pr[s + gi];
                for (o, &x) in orow.iter_mut().zip(vg.row(gi)) {
                    *o = *o + p * x;
                }
            }
        }
        debug_assert_eq!(pr.len(), width);
    }
    Tensor::new(&[n, dk], out)
}

fn check_pv<T: Element>(
    probs: &Tensor<T>,
    cfg: &PatternConfig,
    n: usize,
    dk: usize,
    s: usize,
    vg_rows: Option<&Tensor<T>>,
) -> Result<usize> {
    let (pn, width) = probs.dims2()?;
    let g = match vg_rows {
        Some(t) => {
            let (g, gd) = t.dims2()?;
            if gd != dk {
                return Err(Error::Shape(format!(
                    "global values {:?} do not match value width {dk}",
                    t.shape()
                )));
            }
            g
        }
        None => 0,
    };
    if pn != n || cfg.n != n || width != s + g {
        return Err(Error::Shape(format!(
            "probabilities {:?} inconsistent with {n} rows, {s} slots and {g} globals",
            probs.shape()
        )));
    }
    Ok(g)
}

/// Returns `(dprobs [n, S+G], dV [n, dk], dV_g [G, dk])`.
pub fn band_pv_backward<T: Element>(
    probs: &Tensor<T>,
    cfg: &PatternConfig,
    v: &Tensor<T>,
    vg_rows: Option<&Tensor<T>>,
    dout: &[T],
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (n, dk) = v.dims2()?;
    let s = cfg.window.slots(cfg.mode);
    let g = check_pv(probs, cfg, n, dk, s, vg_rows)?;
    let width = s + g;
    let mut dprobs = vec![T::zero(); n * width];
    let mut dv = vec![T::zero(); n * dk];
    let mut dvg = vec![T::zero(); g * dk];
    for i in 0..n {
        let pr = probs.row(i);
        let go = &dout[i * dk..(i + 1) * dk];
        for slot in 0..s {
            if let Some(j) = cfg.slot_key(i, slot) {
                dprobs[i * width + slot] = dot(go, v.row(j));
                let p = pr[slot];
                if p != T::zero() {
                    for (d, &x) in dv[j * dk..(j + 1) * dk].iter_mut().zip(go) {
                        *d = *d + p * x;
                    }
                }
            }
        }
        if let Some(vg) = vg_rows {
            for gi in 0..g {
                dprobs[i * width + s + gi] = dot(go, vg.row(gi));
                let p = pr[s + gi];
                for (d, &x) in dvg[gi * dk..(gi + 1) * dk].iter_mut().zip(go) {
                    *d = *d + p * x;
                }
            }
        }
    }
    Ok((dprobs, dv, dvg))
}

/// Scatters band slots to a dense `[n, n]` matrix; other entries are 0.
pub fn band_to_dense<T: Element>(b: &BandScores<T>) -> Result<Tensor<T>> {
    let n = b.n();
    if n > DENSE_LIMIT {
        return Err(Error::RenderGuard {
            n,
            limit: DENSE_LIMIT,
        });
    }
    let s = b.slots();
    let mut out = vec![T::zero(); n * n];
    for i in 0..n {
        for slot in 0..s {
            if b.valid_mask[i * s + slot] {
                if let Some(j) = b.cfg.slot_key(i, slot) {
                    out[i * n + j] = b.data.data()[i * s + slot];
                }
            }
        }
    }
    Tensor::new(&[n, n], out)
}

/// Reads the band of `cfg` out of a dense `[n, n]` matrix.
pub fn dense_to_band<T: Element>(dense: &Tensor<T>, cfg: &PatternConfig) -> Result<BandScores<T>> {
    let (n, m) = dense.dims2()?;
    if n != m || n != cfg.n {
        return Err(Error::Shape(format!(
            "expected a square [{0}, {0}] matrix, got {1:?}",
            cfg.n,
            dense.shape()
        )));
    }
    let s = cfg.window.slots(cfg.mode);
    let mut data = vec![T::zero(); n * s];
    for i in 0..n {
        for slot in 0..s {
            if let Some(j) = cfg.slot_key(i, slot) {
                data[i * s + slot] = dense.at(i, j);
            }
        }
    }
    Ok(BandScores {
        cfg: cfg.clone(),
        data: Tensor::new(&[n, s], data)?,
        valid_mask: valid_slots(cfg),
    })
}
