//! Multi-head local + global self-attention.
//!
//! Non-global queries take one softmax over their window keys (local
//! projections `Q_s, K_s, V_s`) together with every global key (global key
//! and value projections `K_g, V_g`). A window slot whose key is itself
//! global is dropped so each key contributes one logit. Global queries
//! attend to the full sequence through `Q_g, K_g, V_g`; those rows are
//! computed densely in `O(g·n)` and written over the banded output.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::kernels::band::{dedupe_mask, BandImpl};
use crate::params::{ParamId, ParamStore};
use crate::pattern::{band_indices, PatternConfig};
use crate::tensor::{Element, Tensor};

/// How a layer computes its attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionImpl {
    /// Chunked kernel where supported (contiguous window, `h ≥ 1`), loop otherwise.
    #[default]
    Auto,
    Loop,
    Chunk,
    /// Banded scores gathered from a full `QKᵀ`.
    Dense,
    /// Full `n × n` masked attention without band storage.
    Oracle,
}

impl AttentionImpl {
    fn kernel(self, cfg: &PatternConfig) -> Option<BandImpl> {
        match self {
            AttentionImpl::Auto => Some(if cfg.window.dilation == 1 && cfg.window.half_window > 0 {
                BandImpl::Chunk
            } else {
                BandImpl::Loop
            }),
            AttentionImpl::Loop => Some(BandImpl::Loop),
            AttentionImpl::Chunk => Some(BandImpl::Chunk),
            AttentionImpl::Dense => Some(BandImpl::Dense),
            AttentionImpl::Oracle => None,
        }
    }
}

/// Draws a `[rows, cols]` tensor from `N(0, std²)`.
pub fn normal_tensor<T: Element, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::new(&[rows, cols], data).expect("shape")
}

/// Separate projections used by global attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlobalProjections {
    pub w_qg: ParamId,
    pub w_kg: ParamId,
    pub w_vg: ParamId,
}

/// Parameters of one sliding-window attention layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionParams {
    pub heads: usize,
    pub dk: usize,
    pub w_qs: ParamId,
    pub w_ks: ParamId,
    pub w_vs: ParamId,
    pub global: Option<GlobalProjections>,
    pub w_o: ParamId,
    /// `[heads, 2·reach + 1]` additive bias per key offset in
    /// `[−reach, reach]`, with the largest offset `reach` it covers.
    pub relative_bias: Option<(ParamId, usize)>,
}

/// Options for [`AttentionParams::init`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionInit {
    pub dmodel: usize,
    pub heads: usize,
    pub global_projections: bool,
    /// Largest key offset covered when a relative bias is wanted.
    pub relative_bias: Option<usize>,
    pub std: f64,
}

impl AttentionParams {
    pub fn init<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        opts: AttentionInit,
        rng: &mut R,
    ) -> Result<Self> {
        let AttentionInit { dmodel, heads, std, .. } = opts;
        if heads == 0 || dmodel % heads != 0 {
            return Err(Error::Config(format!(
                "dmodel {dmodel} must be a positive multiple of heads {heads}"
            )));
        }
        let mat = |store: &mut ParamStore<T>, name: &str, rng: &mut R| {
            store.add(format!("{prefix}.{name}"), normal_tensor(rng, dmodel, dmodel, std))
        };
        let w_qs = mat(store, "w_qs", rng);
        let w_ks = mat(store, "w_ks", rng);
        let w_vs = mat(store, "w_vs", rng);
        let global = opts.global_projections.then(|| GlobalProjections {
            w_qg: store.add(format!("{prefix}.w_qg"), store.get(w_qs).clone()),
            w_kg: store.add(format!("{prefix}.w_kg"), store.get(w_ks).clone()),
            w_vg: store.add(format!("{prefix}.w_vg"), store.get(w_vs).clone()),
        });
        let w_o = mat(store, "w_o", rng);
        let relative_bias = opts.relative_bias.map(|reach| {
            let id = store.add(format!("{prefix}.rel_bias"), Tensor::zeros(&[heads, 2 * reach + 1]));
            (id, reach)
        });
        Ok(AttentionParams {
            heads,
            dk: dmodel / heads,
            w_qs,
            w_ks,
            w_vs,
            global,
            w_o,
            relative_bias,
        })
    }

    pub fn dmodel(&self) -> usize {
        self.heads * self.dk
    }
}

/// Copies the local projections into the global ones (bitwise).
///
/// Applying it twice is the same as applying it once.
pub fn init_global_projections<T: Element>(store: &mut ParamStore<T>, p: &AttentionParams) -> Result<()> {
    let g = p
        .global
        .ok_or_else(|| Error::Config("layer has no global projections".into()))?;
    for (src, dst) in [(p.w_qs, g.w_qg), (p.w_ks, g.w_kg), (p.w_vs, g.w_vg)] {
        let t = store.get(src).clone();
        store.replace(dst, t);
    }
    Ok(())
}

fn check_layer(n: usize, p: &AttentionParams, cfg: &PatternConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.n != n {
        return Err(Error::Shape(format!("pattern is for n = {}, input has {n} rows", cfg.n)));
    }
    if !cfg.per_head.is_empty() && cfg.per_head.len() != p.heads {
        return Err(Error::Config(format!(
            "{} per-head windows for {} heads",
            cfg.per_head.len(),
            p.heads
        )));
    }
    if !cfg.global_positions.is_empty() && p.global.is_none() {
        return Err(Error::Config(
            "pattern has global positions but the layer has no global projections".into(),
        ));
    }
    Ok(())
}

/// Column of the relative-bias table for each band slot of `cfg`.
fn bias_columns(cfg: &PatternConfig, reach: usize) -> Result<Vec<usize>> {
    let h = cfg.window.half_window;
    let d = cfg.window.dilation;
    if h * d > reach {
        return Err(Error::Config(format!(
            "window reach {} exceeds the relative-bias table ({reach})",
            h * d
        )));
    }
    // slot k sits at offset (k − h)·d in both modes
    Ok((0..cfg.window.slots(cfg.mode)).map(|k| reach + k * d - h * d).collect())
}

/// Multi-head sliding-window + global self-attention over `x: [n, dmodel]`.
pub fn longformer_self_attention<T: Element>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &AttentionParams,
    x: NodeId,
    cfg: &PatternConfig,
    imp: AttentionImpl,
) -> Result<NodeId> {
    let (n, dm) = g.value(x).dims2()?;
    if dm != p.dmodel() {
        return Err(Error::Shape(format!("input width {dm}, layer expects {}", p.dmodel())));
    }
    check_layer(n, p, cfg)?;
    if imp == AttentionImpl::Oracle {
        return oracle_attention(g, store, p, x, cfg);
    }
    let w_qs = g.param(store, p.w_qs);
    let w_ks = g.param(store, p.w_ks);
    let w_vs = g.param(store, p.w_vs);
    let qs = g.matmul(x, w_qs)?;
    let ks = g.matmul(x, w_ks)?;
    let vs = g.matmul(x, w_vs)?;
    let globals = &cfg.global_positions;
    let projected_g = match (globals.is_empty(), p.global) {
        (false, Some(gp)) => {
            let w_qg = g.param(store, gp.w_qg);
            let w_kg = g.param(store, gp.w_kg);
            let w_vg = g.param(store, gp.w_vg);
            let qg_rows = g.gather_rows(x, globals)?;
            let qg = g.matmul(qg_rows, w_qg)?;
            let kg = g.matmul(x, w_kg)?;
            let vg = g.matmul(x, w_vg)?;
            Some((qg, kg, vg))
        }
        _ => None,
    };
    let rel = p.relative_bias.map(|(id, max_pos)| (g.param(store, id), max_pos));
    let scale = 1.0 / (p.dk as f64).sqrt();

    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let hc = cfg.head(h);
        let kernel = imp.kernel(&hc).expect("band implementation");
        let c0 = h * p.dk;
        let q = g.slice_cols(qs, c0, p.dk)?;
        let k = g.slice_cols(ks, c0, p.dk)?;
        let v = g.slice_cols(vs, c0, p.dk)?;
        let mut scores = g.band_qk(q, k, &hc, kernel)?;
        if let Some((table, reach)) = rel {
            let row = g.gather_rows(table, &[h])?;
            let bias = g.select_cols(row, &bias_columns(&hc, reach)?)?;
            scores = g.add_row_bias(scores, bias)?;
        }
        let out = match projected_g {
            None => {
                let probs = g.band_softmax(scores, None, &hc, None)?;
                g.band_pv(probs, v, None, &hc)?
            }
            Some((qg, kg, vg)) => {
                let kg_h = g.slice_cols(kg, c0, p.dk)?;
                let vg_h = g.slice_cols(vg, c0, p.dk)?;
                let kg_rows = g.gather_rows(kg_h, globals)?;
                let vg_rows = g.gather_rows(vg_h, globals)?;
                let gs = g.matmul_nt(q, kg_rows)?;
                let gs = g.scale(gs, scale);
                let dedupe = dedupe_mask(&hc);
                let probs = g.band_softmax(scores, Some(gs), &hc, Some(&dedupe))?;
                let local = g.band_pv(probs, v, Some(vg_rows), &hc)?;
                // global query rows: full attention over all keys
                let qg_h = g.slice_cols(qg, c0, p.dk)?;
                let s = g.matmul_nt(qg_h, kg_h)?;
                let s = g.scale(s, scale);
                let pg = g.masked_softmax(s, None)?;
                let og = g.matmul(pg, vg_h)?;
                g.scatter_rows(local, og, globals)?
            }
        };
        heads.push(out);
    }
    let cat = g.concat_cols(&heads)?;
    let w_o = g.param(store, p.w_o);
    g.matmul(cat, w_o)
}

/// Same function as the banded layer, computed with full `n × n` score
/// matrices and an explicit pattern mask.
fn oracle_attention<T: Element>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &AttentionParams,
    x: NodeId,
    cfg: &PatternConfig,
) -> Result<NodeId> {
    let n = cfg.n;
    let scale = 1.0 / (p.dk as f64).sqrt();
    let w_qs = g.param(store, p.w_qs);
    let w_ks = g.param(store, p.w_ks);
    let w_vs = g.param(store, p.w_vs);
    let qs = g.matmul(x, w_qs)?;
    let ks = g.matmul(x, w_ks)?;
    let vs = g.matmul(x, w_vs)?;
    let globals = &cfg.global_positions;
    let gp = if globals.is_empty() { None } else { p.global };
    let (qg, kg, vg) = match gp {
        Some(gp) => {
            let (a, b, c) = (g.param(store, gp.w_qg), g.param(store, gp.w_kg), g.param(store, gp.w_vg));
            (Some(g.matmul(x, a)?), Some(g.matmul(x, b)?), Some(g.matmul(x, c)?))
        }
        None => (None, None, None),
    };
    let rel = p.relative_bias.map(|(id, max_pos)| (g.param(store, id), max_pos));
    // column j uses global key/value projections when j is global
    let gcol: Vec<f64> = (0..n * n)
        .map(|ij| if cfg.is_global(ij % n) { 1.0 } else { 0.0 })
        .collect();
    let lcol: Vec<f64> = gcol.iter().map(|v| 1.0 - v).collect();
    let gcol = g.constant(Tensor::from_f64(&[n, n], &gcol)?);
    let lcol = g.constant(Tensor::from_f64(&[n, n], &lcol)?);

    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let hc = cfg.head(h);
        let mut mask = vec![false; n * n];
        let mut in_window = vec![0.0; n * n];
        for i in 0..n {
            for j in band_indices(&hc, i)? {
                mask[i * n + j] = true;
            }
            for j in hc.window_keys(i) {
                in_window[i * n + j] = 1.0;
            }
        }
        let c0 = h * p.dk;
        let q = g.slice_cols(qs, c0, p.dk)?;
        let k = g.slice_cols(ks, c0, p.dk)?;
        let v = g.slice_cols(vs, c0, p.dk)?;
        let s_local = g.matmul_nt(q, k)?;
        let mut s = g.scale(s_local, scale);
        if let Some((table, reach)) = rel {
            bias_columns(&hc, reach)?;
            let row = g.gather_rows(table, &[h])?;
            // pairs outside the window are clamped here and zeroed by `keep`
            let cols: Vec<usize> = (0..n * n)
                .map(|ij| ((ij % n) as isize - (ij / n) as isize).clamp(-(reach as isize), reach as isize))
                .map(|off| (off + reach as isize) as usize)
                .collect();
            let b = g.select_cols(row, &cols)?;
            let b = g.reshape(b, &[n, n])?;
            // bias applies to window slots whose key is not global
            let mut keep = in_window.clone();
            for (ij, k) in keep.iter_mut().enumerate() {
                if cfg.is_global(ij % n) {
                    *k = 0.0;
                }
            }
            let keep = g.constant(Tensor::from_f64(&[n, n], &keep)?);
            let b = g.mul(b, keep)?;
            s = g.add(s, b)?;
        }
        let out = match (qg, kg, vg) {
            (Some(qg), Some(kg), Some(vg)) => {
                let kg_h = g.slice_cols(kg, c0, p.dk)?;
                let vg_h = g.slice_cols(vg, c0, p.dk)?;
                let s_g = g.matmul_nt(q, kg_h)?;
                let s_g = g.scale(s_g, scale);
                let a = g.mul(s, lcol)?;
                let b = g.mul(s_g, gcol)?;
                let joint = g.add(a, b)?;
                let probs = g.masked_softmax(joint, Some(&mask))?;
                let pl = g.mul(probs, lcol)?;
                let pgc = g.mul(probs, gcol)?;
                let ol = g.matmul(pl, v)?;
                let og = g.matmul(pgc, vg_h)?;
                let local = g.add(ol, og)?;
                let qg_h = g.slice_cols(qg, c0, p.dk)?;
                let qg_rows = g.gather_rows(qg_h, globals)?;
                let sr = g.matmul_nt(qg_rows, kg_h)?;
                let sr = g.scale(sr, scale);
                let pr = g.masked_softmax(sr, None)?;
                let rows = g.matmul(pr, vg_h)?;
                g.scatter_rows(local, rows, globals)?
            }
            _ => {
                let probs = g.masked_softmax(s, Some(&mask))?;
                g.matmul(probs, v)?
            }
        };
        heads.push(out);
    }
    let cat = g.concat_cols(&heads)?;
    let w_o = g.param(store, p.w_o);
    g.matmul(cat, w_o)
}

/// Projections of a standard (dense) multi-head attention block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseAttentionParams {
    pub heads: usize,
    pub dk: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl DenseAttentionParams {
    pub fn init<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dmodel: usize,
        heads: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dmodel % heads != 0 {
            return Err(Error::Config(format!(
                "dmodel {dmodel} must be a positive multiple of heads {heads}"
            )));
        }
        let mut mat = |name: &str| store.add(format!("{prefix}.{name}"), normal_tensor(rng, dmodel, dmodel, std));
        Ok(DenseAttentionParams {
            heads,
            dk: dmodel / heads,
            w_q: mat("w_q"),
            w_k: mat("w_k"),
            w_v: mat("w_v"),
            w_o: mat("w_o"),
        })
    }

    /// View of the local projections of a sliding-window layer.
    pub fn from_local(p: &AttentionParams) -> Self {
        DenseAttentionParams {
            heads: p.heads,
            dk: p.dk,
            w_q: p.w_qs,
            w_k: p.w_ks,
            w_v: p.w_vs,
            w_o: p.w_o,
        }
    }
}

/// Full multi-head attention of queries `xq: [nq, d]` over `xkv: [nk, d]`.
///
/// With `causal`, query `i` only sees keys `j ≤ i`.
pub fn dense_attention<T: Element>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &DenseAttentionParams,
    xq: NodeId,
    xkv: NodeId,
    causal: bool,
) -> Result<NodeId> {
    let nq = g.value(xq).dims2()?.0;
    let nk = g.value(xkv).dims2()?.0;
    let (wq, wk, wv) = (g.param(store, p.w_q), g.param(store, p.w_k), g.param(store, p.w_v));
    let q = g.matmul(xq, wq)?;
    let k = g.matmul(xkv, wk)?;
    let v = g.matmul(xkv, wv)?;
    let mask: Option<Vec<bool>> = causal.then(|| (0..nq * nk).map(|ij| ij % nk <= ij / nk).collect());
    let scale = 1.0 / (p.dk as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let c0 = h * p.dk;
        let qh = g.slice_cols(q, c0, p.dk)?;
        let kh = g.slice_cols(k, c0, p.dk)?;
        let vh = g.slice_cols(v, c0, p.dk)?;
        let s = g.matmul_nt(qh, kh)?;
        let s = g.scale(s, scale);
        let pr = g.masked_softmax(s, mask.as_deref())?;
        heads.push(g.matmul(pr, vh)?);
    }
    let cat = g.concat_cols(&heads)?;
    let wo = g.param(store, p.w_o);
    g.matmul(cat, wo)
}

/// Output rows whose value moves by more than `1e-9` when input row `probe`
/// is nudged by `1e-3` along a fixed direction.
pub fn influence_width<F>(x: &Tensor<f64>, probe: usize, mut forward: F) -> Result<Vec<usize>>
where
    F: FnMut(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    const STEP: f64 = 1e-3;
    const THRESHOLD: f64 = 1e-9;
    let n = x.dims2()?.0;
    if probe >= n {
        return Err(Error::OutOfRange(format!("probe {probe} of {n}")));
    }
    let base = forward(x)?;
    let mut moved = x.clone();
    for (c, v) in moved.row_mut(probe).iter_mut().enumerate() {
        // non-constant direction so a leading layer norm cannot absorb it
        *v += STEP * ((c as f64 + 1.0) * 0.7).sin();
    }
    let out = forward(&moved)?;
    Ok((0..base.rows())
        .filter(|&i| {
            base.row(i)
                .iter()
                .zip(out.row(i))
                .any(|(a, b)| (a - b).abs() > THRESHOLD)
        })
        .collect())
}

/// Residual stack of attention layers (`x ← x + attn(x)`), used to probe
/// receptive fields.
pub struct AttentionStack<T: Element> {
    pub store: ParamStore<T>,
    pub layers: Vec<(AttentionParams, PatternConfig)>,
}

impl<T: Element> AttentionStack<T> {
    pub fn new<R: Rng>(dmodel: usize, heads: usize, patterns: Vec<PatternConfig>, std: f64, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(patterns.len());
        for (l, cfg) in patterns.into_iter().enumerate() {
            let p = AttentionParams::init(
                &mut store,
                &format!("layers.{l}"),
                AttentionInit {
                    dmodel,
                    heads,
                    global_projections: !cfg.global_positions.is_empty(),
                    relative_bias: None,
                    std,
                },
                rng,
            )?;
            layers.push((p, cfg));
        }
        Ok(AttentionStack { store, layers })
    }

    pub fn forward_graph(&self, g: &mut Graph<T>, x: NodeId, imp: AttentionImpl) -> Result<NodeId> {
        let mut h = x;
        for (p, cfg) in &self.layers {
            let a = longformer_self_attention(g, &self.store, p, h, cfg, imp)?;
            h = g.add(h, a)?;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor<T>, imp: AttentionImpl) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let out = self.forward_graph(&mut g, xi, imp)?;
        Ok(g.value(out).clone())
    }
}
