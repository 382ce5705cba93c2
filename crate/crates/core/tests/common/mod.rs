//! Reference implementations written with plain nested loops over `f64`,
//! sharing no code with the library kernels.

#![allow(dead_code)]

use longformer::model::Model;
use longformer::pattern::{Mode, PatternConfig};
use longformer::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let cols = t.last_dim();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn from_mat(m: &Mat) -> Tensor<f64> {
    Tensor::from_rows(m)
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0) * scale).collect())
        .collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let p = b[0].len();
    a.iter()
        .map(|row| {
            (0..p)
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn layernorm(x: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let d = r.len() as f64;
            let mean = r.iter().sum::<f64>() / d;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

/// Multi-head attention of `xq` over `xkv`; `allowed(i, j)` selects keys.
pub fn mha(xq: &Mat, xkv: &Mat, w: [&Mat; 4], heads: usize, allowed: impl Fn(usize, usize) -> bool) -> Mat {
    let [wq, wk, wv, wo] = w;
    let q = matmul(xq, wq);
    let k = matmul(xkv, wk);
    let v = matmul(xkv, wv);
    let dm = wq[0].len();
    let dk = dm / heads;
    let mut cat = vec![vec![0.0; dm]; xq.len()];
    for h in 0..heads {
        for i in 0..xq.len() {
            let keys: Vec<usize> = (0..xkv.len()).filter(|&j| allowed(i, j)).collect();
            let logits: Vec<f64> = keys
                .iter()
                .map(|&j| (0..dk).map(|c| q[i][h * dk + c] * k[j][h * dk + c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (p, &j) in e.iter().zip(&keys) {
                for c in 0..dk {
                    cat[i][h * dk + c] += p / z * v[j][h * dk + c];
                }
            }
        }
    }
    matmul(&cat, wo)
}

/// Scaled banded scores: `Some(q_i·k_j/√dk)` with `j = i + (slot − h)·d`,
/// `None` where `j` falls outside the sequence.
pub fn band_scores(q: &Mat, k: &Mat, h: usize, d: usize, mode: Mode) -> Vec<Vec<Option<f64>>> {
    let n = q.len();
    let dk = q[0].len();
    let slots = match mode {
        Mode::Bidirectional => 2 * h + 1,
        Mode::Causal => h + 1,
    };
    (0..n)
        .map(|i| {
            (0..slots)
                .map(|s| {
                    let j = i as i64 + (s as i64 - h as i64) * d as i64;
                    (0..n as i64).contains(&j).then(|| {
                        let j = j as usize;
                        (0..dk).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt()
                    })
                })
                .collect()
        })
        .collect()
}

/// Whether query `i` may attend to key `j` under `cfg` (single head).
pub fn allowed(cfg: &PatternConfig, i: usize, j: usize) -> bool {
    if cfg.global_positions.contains(&i) || cfg.global_positions.contains(&j) {
        return true;
    }
    let (h, d) = (cfg.window.half_window as i64, cfg.window.dilation as i64);
    let off = j as i64 - i as i64;
    let within = off % d == 0 && off.abs() <= h * d;
    match cfg.mode {
        Mode::Bidirectional => within,
        Mode::Causal => within && off <= 0,
    }
}

fn param(m: &Model<f64>, name: &str) -> Mat {
    let id = m.store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let t = m.store.get(id);
    if t.rank() == 1 {
        vec![t.data().to_vec()]
    } else {
        to_mat(t)
    }
}

fn vec_param(m: &Model<f64>, name: &str) -> Vec<f64> {
    param(m, name).remove(0)
}

fn embed(m: &Model<f64>, tokens: &[usize], table: &str) -> Mat {
    let te = param(m, "tok_emb");
    let pe = param(m, table);
    tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| te[t].iter().zip(&pe[i]).map(|(a, b)| a + b).collect())
        .collect()
}

fn ffn(m: &Model<f64>, p: &str, x: &Mat) -> Mat {
    let h = matmul(x, &param(m, &format!("{p}.w1")));
    let b1 = vec_param(m, &format!("{p}.b1"));
    let h: Mat = h
        .iter()
        .map(|r| r.iter().zip(&b1).map(|(a, b)| gelu(a + b)).collect())
        .collect();
    let b2 = vec_param(m, &format!("{p}.b2"));
    matmul(&h, &param(m, &format!("{p}.w2")))
        .iter()
        .map(|r| r.iter().zip(&b2).map(|(a, b)| a + b).collect())
        .collect()
}

fn norm(m: &Model<f64>, p: &str, x: &Mat) -> Mat {
    layernorm(x, &vec_param(m, &format!("{p}.gamma")), &vec_param(m, &format!("{p}.beta")))
}

/// Pre-LN encoder with full attention where `allowed` permits, reading the
/// local projections of every layer.
pub fn dense_encoder(m: &Model<f64>, tokens: &[usize], allowed: impl Fn(usize, usize) -> bool + Copy) -> Mat {
    let mut x = embed(m, tokens, "pos_emb");
    for l in 0..m.config.layers {
        let p = format!("enc.{l}");
        let a = norm(m, &format!("{p}.ln1"), &x);
        let w: Vec<Mat> = ["w_qs", "w_ks", "w_vs", "w_o"]
            .iter()
            .map(|n| param(m, &format!("{p}.attn.{n}")))
            .collect();
        let a = mha(&a, &a, [&w[0], &w[1], &w[2], &w[3]], m.config.heads, allowed);
        x = add(&x, &a);
        let f = ffn(m, &format!("{p}.ffn"), &norm(m, &format!("{p}.ln2"), &x));
        x = add(&x, &f);
    }
    norm(m, "ln_f", &x)
}

pub fn tied_head(m: &Model<f64>, h: &Mat) -> Mat {
    let te = param(m, "tok_emb");
    h.iter()
        .map(|r| te.iter().map(|e| r.iter().zip(e).map(|(a, b)| a * b).sum()).collect())
        .collect()
}

/// Logits of a standard encoder-decoder: dense bidirectional encoder,
/// causal decoder self-attention, full cross-attention.
pub fn dense_led_logits(m: &Model<f64>, src: &[usize], tgt: &[usize]) -> Mat {
    let enc = dense_encoder(m, src, |_, _| true);
    let mut x = embed(m, tgt, "dec.pos_emb");
    for l in 0..m.config.decoder_layers {
        let p = format!("dec.{l}");
        let ws = |kind: &str| -> Vec<Mat> {
            ["w_q", "w_k", "w_v", "w_o"]
                .iter()
                .map(|n| param(m, &format!("{p}.{kind}.{n}")))
                .collect()
        };
        let s = ws("self");
        let a = norm(m, &format!("{p}.ln1"), &x);
        let a = mha(&a, &a, [&s[0], &s[1], &s[2], &s[3]], m.config.heads, |i, j| j <= i);
        x = add(&x, &a);
        let c = ws("cross");
        let q = norm(m, &format!("{p}.ln_cross"), &x);
        let a = mha(&q, &enc, [&c[0], &c[1], &c[2], &c[3]], m.config.heads, |_, _| true);
        x = add(&x, &a);
        let f = ffn(m, &format!("{p}.ffn"), &norm(m, &format!("{p}.ln2"), &x));
        x = add(&x, &f);
    }
    tied_head(m, &norm(m, "dec.ln_f", &x))
}

/// `Σ_i (number of keys of query i)` by direct enumeration.
pub fn brute_nonzeros(n: usize, h: usize, d: usize, mode: Mode) -> usize {
    let cfg = PatternConfig::new(n, h, d, mode);
    (0..n).map(|i| (0..n).filter(|&j| allowed(&cfg, i, j)).count()).sum()
}

use longformer::attention::{longformer_self_attention, AttentionImpl, AttentionInit, AttentionParams};
use longformer::autodiff::Graph;
use longformer::params::ParamStore;

/// A fresh layer (global projections matched to the local ones at init).
pub fn attention_layer(rng: &mut ChaCha8Rng, dmodel: usize, heads: usize, globals: bool) -> (ParamStore<f64>, AttentionParams) {
    let mut store = ParamStore::new();
    let p = AttentionParams::init(
        &mut store,
        "attn",
        AttentionInit {
            dmodel,
            heads,
            global_projections: globals,
            relative_bias: None,
            std: 0.4,
        },
        rng,
    )
    .unwrap();
    (store, p)
}

pub fn run_layer(store: &ParamStore<f64>, p: &AttentionParams, x: &Mat, cfg: &PatternConfig, imp: AttentionImpl) -> Mat {
    let mut g = Graph::new();
    let xn = g.constant(from_mat(x));
    let out = longformer_self_attention(&mut g, store, p, xn, cfg, imp).unwrap();
    to_mat(g.value(out))
}

pub fn local_weights(store: &ParamStore<f64>, p: &AttentionParams) -> [Mat; 4] {
    [p.w_qs, p.w_ks, p.w_vs, p.w_o].map(|id| to_mat(store.get(id)))
}

/// Largest difference between the sliding-window layer with `h ≥ n` and
/// plain dense attention, for one random case with `n ≤ 64`. Global sets
/// cycle through `∅`, `{0}` and `{0, n−1}`.
pub fn dense_equivalence_case(seed: u64) -> f64 {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let n = rng.gen_range(1..=64);
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    let dmodel = heads * rng.gen_range(1..=4);
    let globals: Vec<usize> = match seed % 3 {
        0 => vec![],
        1 => vec![0],
        _ => vec![0, n - 1],
    };
    let h = n + rng.gen_range(0..4);
    let cfg = PatternConfig::new(n, h, 1, Mode::Bidirectional).with_globals(&globals);
    let (store, p) = attention_layer(&mut rng, dmodel, heads, !globals.is_empty());
    let x = random_mat(&mut rng, n, dmodel, 1.0);
    let [wq, wk, wv, wo] = local_weights(&store, &p);
    let oracle = mha(&x, &x, [&wq, &wk, &wv, &wo], heads, |_, _| true);
    [AttentionImpl::Auto, AttentionImpl::Loop, AttentionImpl::Dense, AttentionImpl::Oracle]
        .into_iter()
        .map(|imp| max_abs_diff(&run_layer(&store, &p, &x, &cfg, imp), &oracle))
        .fold(0.0, f64::max)
}

fn logits_of(g: &Graph<f64>, id: longformer::autodiff::NodeId) -> Mat {
    to_mat(g.value(id))
}

/// Perturbs one random token per probe and counts logit rows before it
/// that changed at all.
pub fn charlm_causality_violations(seed: u64, probes: usize) -> usize {
    let cfg = longformer::model::ModelConfig {
        dtype: longformer::DType::Double,
        ..longformer::model::ModelConfig::charlm(2, 2, 16, 48, 3)
    };
    let m = Model::<f64>::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..probes {
        let n = rng.gen_range(2..=48);
        let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(0..256)).collect();
        let j = rng.gen_range(0..n);
        let mut other = tokens.clone();
        other[j] = (other[j] + rng.gen_range(1..256)) % 256;
        let mut g = Graph::new();
        let a = m.charlm_logits(&mut g, &tokens, None).unwrap();
        let b = m.charlm_logits(&mut g, &other, None).unwrap();
        let (a, b) = (logits_of(&g, a), logits_of(&g, b));
        bad += (0..j).filter(|&i| a[i] != b[i]).count();
    }
    bad
}

/// Same probe for the decoder prefix of an encoder-decoder model.
pub fn led_decoder_causality_violations(seed: u64, probes: usize) -> usize {
    let cfg = longformer::model::ModelConfig {
        dtype: longformer::DType::Double,
        ..longformer::model::ModelConfig::led(1, 2, 2, 16, 24, 24, 4)
    };
    let m = Model::<f64>::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..probes {
        let ns = rng.gen_range(1..24);
        let mut src = vec![longformer::model::BOS_ID];
        src.extend((0..ns).map(|_| rng.gen_range(0..256)));
        let nt = rng.gen_range(2..=24);
        let mut tgt = vec![longformer::model::BOS_ID];
        tgt.extend((1..nt).map(|_| rng.gen_range(0..256)));
        let j = rng.gen_range(1..nt);
        let mut other = tgt.clone();
        other[j] = (other[j] + rng.gen_range(1..256)) % 256;
        let mut g = Graph::new();
        let a = m.led_logits(&mut g, &src, &tgt, None).unwrap();
        let b = m.led_logits(&mut g, &src, &other, None).unwrap();
        let (a, b) = (logits_of(&g, a), logits_of(&g, b));
        bad += (0..j).filter(|&i| a[i] != b[i]).count();
    }
    bad
}

/// Checks that the window plan of `(n, l, s)` scores each token once.
/// Returns a description of the first problem.
pub fn eval_partition_problem(n: usize, l: usize, s: usize) -> Option<String> {
    use longformer::eval::{plan_windows, EvalProtocol};
    let plan = plan_windows(n, EvalProtocol { eval_len: l, step: s }).ok()?;
    let mut hits = vec![0u32; n];
    for w in &plan {
        if w.end - w.start != l || w.score_from < w.start || w.end > n {
            return Some(format!("window {w:?} for N={n} L={l} s={s}"));
        }
        for h in &mut hits[w.score_from..w.end] {
            *h += 1;
        }
    }
    hits.iter()
        .position(|&h| h != 1)
        .map(|t| format!("token {t} scored {} times for N={n} L={l} s={s}", hits[t]))
}

/// Random `(N, L, s)` triples with `s <= L <= N`.
pub fn random_eval_triples(seed: u64, count: usize) -> Vec<(usize, usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let l = rng.gen_range(1..200);
            let n = rng.gen_range(l..2000);
            let s = rng.gen_range(1..=l);
            (n, l, s)
        })
        .collect()
}

pub fn t(m: &Mat) -> Tensor<f64> {
    Tensor::from_rows(m)
}

pub fn qkv(rng: &mut ChaCha8Rng, n: usize, dk: usize) -> (Mat, Mat, Mat) {
    (random_mat(rng, n, dk, 1.0), random_mat(rng, n, dk, 1.0), random_mat(rng, n, dk, 1.0))
}

/// Returns the worst value and gradient difference between chunk and loop.
pub fn chunk_vs_loop(rng: &mut ChaCha8Rng, n: usize, h: usize, mode: longformer::pattern::Mode) -> f64 {
    let (q, k, _) = qkv(rng, n, 3);
    let cfg = PatternConfig::new(n, h, 1, mode);
    let (a, _) = longformer::kernels::band::band_qk(longformer::kernels::band::BandImpl::Loop, &t(&q), &t(&k), &cfg).unwrap();
    let (b, _) = longformer::kernels::band::band_qk(longformer::kernels::band::BandImpl::Chunk, &t(&q), &t(&k), &cfg).unwrap();
    assert_eq!(a.valid_mask, b.valid_mask);
    let mut worst = a.data.max_abs_diff(&b.data);
    let grad: Vec<f64> = (0..n * a.slots()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (dq1, dk1) = longformer::kernels::band::band_qk_backward(longformer::kernels::band::BandImpl::Loop, &t(&q), &t(&k), &cfg, &grad).unwrap();
    let (dq2, dk2) = longformer::kernels::band::band_qk_backward(longformer::kernels::band::BandImpl::Chunk, &t(&q), &t(&k), &cfg, &grad).unwrap();
    worst = worst.max(dq1.max_abs_diff(&dq2)).max(dk1.max_abs_diff(&dk2));
    worst
}

/// Worst relative gradient error of one attention layer with a global
/// token at position 3 and diverged global projections.
pub fn layer_grad_error(imp: AttentionImpl) -> f64 {
    use longformer::autodiff::{grad_check, GradCheckOptions};
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 16;
    let cfg = PatternConfig::new(n, 2, 1, Mode::Bidirectional).with_globals(&[3]);
    let (mut store, p) = attention_layer(&mut rng, 8, 2, true);
    // break the matched init so global gradients are distinguishable
    let g = p.global.unwrap();
    store.get_mut(g.w_qg).data_mut().iter_mut().for_each(|v| *v *= 0.8);
    let x = Tensor::from_rows(&random_mat(&mut rng, n, 8, 1.0));
    let w = Tensor::from_rows(&random_mat(&mut rng, n, 8, 1.0));
    grad_check(
        &store,
        |g, s| {
            let xn = g.constant(x.clone());
            let wn = g.constant(w.clone());
            let out = longformer_self_attention(g, s, &p, xn, &cfg, imp)?;
            let prod = g.mul(out, wn)?;
            Ok(g.sum(prod))
        },
        GradCheckOptions {
            samples: 64,
            ..Default::default()
        },
    )
    .unwrap()
    .max_rel_error
}

pub fn stack_influence(windows: &[longformer::pattern::Window], globals: &[usize], n: usize, probe: usize) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfgs: Vec<PatternConfig> = windows
        .iter()
        .map(|w| PatternConfig::new(n, w.half_window, w.dilation, Mode::Bidirectional).with_globals(globals))
        .collect();
    let stack = longformer::attention::AttentionStack::<f64>::new(8, 2, cfgs.clone(), 0.4, &mut rng).unwrap();
    let x = Tensor::from_rows(&random_mat(&mut rng, n, 8, 1.0));
    let measured = longformer::attention::influence_width(&x, probe, |x| stack.forward(x, AttentionImpl::Auto)).unwrap();
    (measured, longformer::pattern::reachable_from(&cfgs, probe).unwrap())
}

/// Random stack of at most 3 layers (h <= 4, d <= 3): the measured
/// influence of a probe must equal the reachable set and stay within the
/// theoretical half-width.
pub fn receptive_field_problem(rng: &mut ChaCha8Rng) -> Option<String> {
    use longformer::pattern::{receptive_field, Window};
    let layers = rng.gen_range(1..=3);
    let windows: Vec<Window> = (0..layers)
        .map(|_| Window::new(rng.gen_range(1..=4), rng.gen_range(1..=3)))
        .collect();
    let n = 48;
    let probe = rng.gen_range(0..n);
    let (measured, reachable) = stack_influence(&windows, &[], n, probe);
    let report = receptive_field(&windows).unwrap();
    let r = report.theoretical_half_width;
    if measured.iter().any(|&i| i.abs_diff(probe) > r) || measured != reachable {
        return Some(format!("{windows:?} probe {probe}: measured {measured:?}, reachable {reachable:?}"));
    }
    report.with_empirical(&measured).err().map(|e| e.to_string())
}
