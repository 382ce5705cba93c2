//! Model assemblies: causal character LM, masked LM and the sparse
//! encoder / dense decoder (LED).
//!
//! All variants share the same pieces: byte-level token embeddings, learned
//! absolute positions, pre-layernorm residual blocks with a GeLU
//! feed-forward of width `4·dmodel`, a final layer norm and an output head
//! tied to the token embedding.

mod beam;
mod check;
mod config;

pub use beam::{beam_search, greedy_decode, BeamOptions, StepScorer};
pub use check::{check_model_gradients, GradCheckConfig};
pub use config::{
    Architecture, LayerSpec, ModelConfig, BOS_ID, EOS_ID, MASK_ID, PAD_ID, VOCAB,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    dense_attention, longformer_self_attention, normal_tensor, AttentionInit, AttentionParams,
    DenseAttentionParams,
};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::kernels::dense::log_softmax_rows;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Layer-norm epsilon used throughout.
pub const LN_EPS: f64 = 1e-5;

/// Gain and bias of a layer norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// `D → 4D → D` feed-forward with GeLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Pre-layernorm block with sliding-window self-attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub ln1: Norm,
    pub attn: AttentionParams,
    pub ln2: Norm,
    pub ffn: FeedForward,
}

/// Decoder block: causal dense self-attention, dense cross-attention over
/// the encoder output, feed-forward.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderBlock {
    pub ln1: Norm,
    pub self_attn: DenseAttentionParams,
    pub ln_cross: Norm,
    pub cross_attn: DenseAttentionParams,
    pub ln2: Norm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub pos_emb: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub ln_f: Norm,
}

/// Parameters and layout of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Element> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: Norm,
    pub decoder: Option<Decoder>,
}

/// Randomness for dropout; `None` runs the model deterministically.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

fn add_norm<T: Element>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Norm {
    Norm {
        gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[d])),
        beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[d])),
    }
}

fn add_ffn<T: Element, R: Rng>(store: &mut ParamStore<T>, prefix: &str, d: usize, std: f64, rng: &mut R) -> FeedForward {
    FeedForward {
        w1: store.add(format!("{prefix}.w1"), normal_tensor(rng, d, 4 * d, std)),
        b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[4 * d])),
        w2: store.add(format!("{prefix}.w2"), normal_tensor(rng, 4 * d, d, std)),
        b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d])),
    }
}

impl<T: Element> Model<T> {
    /// Builds a model with weights drawn from `N(0, init_std²)`, unit
    /// layer-norm gains and zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dmodel;
        let std = config.init_std;
        let mut store = ParamStore::new();
        let tok_emb = store.add("tok_emb", normal_tensor(&mut rng, config.vocab, d, std));
        let pos_emb = store.add("pos_emb", normal_tensor(&mut rng, config.max_positions, d, std));
        let reach = config.max_reach();
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let prefix = format!("enc.{l}");
            let ln1 = add_norm(&mut store, &format!("{prefix}.ln1"), d);
            let attn = AttentionParams::init(
                &mut store,
                &format!("{prefix}.attn"),
                AttentionInit {
                    dmodel: d,
                    heads: config.heads,
                    global_projections: !config.global_positions.is_empty(),
                    relative_bias: config.relative_bias.then_some(reach),
                    std,
                },
                &mut rng,
            )?;
            let ln2 = add_norm(&mut store, &format!("{prefix}.ln2"), d);
            let ffn = add_ffn(&mut store, &format!("{prefix}.ffn"), d, std, &mut rng);
            blocks.push(Block { ln1, attn, ln2, ffn });
        }
        let ln_f = add_norm(&mut store, "ln_f", d);
        let decoder = if config.architecture == Architecture::Led {
            let pos_emb = store.add(
                "dec.pos_emb",
                normal_tensor(&mut rng, config.decoder_max_positions, d, std),
            );
            let mut blocks = Vec::with_capacity(config.decoder_layers);
            for l in 0..config.decoder_layers {
                let prefix = format!("dec.{l}");
                let ln1 = add_norm(&mut store, &format!("{prefix}.ln1"), d);
                let self_attn =
                    DenseAttentionParams::init(&mut store, &format!("{prefix}.self"), d, config.heads, std, &mut rng)?;
                let ln_cross = add_norm(&mut store, &format!("{prefix}.ln_cross"), d);
                let cross_attn =
                    DenseAttentionParams::init(&mut store, &format!("{prefix}.cross"), d, config.heads, std, &mut rng)?;
                let ln2 = add_norm(&mut store, &format!("{prefix}.ln2"), d);
                let ffn = add_ffn(&mut store, &format!("{prefix}.ffn"), d, std, &mut rng);
                blocks.push(DecoderBlock {
                    ln1,
                    self_attn,
                    ln_cross,
                    cross_attn,
                    ln2,
                    ffn,
                });
            }
            let ln_f = add_norm(&mut store, "dec.ln_f", d);
            Some(Decoder { pos_emb, blocks, ln_f })
        } else {
            None
        };
        Ok(Model {
            config,
            store,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            decoder,
        })
    }

    /// Rebuilds a model around existing parameter values.
    ///
    /// `tensors` must name exactly the parameters `config` describes.
    pub fn from_tensors(config: ModelConfig, tensors: &[(String, Tensor<T>)]) -> Result<Self> {
        // the seed only fixes shapes; every value is overwritten
        let mut m = Self::new(config, 0)?;
        m.store.load_from(tensors)?;
        Ok(m)
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    pub fn all_finite(&self) -> bool {
        self.store.iter().all(|(_, _, t)| t.all_finite())
    }

    fn norm(&self, g: &mut Graph<T>, x: NodeId, n: Norm) -> Result<NodeId> {
        let gamma = g.param(&self.store, n.gamma);
        let beta = g.param(&self.store, n.beta);
        g.layernorm(x, gamma, beta, LN_EPS)
    }

    fn feed_forward(&self, g: &mut Graph<T>, x: NodeId, f: FeedForward) -> Result<NodeId> {
        let w1 = g.param(&self.store, f.w1);
        let b1 = g.param(&self.store, f.b1);
        let w2 = g.param(&self.store, f.w2);
        let b2 = g.param(&self.store, f.b2);
        let h = g.matmul(x, w1)?;
        let h = g.add_row_bias(h, b1)?;
        let h = g.gelu(h);
        let h = g.matmul(h, w2)?;
        g.add_row_bias(h, b2)
    }

    fn dropout(&self, g: &mut Graph<T>, x: NodeId, rng: &mut DropoutRng<'_>) -> NodeId {
        match rng {
            Some(r) => g.dropout(x, self.config.dropout, &mut **r),
            None => x,
        }
    }

    fn embed(&self, g: &mut Graph<T>, tokens: &[usize], positions: ParamId, rng: &mut DropoutRng<'_>) -> Result<NodeId> {
        if tokens.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::OutOfRange(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab
            )));
        }
        let table_len = self.store.get(positions).shape()[0];
        if tokens.len() > table_len {
            return Err(Error::OutOfRange(format!(
                "sequence of {} tokens exceeds {table_len} positions",
                tokens.len()
            )));
        }
        let te = g.param(&self.store, self.tok_emb);
        let pe = g.param(&self.store, positions);
        let x = g.gather_rows(te, tokens)?;
        let idx: Vec<usize> = (0..tokens.len()).collect();
        let p = g.gather_rows(pe, &idx)?;
        let x = g.add(x, p)?;
        Ok(self.dropout(g, x, rng))
    }

    /// Final hidden states `[n, dmodel]` of the sliding-window stack.
    pub fn encode(&self, g: &mut Graph<T>, tokens: &[usize], mut rng: DropoutRng<'_>) -> Result<NodeId> {
        let n = tokens.len();
        let mut x = self.embed(g, tokens, self.pos_emb, &mut rng)?;
        for (l, b) in self.blocks.iter().enumerate() {
            let cfg = self.config.pattern(l, n)?;
            let a = self.norm(g, x, b.ln1)?;
            let a = longformer_self_attention(g, &self.store, &b.attn, a, &cfg, self.config.attention)?;
            let a = self.dropout(g, a, &mut rng);
            x = g.add(x, a)?;
            let f = self.norm(g, x, b.ln2)?;
            let f = self.feed_forward(g, f, b.ffn)?;
            let f = self.dropout(g, f, &mut rng);
            x = g.add(x, f)?;
        }
        self.norm(g, x, self.ln_f)
    }

    /// Output logits `h·Eᵀ` through the tied token embedding.
    pub fn head(&self, g: &mut Graph<T>, h: NodeId) -> Result<NodeId> {
        let te = g.param(&self.store, self.tok_emb);
        g.matmul_nt(h, te)
    }

    /// Next-token logits `[n, V]`; row `i` sees only `tokens[..=i]`.
    pub fn charlm_logits(&self, g: &mut Graph<T>, tokens: &[usize], rng: DropoutRng<'_>) -> Result<NodeId> {
        self.expect(Architecture::CharLm)?;
        let h = self.encode(g, tokens, rng)?;
        self.head(g, h)
    }

    /// Mean next-byte loss (nats) of `seq[1..]` given `seq[..n-1]`.
    pub fn charlm_loss(&self, g: &mut Graph<T>, seq: &[usize], rng: DropoutRng<'_>) -> Result<NodeId> {
        if seq.len() < 2 {
            return Err(Error::Data("a training sequence needs at least two tokens".into()));
        }
        let n = seq.len() - 1;
        let logits = self.charlm_logits(g, &seq[..n], rng)?;
        g.cross_entropy(logits, &seq[1..], None)
    }

    /// Per-position negative log-likelihood (nats) of `targets` given
    /// `inputs`, without recording gradients.
    pub fn charlm_nll(&self, inputs: &[usize], targets: &[usize]) -> Result<Vec<f64>> {
        if inputs.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} inputs for {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let mut g = Graph::new();
        let logits = self.charlm_logits(&mut g, inputs, None)?;
        let v = self.config.vocab;
        let logp = log_softmax_rows(g.value(logits).data(), v);
        let mut out = Vec::with_capacity(targets.len());
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::OutOfRange(format!("target id {t} outside vocabulary of {v}")));
            }
            out.push(-logp[i * v + t].as_f64());
        }
        Ok(out)
    }

    /// Masked-LM loss over the corrupted positions of `tokens`.
    pub fn mlm_loss(
        &self,
        g: &mut Graph<T>,
        tokens: &[usize],
        mask_prob: f64,
        seed: u64,
        rng: DropoutRng<'_>,
    ) -> Result<(NodeId, MlmBatch)> {
        self.expect(Architecture::Mlm)?;
        let mut corrupt_rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = mlm_corrupt(tokens, mask_prob, &mut corrupt_rng)?;
        let h = self.encode(g, &batch.input, rng)?;
        let logits = self.head(g, h)?;
        let loss = g.cross_entropy(logits, &batch.targets, Some(&batch.weights))?;
        Ok((loss, batch))
    }

    /// Encoder states of an LED model. `src` must start with [`BOS_ID`].
    pub fn led_encode(&self, g: &mut Graph<T>, src: &[usize], rng: DropoutRng<'_>) -> Result<NodeId> {
        self.expect(Architecture::Led)?;
        if src.first() != Some(&BOS_ID) {
            return Err(Error::Data(format!(
                "led source must start with the start-of-sequence id {BOS_ID}"
            )));
        }
        self.encode(g, src, rng)
    }

    /// Decoder logits `[nt, V]` for `tgt_prefix` attending to `enc`.
    pub fn led_decode(&self, g: &mut Graph<T>, enc: NodeId, tgt_prefix: &[usize], mut rng: DropoutRng<'_>) -> Result<NodeId> {
        let dec = self
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Config("model has no decoder".into()))?;
        let mut x = self.embed(g, tgt_prefix, dec.pos_emb, &mut rng)?;
        for b in &dec.blocks {
            let a = self.norm(g, x, b.ln1)?;
            let a = dense_attention(g, &self.store, &b.self_attn, a, a, true)?;
            let a = self.dropout(g, a, &mut rng);
            x = g.add(x, a)?;
            let c = self.norm(g, x, b.ln_cross)?;
            let c = dense_attention(g, &self.store, &b.cross_attn, c, enc, false)?;
            let c = self.dropout(g, c, &mut rng);
            x = g.add(x, c)?;
            let f = self.norm(g, x, b.ln2)?;
            let f = self.feed_forward(g, f, b.ffn)?;
            let f = self.dropout(g, f, &mut rng);
            x = g.add(x, f)?;
        }
        let h = self.norm(g, x, dec.ln_f)?;
        self.head(g, h)
    }

    pub fn led_logits(&self, g: &mut Graph<T>, src: &[usize], tgt_prefix: &[usize], mut rng: DropoutRng<'_>) -> Result<NodeId> {
        let enc = self.led_encode(g, src, rng.as_deref_mut())?;
        self.led_decode(g, enc, tgt_prefix, rng)
    }

    /// Teacher-forced loss: decoder input `[BOS, y…]`, targets `[y…, EOS]`.
    pub fn led_loss(&self, g: &mut Graph<T>, src: &[usize], target: &[usize], mut rng: DropoutRng<'_>) -> Result<NodeId> {
        let mut input = Vec::with_capacity(target.len() + 1);
        input.push(BOS_ID);
        input.extend_from_slice(target);
        let mut gold = target.to_vec();
        gold.push(EOS_ID);
        let logits = self.led_logits(g, src, &input, rng.as_deref_mut())?;
        g.cross_entropy(logits, &gold, None)
    }

    /// Step scorer that decodes from a fixed source sequence.
    pub fn led_scorer(&self, src: &[usize]) -> Result<LedScorer<'_, T>> {
        let mut g = Graph::new();
        let enc = self.led_encode(&mut g, src, None)?;
        Ok(LedScorer {
            model: self,
            enc: g.value(enc).clone(),
        })
    }

    fn expect(&self, arch: Architecture) -> Result<()> {
        if self.config.architecture != arch {
            return Err(Error::Config(format!(
                "operation needs a {arch:?} model, this one is {:?}",
                self.config.architecture
            )));
        }
        Ok(())
    }
}

/// Next-token scorer over a cached encoder output.
pub struct LedScorer<'a, T: Element> {
    model: &'a Model<T>,
    enc: Tensor<T>,
}

impl<T: Element> StepScorer for LedScorer<'_, T> {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let enc = g.constant(self.enc.clone());
        let logits = self.model.led_decode(&mut g, enc, prefix, None)?;
        let v = self.model.config.vocab;
        let last = g.value(logits).row(prefix.len() - 1);
        Ok(log_softmax_rows(last, v).into_iter().map(|x| x.as_f64()).collect())
    }
}

/// Corrupted input and loss weights of one masked-LM example.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmBatch {
    pub input: Vec<usize>,
    pub targets: Vec<usize>,
    /// 1 on selected positions, 0 elsewhere.
    pub weights: Vec<f64>,
    pub selected: usize,
}

/// Selects each position with probability `mask_prob`; a selected token is
/// replaced by `<mask>` 80% of the time, by a random byte 10% and kept 10%.
pub fn mlm_corrupt<R: Rng>(tokens: &[usize], mask_prob: f64, rng: &mut R) -> Result<MlmBatch> {
    if !(mask_prob > 0.0 && mask_prob < 1.0) {
        return Err(Error::Config(format!("mask probability {mask_prob} outside (0, 1)")));
    }
    let mut input = tokens.to_vec();
    let mut weights = vec![0.0; tokens.len()];
    let mut selected = 0;
    for (i, slot) in input.iter_mut().enumerate() {
        if rng.gen::<f64>() >= mask_prob {
            continue;
        }
        selected += 1;
        weights[i] = 1.0;
        let r = rng.gen::<f64>();
        if r < 0.8 {
            *slot = MASK_ID;
        } else if r < 0.9 {
            *slot = rng.gen_range(0..256);
        }
    }
    if selected == 0 {
        return Err(Error::Data(format!(
            "no position of {} selected for masking; use a longer input or a higher mask probability",
            tokens.len()
        )));
    }
    Ok(MlmBatch {
        input,
        targets: tokens.to_vec(),
        weights,
        selected,
    })
}
