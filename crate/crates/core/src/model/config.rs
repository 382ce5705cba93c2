use serde::{Deserialize, Serialize};

use crate::attention::AttentionImpl;
use crate::error::{Error, Result};
use crate::pattern::{window_from_fields, Mode, PatternConfig, Window};
use crate::tensor::DType;

/// Byte ids `0..256` plus four reserved symbols.
pub const VOCAB: usize = 260;
pub const MASK_ID: usize = 256;
pub const PAD_ID: usize = 257;
pub const BOS_ID: usize = 258;
pub const EOS_ID: usize = 259;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Autoregressive character LM (causal windows).
    CharLm,
    /// Masked LM (bidirectional windows).
    Mlm,
    /// Sparse encoder with a dense decoder.
    Led,
}

impl Architecture {
    /// Attention direction of the (encoder) stack.
    pub fn mode(self) -> Mode {
        match self {
            Architecture::CharLm => Mode::Causal,
            Architecture::Mlm | Architecture::Led => Mode::Bidirectional,
        }
    }
}

/// Window of one layer, with optional per-head overrides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub window: Window,
    pub per_head: Vec<Window>,
}

impl LayerSpec {
    pub fn new(half_window: usize, dilation: usize) -> Self {
        LayerSpec {
            window: Window::new(half_window, dilation),
            per_head: Vec::new(),
        }
    }

    pub fn with_heads(mut self, heads: Vec<Window>) -> Self {
        self.per_head = heads;
        self
    }

    /// Windows used by heads `0..heads`.
    pub fn head_windows(&self, heads: usize) -> Vec<Window> {
        (0..heads)
            .map(|h| self.per_head.get(h).copied().unwrap_or(self.window))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayerSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    half_window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dilation: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    per_head: Vec<Window>,
}

impl Serialize for LayerSpec {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        RawLayerSpec {
            window: None,
            half_window: Some(self.window.half_window),
            dilation: Some(self.window.dilation),
            per_head: self.per_head.clone(),
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for LayerSpec {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let raw = RawLayerSpec::deserialize(de)?;
        let window = window_from_fields(raw.window, raw.half_window, raw.dilation)
            .map_err(serde::de::Error::custom)?;
        Ok(LayerSpec {
            window,
            per_head: raw.per_head,
        })
    }
}

fn default_vocab() -> usize {
    VOCAB
}

fn default_std() -> f64 {
    0.02
}

fn default_dtype() -> DType {
    DType::Single
}

/// Description of a model. Unknown JSON keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Number of (encoder) layers.
    pub layers: usize,
    pub heads: usize,
    pub dmodel: usize,
    /// Per-head width; must equal `dmodel / heads` when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dk: Option<usize>,
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    pub max_positions: usize,
    /// One entry per layer, or a single entry shared by all layers.
    pub windows: Vec<LayerSpec>,
    #[serde(default)]
    pub global_positions: Vec<usize>,
    #[serde(default)]
    pub dropout: f64,
    /// Learned additive bias per key offset inside the window.
    #[serde(default)]
    pub relative_bias: bool,
    #[serde(default)]
    pub decoder_layers: usize,
    #[serde(default)]
    pub decoder_max_positions: usize,
    #[serde(default = "default_std")]
    pub init_std: f64,
    #[serde(default)]
    pub attention: AttentionImpl,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    /// Length of the position table before the last `extend-pos`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_positions: Option<usize>,
}

impl ModelConfig {
    /// Small causal LM with the same window on every layer.
    pub fn charlm(layers: usize, heads: usize, dmodel: usize, max_positions: usize, half_window: usize) -> Self {
        ModelConfig {
            architecture: Architecture::CharLm,
            layers,
            heads,
            dmodel,
            dk: None,
            vocab: VOCAB,
            max_positions,
            windows: vec![LayerSpec::new(half_window, 1)],
            global_positions: Vec::new(),
            dropout: 0.0,
            relative_bias: false,
            decoder_layers: 0,
            decoder_max_positions: 0,
            init_std: default_std(),
            attention: AttentionImpl::Auto,
            dtype: DType::Single,
            original_positions: None,
        }
    }

    pub fn mlm(layers: usize, heads: usize, dmodel: usize, max_positions: usize, half_window: usize) -> Self {
        ModelConfig {
            architecture: Architecture::Mlm,
            ..Self::charlm(layers, heads, dmodel, max_positions, half_window)
        }
    }

    /// Encoder-decoder with global attention on the first source token.
    pub fn led(
        layers: usize,
        decoder_layers: usize,
        heads: usize,
        dmodel: usize,
        max_positions: usize,
        decoder_max_positions: usize,
        half_window: usize,
    ) -> Self {
        ModelConfig {
            architecture: Architecture::Led,
            global_positions: vec![0],
            decoder_layers,
            decoder_max_positions,
            ..Self::charlm(layers, heads, dmodel, max_positions, half_window)
        }
    }

    pub fn dk(&self) -> usize {
        self.dmodel / self.heads.max(1)
    }

    /// Window spec of layer `l`.
    pub fn layer(&self, l: usize) -> &LayerSpec {
        if self.windows.len() == 1 {
            &self.windows[0]
        } else {
            &self.windows[l]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.heads == 0 || self.dmodel == 0 || self.dmodel % self.heads != 0 {
            return bad(format!(
                "dmodel {} must be a positive multiple of heads {}",
                self.dmodel, self.heads
            ));
        }
        if let Some(dk) = self.dk {
            if dk * self.heads != self.dmodel {
                return bad(format!("heads·dk = {} differs from dmodel {}", dk * self.heads, self.dmodel));
            }
        }
        if self.layers == 0 {
            return bad("a model needs at least one layer".into());
        }
        if self.vocab < VOCAB {
            return bad(format!("vocab {} is smaller than the byte vocabulary {VOCAB}", self.vocab));
        }
        if self.max_positions == 0 {
            return bad("max_positions must be positive".into());
        }
        if self.windows.len() != 1 && self.windows.len() != self.layers {
            return bad(format!(
                "{} window entries for {} layers (give one or one per layer)",
                self.windows.len(),
                self.layers
            ));
        }
        for spec in &self.windows {
            spec.window.validate()?;
            if !spec.per_head.is_empty() && spec.per_head.len() != self.heads {
                return bad(format!("{} per-head windows for {} heads", spec.per_head.len(), self.heads));
            }
            for w in &spec.per_head {
                w.validate()?;
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad(format!("init_std {} must be positive", self.init_std));
        }
        if self.global_positions.windows(2).any(|p| p[0] >= p[1]) {
            return bad("global positions must be sorted and unique".into());
        }
        if let Some(&g) = self.global_positions.iter().find(|&&g| g >= self.max_positions) {
            return bad(format!("global position {g} beyond max_positions {}", self.max_positions));
        }
        match self.architecture {
            Architecture::CharLm => {
                if !self.global_positions.is_empty() {
                    return Err(Error::Unsupported(
                        "global positions cannot be combined with causal attention".into(),
                    ));
                }
            }
            Architecture::Mlm => {}
            Architecture::Led => {
                if self.decoder_layers == 0 || self.decoder_max_positions == 0 {
                    return bad("led needs decoder_layers and decoder_max_positions".into());
                }
                if self.global_positions.first() != Some(&0) {
                    return bad("led encoders keep global attention on position 0".into());
                }
            }
        }
        if self.architecture != Architecture::Led && self.decoder_layers > 0 {
            return bad("decoder layers are only used by led".into());
        }
        Ok(())
    }

    /// Pattern of layer `l` for a sequence of `n` tokens.
    pub fn pattern(&self, l: usize, n: usize) -> Result<PatternConfig> {
        let spec = self.layer(l);
        let globals: Vec<usize> = self.global_positions.iter().copied().filter(|&g| g < n).collect();
        let cfg = PatternConfig {
            n,
            window: spec.window,
            mode: self.architecture.mode(),
            global_positions: globals,
            per_head: spec.per_head.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Largest key offset any head of any layer reaches.
    pub fn max_reach(&self) -> usize {
        (0..self.layers)
            .flat_map(|l| self.layer(l).head_windows(self.heads))
            .map(|w| w.half_window * w.dilation)
            .max()
            .unwrap_or(0)
    }

    /// Replaces the per-layer half-windows, keeping dilations.
    pub fn set_half_windows(&mut self, half_windows: &[usize]) -> Result<()> {
        if half_windows.len() != 1 && half_windows.len() != self.layers {
            return Err(Error::Config(format!(
                "{} half-windows for {} layers",
                half_windows.len(),
                self.layers
            )));
        }
        let old: Vec<LayerSpec> = (0..self.layers).map(|l| self.layer(l).clone()).collect();
        self.windows = old
            .into_iter()
            .enumerate()
            .map(|(l, mut spec)| {
                let h = half_windows[l.min(half_windows.len() - 1)];
                // per-head overrides keep their ratio to the layer window
                for w in &mut spec.per_head {
                    if spec.window.half_window > 0 {
                        w.half_window = w.half_window * h / spec.window.half_window;
                    }
                }
                spec.window.half_window = h;
                spec
            })
            .collect();
        Ok(())
    }

    /// Number of scalar parameters a model with this configuration holds.
    ///
    /// Embeddings `V·D + P·D`; per encoder layer `4D²` attention (`+3D²`
    /// global projections, `+heads·(2r+1)` relative bias), two layer norms
    /// `4D` and a `D → 4D → D` feed-forward `8D² + 5D`; final norm `2D`.
    /// Decoder layers add `8D²` for self- and cross-attention, three norms
    /// and the same feed-forward. The output head is tied to the token
    /// embedding.
    pub fn parameter_count(&self) -> usize {
        let d = self.dmodel;
        let ffn = 8 * d * d + 5 * d;
        let mut attn = 4 * d * d;
        if !self.global_positions.is_empty() {
            attn += 3 * d * d;
        }
        if self.relative_bias {
            attn += self.heads * (2 * self.max_reach() + 1);
        }
        let mut total = self.vocab * d + self.max_positions * d;
        total += self.layers * (attn + 4 * d + ffn) + 2 * d;
        if self.architecture == Architecture::Led {
            total += self.decoder_max_positions * d;
            total += self.decoder_layers * (8 * d * d + 6 * d + ffn) + 2 * d;
        }
        total
    }
}
