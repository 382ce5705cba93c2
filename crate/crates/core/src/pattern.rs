//! Attention pattern geometry.
//!
//! Which `(query, key)` pairs a sliding-window, dilated or global pattern
//! attends to, how many there are, and how far information can travel
//! through a stack of such layers.
//!
//! Windows are parameterized by the half-window `h` (keys per side); the
//! full window is `w = 2h`. Dilation `d` is the step between attended keys
//! with `d = 1` meaning contiguous. Configuration files written with the
//! "gaps" convention (`0` = no dilation) convert through
//! [`Window::from_gap_dilation`].

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest `n` for which a dense pattern matrix is materialized.
pub const RENDER_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    #[serde(alias = "bidir")]
    Bidirectional,
    Causal,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bidir" | "bidirectional" => Ok(Mode::Bidirectional),
            "causal" => Ok(Mode::Causal),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected bidir or causal)"
            ))),
        }
    }
}

/// Half-window and dilation of one attention head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Window {
    pub half_window: usize,
    pub dilation: usize,
}

impl Window {
    pub fn new(half_window: usize, dilation: usize) -> Self {
        Window {
            half_window,
            dilation,
        }
    }

    /// Full window `w = 2h`.
    pub fn width(&self) -> usize {
        2 * self.half_window
    }

    /// Converts the "gap size" dilation convention (0 = contiguous).
    pub fn from_gap_dilation(half_window: usize, gap: usize) -> Self {
        Window::new(half_window, gap + 1)
    }

    /// Number of band slots per query.
    pub fn slots(&self, mode: Mode) -> usize {
        match mode {
            Mode::Bidirectional => 2 * self.half_window + 1,
            Mode::Causal => self.half_window + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilation == 0 {
            return Err(Error::Config("dilation must be >= 1 (1 = contiguous)".into()));
        }
        Ok(())
    }

    /// Doubles the window, keeping the dilation.
    pub fn doubled(&self) -> Self {
        Window::new(self.half_window * 2, self.dilation)
    }
}

/// Accepts `{"window": w}` (even) or `{"half_window": h}`, plus an optional
/// `dilation` (default 1).
impl<'de> Deserialize<'de> for Window {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            window: Option<usize>,
            half_window: Option<usize>,
            dilation: Option<usize>,
        }
        let raw = Raw::deserialize(de)?;
        window_from_fields(raw.window, raw.half_window, raw.dilation).map_err(serde::de::Error::custom)
    }
}

/// Shared rules for the `window` / `half_window` / `dilation` fields of
/// configuration files.
pub(crate) fn window_from_fields(
    window: Option<usize>,
    half_window: Option<usize>,
    dilation: Option<usize>,
) -> std::result::Result<Window, String> {
    let half_window = match (window, half_window) {
        (Some(_), Some(_)) => return Err("give either `window` or `half_window`, not both".into()),
        (Some(w), None) if w % 2 != 0 => return Err(format!("window {w} must be even")),
        (Some(w), None) => w / 2,
        (None, Some(h)) => h,
        (None, None) => return Err("missing `window` or `half_window`".into()),
    };
    let dilation = dilation.unwrap_or(1);
    if dilation == 0 {
        return Err("dilation must be >= 1 (1 = contiguous)".into());
    }
    Ok(Window::new(half_window, dilation))
}

/// Pattern of one attention layer over a sequence of `n` tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternConfig {
    pub n: usize,
    pub window: Window,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub global_positions: Vec<usize>,
    /// Per-head window overrides; empty means every head uses `window`.
    #[serde(default)]
    pub per_head: Vec<Window>,
}

impl PatternConfig {
    pub fn new(n: usize, half_window: usize, dilation: usize, mode: Mode) -> Self {
        PatternConfig {
            n,
            window: Window::new(half_window, dilation),
            mode,
            global_positions: Vec::new(),
            per_head: Vec::new(),
        }
    }

    pub fn with_globals(mut self, globals: &[usize]) -> Self {
        let set: BTreeSet<usize> = globals.iter().copied().collect();
        self.global_positions = set.into_iter().collect();
        self
    }

    pub fn with_heads(mut self, heads: Vec<Window>) -> Self {
        self.per_head = heads;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        for w in &self.per_head {
            w.validate()?;
        }
        if let Some(&g) = self.global_positions.iter().find(|&&g| g >= self.n) {
            return Err(Error::OutOfRange(format!(
                "global position {g} outside sequence of length {}",
                self.n
            )));
        }
        if self.global_positions.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config("global positions must be sorted and unique".into()));
        }
        if self.mode == Mode::Causal && !self.global_positions.is_empty() {
            return Err(Error::Unsupported(
                "global positions cannot be combined with causal attention".into(),
            ));
        }
        Ok(())
    }

    /// Pattern seen by head `head` (applies any per-head override).
    pub fn head(&self, head: usize) -> PatternConfig {
        let mut cfg = self.clone();
        if let Some(w) = self.per_head.get(head) {
            cfg.window = *w;
        }
        cfg.per_head.clear();
        cfg
    }

    pub fn is_global(&self, i: usize) -> bool {
        self.global_positions.binary_search(&i).is_ok()
    }

    /// Key index attended by slot `slot` of query `i`, if inside `[0, n)`.
    pub fn slot_key(&self, i: usize, slot: usize) -> Option<usize> {
        let h = self.window.half_window as isize;
        let d = self.window.dilation as isize;
        let offset = match self.mode {
            Mode::Bidirectional => (slot as isize - h) * d,
            Mode::Causal => -(h - slot as isize) * d,
        };
        let j = i as isize + offset;
        (j >= 0 && (j as usize) < self.n).then_some(j as usize)
    }

    /// Window keys of query `i`, excluding global additions, ascending.
    pub fn window_keys(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.window.slots(self.mode)).filter_map(move |s| self.slot_key(i, s))
    }
}

/// Sorted key indices attended by query `i`.
///
/// A global query attends to every key. Other queries attend to their
/// window plus every global position.
pub fn band_indices(cfg: &PatternConfig, i: usize) -> Result<Vec<usize>> {
    if i >= cfg.n {
        return Err(Error::OutOfRange(format!(
            "query {i} outside sequence of length {}",
            cfg.n
        )));
    }
    if cfg.is_global(i) {
        return Ok((0..cfg.n).collect());
    }
    let mut keys: BTreeSet<usize> = cfg.window_keys(i).collect();
    keys.extend(cfg.global_positions.iter().copied());
    Ok(keys.into_iter().collect())
}

/// Number of attended `(query, key)` pairs.
pub fn nonzero_count(cfg: &PatternConfig) -> usize {
    if cfg.global_positions.is_empty() {
        return local_count(cfg.n, cfg.window, cfg.mode);
    }
    (0..cfg.n)
        .map(|i| band_indices(cfg, i).map_or(0, |k| k.len()))
        .sum()
}

/// Closed-form count of in-range window pairs: slot offset `o` contributes
/// `max(0, n − |o|)` rows.
pub fn local_count(n: usize, window: Window, mode: Mode) -> usize {
    let h = window.half_window;
    let d = window.dilation;
    let per = |k: usize| n.saturating_sub(k * d);
    match mode {
        Mode::Bidirectional => per(0) + 2 * (1..=h).map(per).sum::<usize>(),
        Mode::Causal => (0..=h).map(per).sum(),
    }
}

/// Receptive-field summary for a stack of layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReceptiveFieldReport {
    pub layers: usize,
    /// `Σ h_ℓ·d_ℓ`, tokens reachable on each side.
    pub theoretical_half_width: usize,
    /// `2·Σ h_ℓ·d_ℓ + 1` (bidirectional, center included).
    pub theoretical_width: usize,
    /// Width of the measured influence set, when an influence probe was run.
    pub empirical_width: Option<usize>,
}

pub fn receptive_field(per_layer: &[Window]) -> Result<ReceptiveFieldReport> {
    if per_layer.is_empty() {
        return Err(Error::Config("receptive field needs at least one layer".into()));
    }
    let half: usize = per_layer.iter().map(|w| w.half_window * w.dilation).sum();
    Ok(ReceptiveFieldReport {
        layers: per_layer.len(),
        theoretical_half_width: half,
        theoretical_width: 2 * half + 1,
        empirical_width: None,
    })
}

impl ReceptiveFieldReport {
    /// Records a measured influence set; its span must fit the theory.
    pub fn with_empirical(mut self, affected: &[usize]) -> Result<Self> {
        let width = match (affected.iter().min(), affected.iter().max()) {
            (Some(lo), Some(hi)) => hi - lo + 1,
            _ => 0,
        };
        if width > self.theoretical_width {
            return Err(Error::Data(format!(
                "influence width {width} exceeds theoretical {}",
                self.theoretical_width
            )));
        }
        self.empirical_width = Some(width);
        Ok(self)
    }
}

/// Positions whose output can depend on input `probe` after a stack of
/// layers, propagated exactly through each layer's pattern (residual paths
/// included, since every query attends to itself).
pub fn reachable_from(layers: &[PatternConfig], probe: usize) -> Result<Vec<usize>> {
    let n = layers.first().map_or(0, |c| c.n);
    if probe >= n {
        return Err(Error::OutOfRange(format!("probe {probe} of {n}")));
    }
    let mut reached = vec![false; n];
    reached[probe] = true;
    for cfg in layers {
        let mut next = vec![false; n];
        for (i, slot) in next.iter_mut().enumerate() {
            *slot = band_indices(cfg, i)?.into_iter().any(|j| reached[j]);
        }
        reached = next;
    }
    Ok((0..n).filter(|&i| reached[i]).collect())
}

/// Dense 0/1 matrix of the pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternMatrix {
    pub n: usize,
    pub cells: Vec<u8>,
}

impl PatternMatrix {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.n + j] == 1
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        for row in self.cells.chunks(self.n.max(1)) {
            let line: Vec<&str> = row.iter().map(|&c| if c == 1 { "1" } else { "0" }).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Plain PGM (P2) with maxval 1.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "P2")?;
        writeln!(out, "{} {}", self.n, self.n)?;
        writeln!(out, "1")?;
        for row in self.cells.chunks(self.n.max(1)) {
            let line: Vec<&str> = row.iter().map(|&c| if c == 1 { "1" } else { "0" }).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

/// `M[i,j] = 1` iff `j ∈ band_indices(i)` or `i` is global.
pub fn render_pattern(cfg: &PatternConfig) -> Result<PatternMatrix> {
    cfg.validate()?;
    if cfg.n > RENDER_LIMIT {
        return Err(Error::RenderGuard {
            n: cfg.n,
            limit: RENDER_LIMIT,
        });
    }
    let n = cfg.n;
    let mut cells = vec![0u8; n * n];
    for i in 0..n {
        for j in band_indices(cfg, i)? {
            cells[i * n + j] = 1;
        }
    }
    Ok(PatternMatrix { n, cells })
}

/// Streams the pattern as CSV row by row, without the render guard.
pub fn write_pattern_csv<W: Write>(cfg: &PatternConfig, mut out: W) -> Result<()> {
    cfg.validate()?;
    let mut row = vec!["0"; cfg.n];
    for i in 0..cfg.n {
        row.iter_mut().for_each(|c| *c = "0");
        for j in band_indices(cfg, i)? {
            row[j] = "1";
        }
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
