//! Overlapping-window bits-per-character evaluation.
//!
//! Windows of length `L` start at `0, s, 2s, …`. The first window scores
//! all of its `L` tokens; each later window scores only its last `s`. When
//! `(N − L)` is not a multiple of `s`, one more window is right-aligned at
//! `N − L` and scores exactly the suffix not yet scored. Every token is
//! scored once. Token `t` is predicted from the tokens before it inside its
//! window; a window starting at 0 is fed the start-of-sequence id in place
//! of the missing previous byte.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, BOS_ID};
use crate::tensor::Element;

/// Version tag of the scoring rule above, written into reports.
pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub eval_len: usize,
    pub step: usize,
}

/// Window `[start, start + L)` scoring tokens `[score_from, start + L)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalWindow {
    pub start: usize,
    pub score_from: usize,
    pub end: usize,
}

impl EvalWindow {
    pub fn scored(&self) -> usize {
        self.end - self.score_from
    }
}

/// Window plan for a corpus of `n` tokens.
pub fn plan_windows(n: usize, proto: EvalProtocol) -> Result<Vec<EvalWindow>> {
    let EvalProtocol { eval_len: l, step: s } = proto;
    if l == 0 || s == 0 || s > l {
        return Err(Error::Config(format!(
            "need 1 <= step <= eval_len, got step {s} and eval_len {l}"
        )));
    }
    if n < l {
        return Err(Error::Data(format!(
            "corpus of {n} tokens is shorter than the evaluation length {l}; use a smaller eval length"
        )));
    }
    let mut out = vec![EvalWindow {
        start: 0,
        score_from: 0,
        end: l,
    }];
    let mut start = s;
    while start + l <= n {
        out.push(EvalWindow {
            start,
            score_from: start + l - s,
            end: start + l,
        });
        start += s;
    }
    let covered = out.last().map_or(0, |w| w.end);
    if covered < n {
        out.push(EvalWindow {
            start: n - l,
            score_from: covered,
            end: n,
        });
    }
    Ok(out)
}

/// Per-position negative log-likelihood in nats.
pub trait SequenceScorer {
    /// NLL of `targets[t]` given `inputs[..=t]`.
    fn nll(&self, inputs: &[usize], targets: &[usize]) -> Result<Vec<f64>>;
}

impl<T: Element> SequenceScorer for Model<T> {
    fn nll(&self, inputs: &[usize], targets: &[usize]) -> Result<Vec<f64>> {
        self.charlm_nll(inputs, targets)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub bpc: f64,
    pub total_nll_nats: f64,
    pub scored_tokens: usize,
    pub windows: usize,
    pub eval_len: usize,
    pub step: usize,
    pub protocol_version: u32,
}

/// Bits per character of `corpus` under `scorer`. Windows are scored in
/// parallel and their losses summed in window order.
pub fn eval_bpc_sliding<S: SequenceScorer + Sync>(scorer: &S, corpus: &[u8], proto: EvalProtocol) -> Result<EvalReport> {
    let windows = plan_windows(corpus.len(), proto)?;
    let per_window: Vec<Result<f64>> = windows
        .par_iter()
        .map(|w| {
            let inputs: Vec<usize> = (w.start..w.end)
                .map(|t| if t == 0 { BOS_ID } else { corpus[t - 1] as usize })
                .collect();
            let targets: Vec<usize> = corpus[w.start..w.end].iter().map(|&b| b as usize).collect();
            let nll = scorer.nll(&inputs, &targets)?;
            Ok(nll[w.score_from - w.start..].iter().sum())
        })
        .collect();
    let mut total = 0.0;
    for r in per_window {
        total += r?;
    }
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("total evaluation loss is {total}")));
    }
    let scored: usize = windows.iter().map(EvalWindow::scored).sum();
    Ok(EvalReport {
        bpc: total / (scored as f64 * std::f64::consts::LN_2),
        total_nll_nats: total,
        scored_tokens: scored,
        windows: windows.len(),
        eval_len: proto.eval_len,
        step: proto.step,
        protocol_version: PROTOCOL_VERSION,
    })
}
