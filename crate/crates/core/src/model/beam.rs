//! Greedy and beam-search decoding over any next-token scorer.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Source of next-token log-probabilities for a decoder prefix.
///
/// `prefix` always starts with the start-of-sequence id.
pub trait StepScorer {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<F> StepScorer for F
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamOptions {
    pub beam: usize,
    /// Maximum number of generated tokens, the end token included.
    pub max_len: usize,
    /// Finished hypotheses are ranked by `logprob / len^length_penalty`.
    pub length_penalty: f64,
    pub bos: usize,
    pub eos: usize,
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<usize>,
    logp: f64,
}

struct Candidate {
    parent: usize,
    token: usize,
    token_logp: f64,
    logp: f64,
}

/// Best first: higher cumulative log-prob, then higher token log-prob,
/// then lower token id, then lower parent index.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.logp
        .total_cmp(&a.logp)
        .then(b.token_logp.total_cmp(&a.token_logp))
        .then(a.token.cmp(&b.token))
        .then(a.parent.cmp(&b.parent))
}

fn normalized(logp: f64, len: usize, penalty: f64) -> f64 {
    logp / (len.max(1) as f64).powf(penalty)
}

/// Beam search. Returns the generated ids without the start token and
/// without the end token; the result never exceeds `max_len` ids.
pub fn beam_search<S: StepScorer>(scorer: &mut S, opts: BeamOptions) -> Result<Vec<usize>> {
    if opts.beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    if !opts.length_penalty.is_finite() {
        return Err(Error::Config("length penalty must be finite".into()));
    }
    let mut live = vec![Hyp {
        tokens: vec![opts.bos],
        logp: 0.0,
    }];
    // (normalized score, generated ids)
    let mut finished: Vec<(f64, Vec<usize>)> = Vec::new();
    for step in 1..=opts.max_len {
        let mut cands = Vec::new();
        for (p, hyp) in live.iter().enumerate() {
            let lp = scorer.next_log_probs(&hyp.tokens)?;
            if let Some(bad) = lp.iter().find(|v| v.is_nan()) {
                return Err(Error::NonFinite(format!("scorer returned {bad}")));
            }
            cands.extend(lp.iter().enumerate().map(|(token, &token_logp)| Candidate {
                parent: p,
                token,
                token_logp,
                logp: hyp.logp + token_logp,
            }));
        }
        cands.sort_by(rank);
        let mut next = Vec::with_capacity(opts.beam);
        for c in cands.into_iter().take(opts.beam) {
            let mut tokens = live[c.parent].tokens.clone();
            if c.token == opts.eos {
                tokens.remove(0);
                finished.push((normalized(c.logp, step, opts.length_penalty), tokens));
            } else {
                tokens.push(c.token);
                next.push(Hyp { tokens, logp: c.logp });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    // hypotheses cut off by max_len compete with the finished ones
    for hyp in live {
        let len = hyp.tokens.len() - 1;
        finished.push((normalized(hyp.logp, len, opts.length_penalty), hyp.tokens[1..].to_vec()));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for (score, tokens) in finished {
        if best.as_ref().map_or(true, |(s, _)| score > *s) {
            best = Some((score, tokens));
        }
    }
    Ok(best.map(|(_, t)| t).unwrap_or_default())
}

/// Repeatedly takes the most likely next token (lowest id on ties) until
/// the end token or `max_len` tokens.
pub fn greedy_decode<S: StepScorer>(scorer: &mut S, bos: usize, eos: usize, max_len: usize) -> Result<Vec<usize>> {
    let mut tokens = vec![bos];
    for _ in 0..max_len {
        let lp = scorer.next_log_probs(&tokens)?;
        let mut best = 0;
        for (i, v) in lp.iter().enumerate() {
            if v.is_nan() {
                return Err(Error::NonFinite(format!("scorer returned {v}")));
            }
            if *v > lp[best] {
                best = i;
            }
        }
        if best == eos {
            break;
        }
        tokens.push(best);
    }
    tokens.remove(0);
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: usize = 0;
    const B: usize = 1;
    const EOS: usize = 2;
    const BOS: usize = 3;
    const V: usize = 14;

    /// First step: A 0.6, B 0.4. After A the end token has 0.1 and ten
    /// filler tokens share 0.9 (0.09 each); after B the end token has 0.9.
    fn two_step(prefix: &[usize]) -> Result<Vec<f64>> {
        let mut p = vec![0.0; V];
        match prefix {
            [BOS] => {
                p[A] = 0.6;
                p[B] = 0.4;
            }
            [BOS, A] => {
                p[EOS] = 0.1;
                for f in 4..V {
                    p[f] = 0.09;
                }
            }
            [BOS, B] => {
                p[EOS] = 0.9;
                p[4] = 0.1;
            }
            _ => p[EOS] = 1.0,
        }
        Ok(p.into_iter().map(f64::ln).collect())
    }

    fn opts(beam: usize, max_len: usize) -> BeamOptions {
        BeamOptions {
            beam,
            max_len,
            length_penalty: 0.0,
            bos: BOS,
            eos: EOS,
        }
    }

    /// Exhaustive search over every two-token continuation ending in EOS.
    fn exhaustive_best() -> (Vec<usize>, f64) {
        let first = two_step(&[BOS]).unwrap();
        let mut best = (vec![], f64::NEG_INFINITY);
        for a in 0..V {
            let second = two_step(&[BOS, a]).unwrap();
            let lp = first[a] + second[EOS];
            if lp > best.1 {
                best = (vec![a], lp);
            }
        }
        best
    }

    #[test]
    fn beam_finds_the_better_branch() {
        let (oracle, lp) = exhaustive_best();
        assert_eq!(oracle, vec![B]);
        assert!((lp.exp() - 0.36).abs() < 1e-12);
        let mut s = two_step;
        assert_eq!(beam_search(&mut s, opts(2, 10)).unwrap(), oracle);
        assert_eq!(greedy_decode(&mut s, BOS, EOS, 10).unwrap(), vec![A]);
    }

    #[test]
    fn beam_one_is_greedy() {
        let mut s = two_step;
        assert_eq!(
            beam_search(&mut s, opts(1, 10)).unwrap(),
            greedy_decode(&mut s, BOS, EOS, 10).unwrap()
        );
    }

    #[test]
    fn output_respects_max_len() {
        // never emits the end token
        let mut s = |_: &[usize]| -> Result<Vec<f64>> {
            let mut p = vec![f64::NEG_INFINITY; V];
            p[5] = 0.0;
            Ok(p)
        };
        for beam in 1..4 {
            assert_eq!(beam_search(&mut s, opts(beam, 5)).unwrap().len(), 5);
        }
        assert_eq!(greedy_decode(&mut s, BOS, EOS, 5).unwrap().len(), 5);
    }

    #[test]
    fn zero_beam_is_an_error() {
        let mut s = two_step;
        assert!(matches!(beam_search(&mut s, opts(0, 5)), Err(Error::Config(_))));
    }
}
