use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub seqlen: usize,
    /// Half-window of each layer (one entry applies to all layers).
    pub half_windows: Vec<usize>,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
}

/// Replacement values for one phase (numbered from 1).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseOverride {
    pub phase: usize,
    #[serde(default)]
    pub seqlen: Option<usize>,
    #[serde(default)]
    pub half_windows: Option<Vec<usize>>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub batch: Option<usize>,
}

fn default_warmup_fraction() -> f64 {
    0.1
}

fn default_warmup_cap() -> usize {
    10_000
}

fn default_clip() -> f64 {
    0.25
}

/// Staged training plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSchedule {
    pub phases: Vec<Phase>,
    /// Warmup length as a fraction of each phase's steps.
    #[serde(default = "default_warmup_fraction")]
    pub warmup_fraction: f64,
    /// Upper bound on warmup steps.
    #[serde(default = "default_warmup_cap")]
    pub warmup_cap: usize,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
}

/// Input of [`make_phase_schedule`] as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub base: Phase,
    pub phases: usize,
    #[serde(default)]
    pub overrides: Vec<PhaseOverride>,
    #[serde(default = "default_warmup_fraction")]
    pub warmup_fraction: f64,
    #[serde(default = "default_warmup_cap")]
    pub warmup_cap: usize,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<PhaseSchedule> {
        let mut s = make_phase_schedule(&self.base, self.phases, &self.overrides)?;
        s.warmup_fraction = self.warmup_fraction;
        s.warmup_cap = self.warmup_cap;
        s.grad_clip = self.grad_clip;
        s.validate()?;
        Ok(s)
    }
}

/// Phase `k + 1` doubles the sequence length and every window of phase `k`
/// and halves its learning rate; `overrides` replace single fields, and
/// later phases continue from the overridden values.
pub fn make_phase_schedule(base: &Phase, k: usize, overrides: &[PhaseOverride]) -> Result<PhaseSchedule> {
    if k == 0 {
        return Err(Error::Config("a schedule needs at least one phase".into()));
    }
    if let Some(o) = overrides.iter().find(|o| o.phase == 0 || o.phase > k) {
        return Err(Error::Config(format!("override for phase {} outside 1..={k}", o.phase)));
    }
    let mut phases: Vec<Phase> = Vec::with_capacity(k);
    for idx in 1..=k {
        let mut p = match phases.last() {
            None => base.clone(),
            Some(prev) => Phase {
                seqlen: prev.seqlen * 2,
                half_windows: prev.half_windows.iter().map(|h| h * 2).collect(),
                lr: prev.lr / 2.0,
                steps: prev.steps,
                batch: prev.batch,
            },
        };
        for o in overrides.iter().filter(|o| o.phase == idx) {
            if let Some(v) = o.seqlen {
                p.seqlen = v;
            }
            if let Some(v) = &o.half_windows {
                p.half_windows = v.clone();
            }
            if let Some(v) = o.lr {
                p.lr = v;
            }
            if let Some(v) = o.steps {
                p.steps = v;
            }
            if let Some(v) = o.batch {
                p.batch = v;
            }
        }
        if let Some(prev) = phases.last() {
            if p.seqlen < prev.seqlen {
                return Err(Error::Config(format!(
                    "phase {idx} sequence length {} is shorter than phase {} ({})",
                    p.seqlen,
                    idx - 1,
                    prev.seqlen
                )));
            }
        }
        phases.push(p);
    }
    let s = PhaseSchedule {
        phases,
        warmup_fraction: default_warmup_fraction(),
        warmup_cap: default_warmup_cap(),
        grad_clip: default_clip(),
    };
    s.validate()?;
    Ok(s)
}

impl PhaseSchedule {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.phases.iter().enumerate() {
            if p.seqlen == 0 || p.steps == 0 || p.batch == 0 || p.half_windows.is_empty() {
                return Err(Error::Config(format!(
                    "phase {} needs positive seqlen, steps, batch and at least one window",
                    i + 1
                )));
            }
            if !(p.lr.is_finite() && p.lr > 0.0) {
                return Err(Error::Config(format!("phase {} learning rate {} must be positive", i + 1, p.lr)));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup fraction {} outside [0, 1]", self.warmup_fraction)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!("gradient clip {} must be positive", self.grad_clip)));
        }
        Ok(())
    }

    /// Warmup steps of a phase with `steps` updates: `min(⌈f·steps⌉, cap)`,
    /// at least 1.
    pub fn warmup_steps(&self, steps: usize) -> usize {
        let w = (self.warmup_fraction * steps as f64).ceil() as usize;
        w.min(self.warmup_cap).max(1)
    }

    /// Learning rate at 1-based `step` of `phase`: linear warmup, then
    /// constant.
    pub fn lr_at(&self, phase: &Phase, step: usize) -> f64 {
        let w = self.warmup_steps(phase.steps);
        if step >= w {
            phase.lr
        } else {
            phase.lr * step as f64 / w as f64
        }
    }
}
