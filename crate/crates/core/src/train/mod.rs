//! Staged training: schedules, the optimizer, the update step and the
//! character-LM / copy-task loops.

mod optim;
mod presets;
mod run;
mod schedule;

pub use optim::{AdamW, AdamWConfig};
pub use presets::{ablation_presets, geometric_widths, preset, AblationPreset};
pub use run::{run_copy_task, run_language_model, RunConfig};
pub use schedule::{make_phase_schedule, Phase, PhaseOverride, PhaseSchedule, ScheduleSpec};

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::embed::TrainMask;
use crate::error::{Error, Result};
use crate::model::{beam_search, greedy_decode, BeamOptions, Model, BOS_ID, EOS_ID};
use crate::tensor::Element;

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss_nats: f64,
    pub bpc: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// 1-based phase index.
    pub phase: usize,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,lr,loss_nats,bpc,grad_norm,phase";

    pub fn write_csv_row<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "{},{:e},{},{},{},{}",
            self.step, self.lr, self.loss_nats, self.bpc, self.grad_norm, self.phase
        )
    }
}

/// Optimizer state, freeze mask and randomness of one training run.
pub struct Trainer {
    pub opt: AdamW,
    pub mask: TrainMask,
    pub grad_clip: f64,
    /// Updates applied so far, across phases.
    pub step: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new<T: Element>(model: &Model<T>, adam: AdamWConfig, grad_clip: f64, seed: u64) -> Self {
        Trainer {
            opt: AdamW::new(adam),
            mask: TrainMask::all_trainable(model.store.len()),
            grad_clip,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn with_mask(mut self, mask: TrainMask) -> Self {
        self.mask = mask;
        self
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// One update over `batch` examples. `loss(model, i, graph, rng)`
    /// records the loss of example `i`. Examples run in parallel; their
    /// gradients are summed in index order, so the result does not depend
    /// on the worker count. Returns the mean loss and the pre-clip norm.
    pub fn update<T, F>(&mut self, model: &mut Model<T>, batch: usize, lr: f64, loss: F) -> Result<(f64, f64)>
    where
        T: Element,
        F: Fn(&Model<T>, usize, &mut Graph<T>, &mut ChaCha8Rng) -> Result<NodeId> + Sync,
    {
        if batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let seeds: Vec<u64> = (0..batch).map(|_| self.rng.gen()).collect();
        let m: &Model<T> = model;
        let runs: Vec<Result<(f64, Graph<T>)>> = seeds
            .par_iter()
            .enumerate()
            .map(|(i, &seed)| {
                let mut g = Graph::new();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let l = loss(m, i, &mut g, &mut rng)?;
                let value = g.value(l).item()?.as_f64();
                if !value.is_finite() {
                    return Ok((value, g));
                }
                g.backward(l)?;
                Ok((value, g))
            })
            .collect();
        let mut total = 0.0;
        model.store.zero_grads();
        for run in runs {
            let (value, g) = run?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {value} at step {} (lr {lr:e}); parameter checksum {:08x}",
                    self.step + 1,
                    model.store.checksum()
                )));
            }
            total += value;
            model.store.accumulate_grads(&g);
        }
        model.store.scale_grads(1.0 / batch as f64);
        self.mask.apply_to_grads(&mut model.store);
        let norm = model.store.clip_grad_norm(self.grad_clip);
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient norm {norm} at step {} (lr {lr:e})",
                self.step + 1
            )));
        }
        self.opt.step(&mut model.store, lr, &self.mask);
        model.store.zero_grads();
        self.step += 1;
        Ok((total / batch as f64, norm))
    }
}

/// Bytes as token ids.
pub fn byte_ids(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

fn phase_at(schedule: &PhaseSchedule, phase_index: usize) -> Result<&Phase> {
    schedule
        .phases
        .get(phase_index)
        .ok_or_else(|| Error::Config(format!("no phase {}", phase_index + 1)))
}

/// Random crops of `crop` bytes, one update per step.
#[allow(clippy::too_many_arguments)]
fn train_on_crops<T, F>(
    trainer: &mut Trainer,
    model: &mut Model<T>,
    corpus: &[u8],
    schedule: &PhaseSchedule,
    phase_index: usize,
    crop: usize,
    mut log: impl FnMut(&StepMetrics) -> Result<()>,
    loss: F,
) -> Result<()>
where
    T: Element,
    F: Fn(&Model<T>, &[usize], &mut Graph<T>, &mut ChaCha8Rng) -> Result<NodeId> + Sync,
{
    let phase = phase_at(schedule, phase_index)?;
    if corpus.len() < crop {
        return Err(Error::Data(format!(
            "corpus of {} bytes is shorter than the {crop} bytes one example needs",
            corpus.len()
        )));
    }
    if phase.seqlen > model.config.max_positions {
        return Err(Error::Config(format!(
            "phase seqlen {} exceeds the model's {} positions",
            phase.seqlen, model.config.max_positions
        )));
    }
    model.config.set_half_windows(&phase.half_windows)?;
    let max_start = corpus.len() - crop;
    for step in 1..=phase.steps {
        let lr = schedule.lr_at(phase, step);
        let crops: Vec<Vec<usize>> = (0..phase.batch)
            .map(|_| {
                let o = trainer.rng().gen_range(0..=max_start);
                byte_ids(&corpus[o..o + crop])
            })
            .collect();
        let (mean, grad_norm) = trainer.update(model, phase.batch, lr, |m, i, g, rng| loss(m, &crops[i], g, rng))?;
        log(&StepMetrics {
            step: trainer.step,
            lr,
            loss_nats: mean,
            bpc: mean / std::f64::consts::LN_2,
            grad_norm,
            phase: phase_index + 1,
        })?;
    }
    Ok(())
}

/// Runs one phase of character-LM training on random crops of `corpus`.
///
/// The model's windows are set to the phase's half-windows first.
pub fn train_charlm_phase<T: Element>(
    trainer: &mut Trainer,
    model: &mut Model<T>,
    corpus: &[u8],
    schedule: &PhaseSchedule,
    phase_index: usize,
    log: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<()> {
    let crop = phase_at(schedule, phase_index)?.seqlen + 1;
    train_on_crops(trainer, model, corpus, schedule, phase_index, crop, log, |m, seq, g, rng| {
        let drop = (m.config.dropout > 0.0).then_some(rng);
        m.charlm_loss(g, seq, drop)
    })
}

/// Masked-LM counterpart of [`train_charlm_phase`]; a fresh corruption is
/// drawn for every example.
pub fn train_mlm_phase<T: Element>(
    trainer: &mut Trainer,
    model: &mut Model<T>,
    corpus: &[u8],
    schedule: &PhaseSchedule,
    phase_index: usize,
    mask_prob: f64,
    log: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<()> {
    let crop = phase_at(schedule, phase_index)?.seqlen;
    train_on_crops(trainer, model, corpus, schedule, phase_index, crop, log, |m, seq, g, rng| {
        let seed = rng.gen();
        let drop = (m.config.dropout > 0.0).then_some(rng);
        m.mlm_loss(g, seq, mask_prob, seed, drop).map(|(l, _)| l)
    })
}

/// Synthetic copy task: the target is the source without its leading
/// start token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CopyTask {
    /// Source length including the start token.
    pub src_len: usize,
    /// Symbols are the bytes `b'a'..b'a' + alphabet`.
    pub alphabet: usize,
}

impl CopyTask {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
        let body: Vec<usize> = (1..self.src_len)
            .map(|_| b'a' as usize + rng.gen_range(0..self.alphabet))
            .collect();
        let mut src = Vec::with_capacity(self.src_len);
        src.push(BOS_ID);
        src.extend_from_slice(&body);
        (src, body)
    }
}

/// Teacher-forced training of an encoder-decoder on `task` for one phase
/// (the phase's `seqlen` and windows are not used).
pub fn train_copy_task<T: Element>(
    trainer: &mut Trainer,
    model: &mut Model<T>,
    task: CopyTask,
    schedule: &PhaseSchedule,
    phase_index: usize,
    mut log: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<()> {
    let phase = phase_at(schedule, phase_index)?;
    for step in 1..=phase.steps {
        let lr = schedule.lr_at(phase, step);
        let pairs: Vec<_> = (0..phase.batch).map(|_| task.sample(trainer.rng())).collect();
        let (loss, grad_norm) = trainer.update(model, phase.batch, lr, |m, i, g, rng| {
            let drop = (m.config.dropout > 0.0).then_some(rng);
            m.led_loss(g, &pairs[i].0, &pairs[i].1, drop)
        })?;
        log(&StepMetrics {
            step: trainer.step,
            lr,
            loss_nats: loss,
            bpc: loss / std::f64::consts::LN_2,
            grad_norm,
            phase: phase_index + 1,
        })?;
    }
    Ok(())
}

/// Held-out copy-task results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CopyReport {
    pub samples: usize,
    /// Greedy outputs equal to the target.
    pub exact: usize,
    /// Beam search with one hypothesis returned the greedy output.
    pub beam_agrees: usize,
}

/// Decodes `samples` fresh copy-task sources drawn from `seed` with
/// greedy search and with a beam of one.
pub fn evaluate_copy_task<T: Element>(model: &Model<T>, task: CopyTask, samples: usize, seed: u64) -> Result<CopyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = (0..samples).map(|_| task.sample(&mut rng)).collect();
    let max_len = task.src_len;
    let results: Vec<Result<(bool, bool)>> = pairs
        .par_iter()
        .map(|(src, tgt)| {
            let mut sc = model.led_scorer(src)?;
            let greedy = greedy_decode(&mut sc, BOS_ID, EOS_ID, max_len)?;
            let opts = BeamOptions {
                beam: 1,
                max_len,
                length_penalty: 1.0,
                bos: BOS_ID,
                eos: EOS_ID,
            };
            let beam = beam_search(&mut sc, opts)?;
            Ok((&greedy == tgt, beam == greedy))
        })
        .collect();
    let mut report = CopyReport {
        samples,
        exact: 0,
        beam_agrees: 0,
    };
    for r in results {
        let (exact, agree) = r?;
        report.exact += exact as usize;
        report.beam_agrees += agree as usize;
    }
    Ok(report)
}
