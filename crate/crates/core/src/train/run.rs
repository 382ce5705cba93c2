//! Complete training runs described by one JSON document.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_meta, Checkpoint, CheckpointElement};
use crate::embed::{apply_freeze, FreezePolicy};
use crate::error::{Error, Result};
use crate::model::{Architecture, Model, ModelConfig};
use crate::tensor::DType;

use super::{
    train_charlm_phase, train_copy_task, train_mlm_phase, AdamWConfig, CopyTask, ScheduleSpec, StepMetrics, Trainer,
};

fn default_mask_prob() -> f64 {
    0.15
}

/// A training run. Exactly one of `model` (fresh initialization) and
/// `init` (continue from a checkpoint) must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub adam: AdamWConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub freeze: FreezePolicy,
    /// Corruption rate of masked-LM runs.
    #[serde(default = "default_mask_prob")]
    pub mask_prob: f64,
    /// Copy task of encoder-decoder runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<CopyTask>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        match (&c.model, &c.init) {
            (Some(_), Some(_)) => Err(Error::Config("give either \"model\" or \"init\", not both".into())),
            (None, None) => Err(Error::Config("one of \"model\" or \"init\" is required".into())),
            _ => Ok(c),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Precision of the model the run trains.
    pub fn dtype(&self) -> Result<DType> {
        match (&self.model, &self.init) {
            (Some(m), _) => Ok(m.dtype),
            (None, Some(p)) => Ok(read_meta(&Checkpoint::read(p)?)?.config.dtype),
            (None, None) => Err(Error::Config("one of \"model\" or \"init\" is required".into())),
        }
    }

    fn build_model<T: CheckpointElement>(&self, seed: u64) -> Result<Model<T>> {
        match (&self.model, &self.init) {
            (Some(cfg), _) => Model::new(cfg.clone(), seed),
            (None, Some(p)) => Ok(Model::from_checkpoint(&Checkpoint::read(p)?)?.0),
            (None, None) => Err(Error::Config("one of \"model\" or \"init\" is required".into())),
        }
    }
}

/// Trains a character LM or masked LM on `corpus` through every phase.
pub fn run_language_model<T: CheckpointElement>(
    run: &RunConfig,
    seed: u64,
    corpus: &[u8],
    mut log: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<Model<T>> {
    let schedule = run.schedule.build()?;
    let mut model = run.build_model::<T>(seed)?;
    let mask = apply_freeze(&model, run.freeze)?;
    let mut trainer = Trainer::new(&model, run.adam, schedule.grad_clip, seed).with_mask(mask);
    for k in 0..schedule.phases.len() {
        match model.config.architecture {
            Architecture::CharLm => train_charlm_phase(&mut trainer, &mut model, corpus, &schedule, k, &mut log)?,
            Architecture::Mlm => {
                train_mlm_phase(&mut trainer, &mut model, corpus, &schedule, k, run.mask_prob, &mut log)?
            }
            Architecture::Led => {
                return Err(Error::Config("encoder-decoder models are trained with train-led".into()))
            }
        }
    }
    Ok(model)
}

/// Trains an encoder-decoder on the run's copy task through every phase.
pub fn run_copy_task<T: CheckpointElement>(
    run: &RunConfig,
    seed: u64,
    mut log: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<Model<T>> {
    let task = run
        .task
        .ok_or_else(|| Error::Config("encoder-decoder runs need a \"task\" entry".into()))?;
    let schedule = run.schedule.build()?;
    let mut model = run.build_model::<T>(seed)?;
    if model.config.architecture != Architecture::Led {
        return Err(Error::Config("the copy task needs an led model".into()));
    }
    if task.src_len > model.config.max_positions || task.src_len > model.config.decoder_max_positions {
        return Err(Error::Config(format!(
            "copy task length {} exceeds the model's position tables",
            task.src_len
        )));
    }
    let mask = apply_freeze(&model, run.freeze)?;
    let mut trainer = Trainer::new(&model, run.adam, schedule.grad_clip, seed).with_mask(mask);
    for k in 0..schedule.phases.len() {
        train_copy_task(&mut trainer, &mut model, task, &schedule, k, &mut log)?;
    }
    Ok(model)
}
