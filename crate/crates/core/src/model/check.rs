//! Finite-difference check of a whole model's training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Architecture, Model, ModelConfig, BOS_ID};
use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport, Graph, NodeId};
use crate::error::{Error, Result};

fn default_samples() -> usize {
    64
}

fn default_eps() -> f64 {
    1e-5
}

/// Input of `grad-check`. The model is always built in double precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    /// Length of the random byte sequence the loss is computed on.
    pub seqlen: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
}

fn loss(m: &Model<f64>, tokens: &[usize], g: &mut Graph<f64>, seed: u64) -> Result<NodeId> {
    match m.config.architecture {
        Architecture::CharLm => m.charlm_loss(g, tokens, None),
        Architecture::Mlm => m.mlm_loss(g, tokens, 0.3, seed, None).map(|(l, _)| l),
        Architecture::Led => {
            let mut src = vec![BOS_ID];
            src.extend_from_slice(tokens);
            m.led_loss(g, &src, tokens, None)
        }
    }
}

/// Compares backprop gradients of the model's loss on random bytes with
/// central differences at `samples` sampled coordinates.
pub fn check_model_gradients(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.seqlen < 2 {
        return Err(Error::Config("grad-check needs seqlen of at least 2".into()));
    }
    let mut mc = cfg.model.clone();
    mc.dtype = crate::tensor::DType::Double;
    let model = Model::<f64>::new(mc, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    // the LED source gets a start token prepended
    let len = if model.config.architecture == Architecture::Led {
        cfg.seqlen - 1
    } else {
        cfg.seqlen
    };
    let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..256)).collect();
    let mut scratch = model.clone();
    grad_check(
        &model.store,
        |g, store| {
            scratch.store.clone_from(store);
            loss(&scratch, &tokens, g, cfg.seed)
        },
        GradCheckOptions {
            eps: cfg.eps,
            samples: cfg.samples,
            seed: cfg.seed,
        },
    )
}
