//! Position-table extension by tiling, and parameter freezing.

use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Tiles `e: [m, d]` to `[n, d]` with `out[i] = e[i mod m]`.
pub fn copy_extend_positions<T: Element>(e: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let (m, d) = e.dims2()?;
    if m == 0 {
        return Err(Error::Shape("cannot extend an empty position table".into()));
    }
    if n < m {
        return Err(Error::Config(format!(
            "target length {n} is shorter than the table ({m} rows); extension never truncates"
        )));
    }
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        data.extend_from_slice(e.row(i % m));
    }
    Tensor::new(&[n, d], data)
}

impl<T: Element> Model<T> {
    /// Grows the (encoder) position table to `target` rows by tiling and
    /// records the old length for [`FreezePolicy::OnlyNewPositions`].
    pub fn extend_positions(&mut self, target: usize) -> Result<()> {
        let old = self.store.get(self.pos_emb).clone();
        let m = old.shape()[0];
        let extended = copy_extend_positions(&old, target)?;
        self.store.replace(self.pos_emb, extended);
        self.config.original_positions = Some(m);
        self.config.max_positions = target;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    #[default]
    AllTrainable,
    /// Only the rows added by the last position extension are trained.
    OnlyNewPositions,
    /// Only position tables are trained.
    OnlyPositions,
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_trainable" => Ok(FreezePolicy::AllTrainable),
            "only_new_positions" => Ok(FreezePolicy::OnlyNewPositions),
            "only_positions" => Ok(FreezePolicy::OnlyPositions),
            other => Err(Error::Config(format!(
                "unknown freeze mode {other:?} (expected all_trainable, only_new_positions or only_positions)"
            ))),
        }
    }
}

/// Which part of one parameter may change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamMask {
    Trainable,
    Frozen,
    /// Only these rows of a 2-D tensor.
    Rows(Range<usize>),
}

/// Per-parameter training mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainMask {
    masks: Vec<ParamMask>,
}

impl TrainMask {
    pub fn all_trainable(params: usize) -> Self {
        TrainMask {
            masks: vec![ParamMask::Trainable; params],
        }
    }

    pub fn get(&self, id: ParamId) -> &ParamMask {
        &self.masks[id.index()]
    }

    /// Whether element `flat` of parameter `id` (row width `cols`) is trained.
    #[inline]
    pub fn is_trainable(&self, id: ParamId, flat: usize, cols: usize) -> bool {
        match &self.masks[id.index()] {
            ParamMask::Trainable => true,
            ParamMask::Frozen => false,
            ParamMask::Rows(r) => r.contains(&(flat / cols.max(1))),
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count<T: Element>(&self, store: &ParamStore<T>) -> usize {
        store
            .iter()
            .map(|(id, _, t)| match self.get(id) {
                ParamMask::Trainable => t.numel(),
                ParamMask::Frozen => 0,
                ParamMask::Rows(r) => r.len() * t.last_dim(),
            })
            .sum()
    }

    /// Zeroes every gradient entry that may not change.
    pub fn apply_to_grads<T: Element>(&self, store: &mut ParamStore<T>) {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            let cols = t.last_dim();
            let mask = &self.masks[id.index()];
            if let Some(g) = &mut t.grad {
                match mask {
                    ParamMask::Trainable => {}
                    ParamMask::Frozen => g.iter_mut().for_each(|v| *v = T::zero()),
                    ParamMask::Rows(r) => {
                        for (i, v) in g.iter_mut().enumerate() {
                            if !r.contains(&(i / cols)) {
                                *v = T::zero();
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Training mask of `policy` for model `m`.
pub fn apply_freeze<T: Element>(m: &Model<T>, policy: FreezePolicy) -> Result<TrainMask> {
    let n = m.store.len();
    let mut mask = TrainMask::all_trainable(n);
    let position_tables: Vec<ParamId> = std::iter::once(m.pos_emb)
        .chain(m.decoder.as_ref().map(|d| d.pos_emb))
        .collect();
    match policy {
        FreezePolicy::AllTrainable => {}
        FreezePolicy::OnlyPositions => {
            for id in m.store.ids() {
                if !position_tables.contains(&id) {
                    mask.masks[id.index()] = ParamMask::Frozen;
                }
            }
        }
        FreezePolicy::OnlyNewPositions => {
            let original = m.config.original_positions.ok_or_else(|| {
                Error::Config("only_new_positions needs a model whose positions were extended".into())
            })?;
            mask.masks = vec![ParamMask::Frozen; n];
            let rows = m.store.get(m.pos_emb).shape()[0];
            mask.masks[m.pos_emb.index()] = ParamMask::Rows(original..rows);
        }
    }
    Ok(mask)
}
