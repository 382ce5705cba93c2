//! Central-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled (all coordinates when there are fewer).
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            samples: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

fn eval<F>(store: &ParamStore<f64>, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let v = g.value(loss).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences on sampled coordinates of `store`.
pub fn grad_check<F>(store: &ParamStore<f64>, mut f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let v = g.value(loss).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {v}")));
    }
    g.backward(loss)?;
    let mut analytic: Vec<Option<Vec<f64>>> = vec![None; store.len()];
    for (pid, node) in g.params() {
        analytic[pid.index()] = g.grad_slice(node).map(<[f64]>::to_vec);
    }

    let ids: Vec<ParamId> = store.ids().filter(|&p| store.get(p).numel() > 0).collect();
    let total: usize = ids.iter().map(|&p| store.get(p).numel()).sum();
    let coords: Vec<(ParamId, usize)> = if total <= opts.samples {
        ids.iter()
            .flat_map(|&p| (0..store.get(p).numel()).map(move |i| (p, i)))
            .collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        (0..opts.samples)
            .map(|s| {
                let p = ids[s % ids.len()];
                (p, rng.gen_range(0..store.get(p).numel()))
            })
            .collect()
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (p, i) in coords {
        let orig = work.get(p).data()[i];
        work.get_mut(p).data_mut()[i] = orig + opts.eps;
        let plus = eval(&work, &mut f)?;
        work.get_mut(p).data_mut()[i] = orig - opts.eps;
        let minus = eval(&work, &mut f)?;
        work.get_mut(p).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * opts.eps);
        let a = analytic[p.index()].as_ref().map_or(0.0, |g| g[i]);
        let rel = (a - numeric).abs() / numeric.abs().max(1.0);
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((store.name(p).to_string(), i));
        }
        report.checked += 1;
    }
    Ok(report)
}

/// [`grad_check`] over a plain list of tensors; `f` receives their nodes.
pub fn grad_check_tensors<F>(params: &[Tensor<f64>], mut f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = params
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("p{i}"), t.clone()))
        .collect();
    grad_check(
        &store,
        |g, s| {
            let nodes: Vec<NodeId> = ids.iter().map(|&id| g.param(s, id)).collect();
            f(g, &nodes)
        },
        opts,
    )
}
