//! Time and memory scaling of the attention implementations.
//!
//! Memory is counted, not measured: the number of score values each
//! implementation materializes for one head.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::normal_tensor;
use crate::error::{Error, Result};
use crate::kernels::band::{band_pv, band_qk, band_softmax, BandImpl, ChunkPlan, MemoryAccount};
use crate::kernels::dense::{masked_softmax_rows, matmul, matmul_nt};
use crate::pattern::{local_count, Mode, PatternConfig, Window};
use crate::tensor::{Element, Tensor};

/// Score elements of one head, matching what the kernels report.
///
/// `dense = n²`, `loop` = number of in-range band slots, `chunk` =
/// `(n_padded/h − 1)·(2h)²`. Peaks add the `[n, slots]` band output for
/// the chunk and dense kernels.
pub fn count_memory(imp: BandImpl, n: usize, half_window: usize, mode: Mode) -> Result<MemoryAccount> {
    let window = Window::new(half_window, 1);
    let slots = window.slots(mode);
    let (score, peak) = match imp {
        BandImpl::Loop => {
            let c = local_count(n, window, mode);
            (c, c)
        }
        BandImpl::Chunk => {
            let plan = ChunkPlan::new(n, &PatternConfig::new(n, half_window, 1, mode))?;
            (plan.block_elements(), plan.block_elements() + n * slots)
        }
        BandImpl::Dense => (n * n, n * n + n * slots),
    };
    Ok(MemoryAccount {
        implementation: imp,
        score_elements: score,
        peak_elements: peak,
    })
}

/// Single-head attention `softmax(QKᵀ/√dk)·V` restricted to `cfg`.
///
/// `Loop` and `Chunk` use band storage; `Dense` builds the full `n × n`
/// masked score matrix.
pub fn attention_forward<T: Element>(
    imp: BandImpl,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &PatternConfig,
) -> Result<Tensor<T>> {
    match imp {
        BandImpl::Loop | BandImpl::Chunk => {
            let (scores, _) = band_qk(imp, q, k, cfg)?;
            let probs = band_softmax(&scores, None, None)?;
            band_pv(&probs.probs, cfg, v, None)
        }
        BandImpl::Dense => {
            let (n, dk) = q.dims2()?;
            let scale = T::from_f64(1.0 / (dk as f64).sqrt());
            let mut s = matmul_nt(q.data(), k.data(), n, dk, n);
            s.iter_mut().for_each(|x| *x = *x * scale);
            let mut mask = vec![false; n * n];
            for i in 0..n {
                for j in cfg.window_keys(i) {
                    mask[i * n + j] = true;
                }
            }
            let p = masked_softmax_rows(&s, Some(&mask), n).map_err(|row| Error::FullyMaskedRow { row })?;
            Tensor::new(&[n, dk], matmul(&p, v.data(), n, n, dk))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingPoint {
    pub n: usize,
    /// Median wall-clock seconds of one forward pass.
    pub seconds: f64,
    pub score_elements: usize,
    pub peak_elements: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    #[serde(rename = "impl")]
    pub implementation: BandImpl,
    pub half_window: usize,
    pub dk: usize,
    pub points: Vec<ScalingPoint>,
    /// Least-squares slopes of `log₂ metric` against `log₂ n`.
    pub time_slope: f64,
    pub score_slope: f64,
    pub peak_slope: f64,
}

impl ScalingReport {
    pub const CSV_HEADER: &'static str = "impl,n,half_window,dk,seconds,score_elements,peak_elements";

    pub fn write_csv<W: Write>(&self, mut out: W, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(out, "{}", Self::CSV_HEADER)?;
        }
        for p in &self.points {
            writeln!(
                out,
                "{},{},{},{},{:.9},{},{}",
                self.implementation, p.n, self.half_window, self.dk, p.seconds, p.score_elements, p.peak_elements
            )?;
        }
        Ok(())
    }
}

/// Least-squares slope of `log₂ y` on `log₂ x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.log2()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.log2()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub implementation: BandImpl,
    pub ns: Vec<usize>,
    pub half_window: usize,
    pub dk: usize,
    pub repeats: usize,
    pub mode: Mode,
    pub seed: u64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    }
}

/// Times one single-precision head per `n`: one discarded warmup run, then
/// the median of `repeats` runs. Runs on the current rayon pool, so pin
/// the worker count before calling for stable numbers.
pub fn time_scaling(opts: &BenchOptions) -> Result<ScalingReport> {
    if opts.ns.len() < 3 || opts.ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("bench needs at least three ascending sequence lengths".into()));
    }
    if opts.repeats < 5 {
        return Err(Error::Config(format!("repeats must be at least 5, got {}", opts.repeats)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut points = Vec::with_capacity(opts.ns.len());
    for &n in &opts.ns {
        let cfg = PatternConfig::new(n, opts.half_window, 1, opts.mode);
        let q: Tensor<f32> = normal_tensor(&mut rng, n, opts.dk, 1.0);
        let k: Tensor<f32> = normal_tensor(&mut rng, n, opts.dk, 1.0);
        let v: Tensor<f32> = normal_tensor(&mut rng, n, opts.dk, 1.0);
        attention_forward(opts.implementation, &q, &k, &v, &cfg)?;
        let mut times = Vec::with_capacity(opts.repeats);
        for _ in 0..opts.repeats {
            let t0 = Instant::now();
            let out = attention_forward(opts.implementation, &q, &k, &v, &cfg)?;
            times.push(t0.elapsed().as_secs_f64());
            std::hint::black_box(out);
        }
        let seconds = median(times);
        if seconds < 1e-3 {
            return Err(Error::Config(format!(
                "median time {seconds:.2e} s at n = {n} is below timer resolution (1 ms); use larger n"
            )));
        }
        let acct = count_memory(opts.implementation, n, opts.half_window, opts.mode)?;
        points.push(ScalingPoint {
            n,
            seconds,
            score_elements: acct.score_elements,
            peak_elements: acct.peak_elements,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.n as f64).collect();
    let slope = |f: &dyn Fn(&ScalingPoint) -> f64| loglog_slope(&xs, &points.iter().map(f).collect::<Vec<_>>());
    Ok(ScalingReport {
        implementation: opts.implementation,
        half_window: opts.half_window,
        dk: opts.dk,
        time_slope: slope(&|p| p.seconds),
        score_slope: slope(&|p| p.score_elements as f64),
        peak_slope: slope(&|p| p.peak_elements as f64),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let xs = [512.0, 1024.0, 2048.0, 4096.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x * x).collect();
        assert!((loglog_slope(&xs, &ys) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dense_count_is_n_squared() {
        let a = count_memory(BandImpl::Dense, 1024, 8, Mode::Bidirectional).unwrap();
        assert_eq!(a.score_elements, 1_048_576);
        let l = count_memory(BandImpl::Loop, 8, 2, Mode::Bidirectional).unwrap();
        assert_eq!(l.score_elements, 34);
    }

    #[test]
    fn too_few_points_is_rejected() {
        let opts = BenchOptions {
            implementation: BandImpl::Loop,
            ns: vec![64, 128],
            half_window: 4,
            dk: 8,
            repeats: 5,
            mode: Mode::Bidirectional,
            seed: 0,
        };
        assert!(time_scaling(&opts).is_err());
    }
}
