//! Dense numeric kernels on raw row-major buffers.
//!
//! Every kernel computes each output row independently and reduces in a
//! fixed left-to-right order, so results do not depend on the worker count.

use rayon::prelude::*;

use crate::tensor::Element;

/// Work (multiply-adds) above which row loops are handed to rayon.
const PAR_THRESHOLD: usize = 1 << 18;

/// Runs `f(row_index, row)` over `out` split into rows of `row_len`.
pub(crate) fn for_rows<T: Element, F>(out: &mut [T], row_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    if work >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
}

#[inline]
fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

#[inline]
pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// `C[m,p] = A[m,k] · B[k,p]`.
pub fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, p: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * p];
    for_rows(&mut c, p, m * k * p, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (t, &av) in a_row.iter().enumerate() {
            axpy(av, &b[t * p..(t + 1) * p], row);
        }
    });
    c
}

/// `C[m,p] = A[m,k] · B[p,k]ᵀ`.
pub fn matmul_nt<T: Element>(a: &[T], b: &[T], m: usize, k: usize, p: usize) -> Vec<T> {
    let bt = transpose(b, p, k);
    matmul(a, &bt, m, k, p)
}

/// `C[k,p] = A[m,k]ᵀ · B[m,p]`.
pub fn matmul_tn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, p: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * p];
    for_rows(&mut c, p, m * k * p, |t, row| {
        for i in 0..m {
            axpy(a[i * k + t], &b[i * p..(i + 1) * p], row);
        }
    });
    c
}

pub fn transpose<T: Element>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Row-wise softmax of `x[rows, width]` restricted to `mask` (true = keep).
///
/// Returns `None` for the first row with no unmasked entry.
pub fn masked_softmax_rows<T: Element>(
    x: &[T],
    mask: Option<&[bool]>,
    width: usize,
) -> Result<Vec<T>, usize> {
    let mut out = vec![T::zero(); x.len()];
    for (r, (xr, or)) in x.chunks(width).zip(out.chunks_mut(width)).enumerate() {
        let keep = |j: usize| mask.map_or(true, |m| m[r * width + j]);
        let mut max = T::neg_infinity();
        let mut any = false;
        for (j, &v) in xr.iter().enumerate() {
            if keep(j) {
                any = true;
                if v > max {
                    max = v;
                }
            }
        }
        if !any {
            return Err(r);
        }
        let mut sum = T::zero();
        for (j, (&v, o)) in xr.iter().zip(or.iter_mut()).enumerate() {
            if keep(j) {
                let e = (v - max).exp();
                *o = e;
                sum = sum + e;
            }
        }
        let inv = T::one() / sum;
        for o in or.iter_mut() {
            *o = *o * inv;
        }
    }
    Ok(out)
}

/// Backward of a row softmax: `dx = p ⊙ (dp − Σ p·dp)`. Masked entries have
/// `p = 0` and therefore receive no gradient.
pub fn softmax_rows_backward<T: Element>(p: &[T], dp: &[T], width: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); p.len()];
    for ((pr, dpr), dxr) in p
        .chunks(width)
        .zip(dp.chunks(width))
        .zip(dx.chunks_mut(width))
    {
        let s = dot(pr, dpr);
        for ((d, &pv), &g) in dxr.iter_mut().zip(pr).zip(dpr) {
            *d = pv * (g - s);
        }
    }
    dx
}

/// `√(2/π)` used by the tanh GeLU approximation.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh GeLU approximation.
pub const GELU_CUBIC: f64 = 0.044_715;

/// `gelu(x) = ½·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
#[inline]
pub fn gelu<T: Element>(x: T) -> T {
    let c = T::from_f64(GELU_SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::from_f64(GELU_SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Saved statistics of a layer-norm forward pass.
pub struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layernorm<T: Element>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    d: usize,
    eps: f64,
) -> (Vec<T>, LayerNormCache<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::from_f64(1.0 / d as f64);
    let eps = T::from_f64(eps);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layernorm_backward<T: Element>(
    dy: &[T],
    gamma: &[T],
    cache: &LayerNormCache<T>,
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = dy.len() / d;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let inv_d = T::from_f64(1.0 / d as f64);
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for j in 0..d {
            let g = dyr[j] * gamma[j];
            sum_g = sum_g + g;
            sum_gx = sum_gx + g * xh[j];
            dgamma[j] = dgamma[j] + dyr[j] * xh[j];
            dbeta[j] = dbeta[j] + dyr[j];
        }
        let rs = cache.rstd[r];
        for j in 0..d {
            let g = dyr[j] * gamma[j];
            dx[r * d + j] = rs * (g - inv_d * sum_g - xh[j] * inv_d * sum_gx);
        }
    }
    (dx, dgamma, dbeta)
}

/// Log-softmax of each row of `logits[rows, v]`.
pub fn log_softmax_rows<T: Element>(logits: &[T], v: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (lr, or) in logits.chunks(v).zip(out.chunks_mut(v)) {
        let max = lr.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + lr.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
        for (o, &x) in or.iter_mut().zip(lr) {
            *o = x - lse;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        // a: [3,4], b: [4,3]
        let c = matmul(&a, &b, 3, 4, 3);
        let bt = transpose(&b, 4, 3);
        assert_eq!(matmul_nt(&a, &bt, 3, 4, 3), c);
        let at = transpose(&a, 3, 4);
        assert_eq!(matmul_tn(&at, &b, 4, 3, 3), c);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        // tanh approximation at x = 1
        assert!((gelu(1.0f64) - 0.841_191_990_607_477_4).abs() < 1e-12);
        let h = 1e-6;
        for &x in &[-2.0f64, -0.3, 0.7, 3.1] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn fully_masked_row_reported() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let mask = [true, true, false, false];
        assert_eq!(masked_softmax_rows(&x, Some(&mask), 2), Err(1));
    }
}
