//! Dense row-major tensors.
//!
//! A [`Tensor`] owns a contiguous buffer and its shape. There are no strided
//! views: slicing and transposition always copy. Element type is either
//! `f32` (runtime default) or `f64` (verification), selected through the
//! [`Element`] trait.

use std::fmt;

use num_traits::Float;

use crate::error::{Error, Result};

/// Storage precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[serde(alias = "f32")]
    Single,
    #[serde(alias = "f64")]
    Double,
}

impl DType {
    /// Checkpoint code: 0 = f32, 1 = f64.
    pub fn code(self) -> u8 {
        match self {
            DType::Single => 0,
            DType::Double => 1,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::Single => 4,
            DType::Double => 8,
        }
    }
}

/// Scalar types a [`Tensor`] can hold.
pub trait Element:
    Float + Default + Send + Sync + fmt::Debug + fmt::Display + std::iter::Sum + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::Single;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::Double;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Dense row-major tensor.
///
/// `requires_grad` and `grad` are only meaningful for parameters; values
/// produced inside a [`Graph`](crate::autodiff::Graph) keep their gradients
/// in the graph.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a tensor from `f64` values, converting to `T`.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    /// 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let m = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == k), "ragged rows");
        let data = rows.iter().flatten().map(|&v| T::from_f64(v)).collect();
        Tensor {
            shape: vec![m, k],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        let d = self.last_dim();
        if d == 0 {
            0
        } else {
            self.numel() / d
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let d = self.last_dim();
        &mut self.data[i * d..(i + 1) * d]
    }

    /// Element at a 2-D index.
    pub fn at(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "item() needs a single element, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute element-wise difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(&[n, m], out)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::Shape(format!("expected a 2-D tensor, got shape {s:?}"))),
        }
    }

    /// Copies rows `idx` into a new `[idx.len(), d]` tensor.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let (m, d) = self.dims2()?;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= m {
                return Err(Error::OutOfRange(format!("row {i} of {m}")));
            }
            out.extend_from_slice(self.row(i));
        }
        Tensor::new(&[idx.len(), d], out)
    }

    /// Checksum of the raw little-endian bytes.
    pub fn checksum(&self) -> u32 {
        let mut bytes = Vec::with_capacity(self.numel() * T::DTYPE.size_of());
        for &v in &self.data {
            v.write_le(&mut bytes);
        }
        crc32fast::hash(&bytes)
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor<{:?}>{:?} [", T::DTYPE, self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.numel() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.last_dim(), 3);
    }

    #[test]
    fn transpose_round_trip() {
        let t = Tensor::<f64>::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let tt = t.transpose().unwrap();
        assert_eq!(tt.shape(), &[3, 2]);
        assert_eq!(tt.at(2, 1), 6.0);
        assert_eq!(tt.transpose().unwrap(), t);
    }

    #[test]
    fn gather_rejects_bad_row() {
        let t = Tensor::<f32>::zeros(&[3, 2]);
        assert!(matches!(t.gather_rows(&[3]), Err(Error::OutOfRange(_))));
    }
}
