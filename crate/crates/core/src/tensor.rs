//! Dense row-major arrays.
//!
//! Values are always held as `f64`. A tensor tagged [`DType::F32`] has every
//! element rounded to the nearest `f32` whenever it is produced by a graph
//! operation, so f32 runs reproduce single-precision storage exactly while
//! sharing one set of kernels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    /// Checkpoint tag: 0 = f32, 1 = f64.
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            DType::F32 => x as f32 as f64,
            DType::F64 => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::dim("tensor", format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} holds {n} values but {} were given", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            dtype: DType::F64,
        })
    }

    /// Builds a tensor the caller knows is consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            dtype: DType::F64,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("tensor", "ragged or empty rows"));
        }
        Ok(Tensor::from_parts(
            vec![rows.len(), cols],
            rows.iter().flatten().copied().collect(),
        ))
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Re-tags the tensor, rounding values when narrowing to f32.
    pub fn with_dtype(mut self, dtype: DType) -> Self {
        if dtype == DType::F32 {
            self.data.iter_mut().for_each(|x| *x = dtype.round(*x));
        }
        self.dtype = dtype;
        self
    }

    /// Rows x columns view of a tensor whose last axis is the channel axis.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.data.len() / cols.max(1), cols)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        let mut t = Tensor::from_parts(shape.to_vec(), self.data.clone());
        t.dtype = self.dtype;
        Ok(t)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.rows_cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut o = 0;
        for (&i, &s) in index.iter().zip(&self.shape) {
            assert!(i < s, "index {index:?} out of bounds for {:?}", self.shape);
            o = o * s + i;
        }
        o
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// `out = a @ b` for row-major `a: m x k`, `b: k x n`.
///
/// Each output row depends only on the matching row of `a`, so callers may
/// split `m` into chunks without changing any result bit.
pub fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    gemm(a, (k, 1), b, (n, 1), m, k, n, out, 0.0);
}

/// `out += a^T @ b` for `a: k x m`, `b: k x n` (both row-major).
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    gemm(a, (1, m), b, (n, 1), m, k, n, out, 1.0);
}

/// `out = a @ b^T` for `a: m x k`, `b: n x k`.
pub fn matmul_nt_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    gemm(a, (k, 1), b, (1, k), m, k, n, out, 0.0);
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    m: usize,
    k: usize,
    n: usize,
    out: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            out[..m * n].iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    // SAFETY: the slices hold at least m*k, k*n and m*n elements, and the
    // strides describe dense row-major (or transposed) layouts within them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_must_agree() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(&[2, 3], vec![0.0; 5]),
            Err(Error::Dimension { .. })
        ));
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn f32_tag_rounds_values() {
        let t = Tensor::new(&[1], vec![0.1]).unwrap().with_dtype(DType::F32);
        assert_eq!(t.data()[0], 0.1f32 as f64);
        assert_eq!(DType::from_tag(t.dtype().tag()), Some(DType::F32));
    }

    #[test]
    fn gemm_variants_agree_with_loops() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut c = vec![0.0; m * n];
        matmul_into(&a, &b, m, k, n, &mut c);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // a^T (k x m viewed) @ c
        let mut at_c = vec![0.0; k * n];
        let at: Vec<f64> = a.clone();
        matmul_tn_acc(&at, &c, k, m, n, &mut at_c);
        for i in 0..k {
            for j in 0..n {
                let want: f64 = (0..m).map(|p| a[p * k + i] * c[p * n + j]).sum();
                assert!((at_c[i * n + j] - want).abs() < 1e-12);
            }
        }
        let mut c_bt = vec![0.0; m * k];
        matmul_nt_into(&c, &b, m, n, k, &mut c_bt);
        for i in 0..m {
            for j in 0..k {
                let want: f64 = (0..n).map(|p| c[i * n + p] * b[j * n + p]).sum();
                assert!((c_bt[i * k + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_rows_are_chunk_independent() {
        let (m, k, n) = (37, 19, 11);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 1.3).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut full = vec![0.0; m * n];
        matmul_into(&a, &b, m, k, n, &mut full);
        for i in 0..m {
            let mut one = vec![0.0; n];
            matmul_into(&a[i * k..(i + 1) * k], &b, 1, k, n, &mut one);
            for j in 0..n {
                assert_eq!(one[j].to_bits(), full[i * n + j].to_bits());
            }
        }
    }
}
