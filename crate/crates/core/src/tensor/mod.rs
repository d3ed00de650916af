//! Dense rank-4 tensors in channel-last `(n, h, w, k)` order, row-major
//! matrices, and the primitive operations the network is assembled from.
//!
//! All values are `f64`. Operations never couple batch items.

mod io;
pub(crate) mod kernels;
mod ops;

use std::fmt;

use crate::error::{Error, Result};

pub use io::{decode_t4b, encode_t4b, read_t4b, write_t4b, T4B_MAGIC};
pub use ops::{
    conv1x1, conv3x3, elementwise_mul, global_avg_pool, global_max_pool, layer_norm, matmul,
    maxpool2x2, softmax_rows, swish, transpose, weighted_sum3, LAYER_NORM_EPS,
};

/// Extents of a rank-4 tensor: batch, height, width, channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    n: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl Shape4 {
    pub fn new(n: usize, h: usize, w: usize, k: usize) -> Result<Self> {
        if n == 0 || h == 0 || w == 0 || k == 0 {
            return Err(Error::shape(format!(
                "extents must be positive, got [{n},{h},{w},{k}]"
            )));
        }
        n.checked_mul(h)
            .and_then(|x| x.checked_mul(w))
            .and_then(|x| x.checked_mul(k))
            .ok_or_else(|| Error::shape(format!("[{n},{h},{w},{k}] overflows usize")))?;
        Ok(Shape4 { n, h, w, k })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.k]
    }

    /// h·w
    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    /// Number of elements in one batch item.
    pub fn item_len(&self) -> usize {
        self.h * self.w * self.k
    }

    pub fn len(&self) -> usize {
        self.n * self.item_len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn with_n(&self, n: usize) -> Result<Self> {
        Shape4::new(n, self.h, self.w, self.k)
    }

    pub fn with_k(&self, k: usize) -> Result<Self> {
        Shape4::new(self.n, self.h, self.w, k)
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{},{},{}]", self.n, self.h, self.w, self.k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor {
    /// Validates length and finiteness.
    pub fn new(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tensor element {pos} is {}",
                data[pos]
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_raw(shape: Shape4, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Shape4) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: Shape4, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Builds a tensor from `f(n, h, w, k)`.
    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    for c in 0..shape.k {
                        data.push(f(n, y, x, c));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// A `[1,1,1,1]` tensor.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape4 { n: 1, h: 1, w: 1, k: 1 },
            data: vec![value],
        }
    }

    /// A `[1,1,1,len]` tensor.
    pub fn vector(values: Vec<f64>) -> Result<Self> {
        let shape = Shape4::new(1, 1, 1, values.len())?;
        Tensor::new(shape, values)
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        let s = &self.shape;
        ((n * s.h + y) * s.w + x) * s.k + c
    }

    pub fn get(&self, n: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(n, y, x, c)]
    }

    /// One batch item as a `[1,h,w,k]` tensor.
    pub fn item(&self, n: usize) -> Tensor {
        let len = self.shape.item_len();
        Tensor {
            shape: Shape4 { n: 1, ..self.shape },
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    /// Concatenates tensors with equal item shapes along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero tensors"))?;
        let item_shape = Shape4 { n: 1, ..first.shape };
        let mut data = Vec::with_capacity(items.len() * item_shape.len() * first.shape.n);
        let mut n = 0;
        for t in items {
            if (Shape4 { n: 1, ..t.shape }) != item_shape {
                return Err(Error::shape(format!(
                    "stack: item shape {} differs from {}",
                    t.shape, first.shape
                )));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor::from_raw(item_shape.with_n(n)?, data))
    }

    pub fn reshape(&self, target: Shape4) -> Result<Tensor> {
        if target.len() != self.len() {
            return Err(Error::shape(format!(
                "reshape {} -> {}: element count {} != {}",
                self.shape,
                target,
                self.len(),
                target.len()
            )));
        }
        Ok(Tensor::from_raw(target, self.data.clone()))
    }

    pub fn to_matrix(&self, rows: usize, cols: usize) -> Result<Matrix> {
        if rows * cols != self.len() {
            return Err(Error::shape(format!(
                "reshape {} -> {rows}x{cols}: element count mismatch",
                self.shape
            )));
        }
        Matrix::new(rows, cols, self.data.clone())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix cannot hold {} values",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Matrix> {
        if rows * cols != self.data.len() {
            return Err(Error::shape(format!(
                "reshape {}x{} -> {rows}x{cols}: element count mismatch",
                self.rows, self.cols
            )));
        }
        Matrix::new(rows, cols, self.data.clone())
    }

    pub fn to_tensor(&self, target: Shape4) -> Result<Tensor> {
        if target.len() != self.data.len() {
            return Err(Error::shape(format!(
                "reshape {}x{} -> {target}: element count mismatch",
                self.rows, self.cols
            )));
        }
        Ok(Tensor::from_raw(target, self.data.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rejects_zero_extent() {
        assert!(Shape4::new(1, 0, 2, 3).is_err());
        assert!(Shape4::new(usize::MAX, 2, 2, 2).is_err());
        assert_eq!(Shape4::new(2, 3, 4, 5).unwrap().len(), 120);
    }

    #[test]
    fn tensor_rejects_bad_length_and_nan() {
        let s = Shape4::new(1, 1, 1, 2).unwrap();
        assert!(Tensor::new(s, vec![1.0]).is_err());
        assert!(matches!(
            Tensor::new(s, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn reshape_tensor_to_matrix_preserves_order() {
        let s = Shape4::new(1, 2, 2, 3).unwrap();
        let t = Tensor::new(s, (0..12).map(f64::from).collect()).unwrap();
        let m = t.to_matrix(4, 3).unwrap();
        assert_eq!(m.row(1), &[3.0, 4.0, 5.0]);
        assert_eq!(m.data(), t.data());
        let back = m.to_tensor(s).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn reshape_vector_to_row() {
        let t = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let m = t.to_matrix(1, 5).unwrap();
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn reshape_count_mismatch_errors() {
        let t = Tensor::zeros(Shape4::new(1, 2, 2, 3).unwrap());
        assert!(t.to_matrix(5, 3).is_err());
        assert!(t.reshape(Shape4::new(1, 1, 1, 11).unwrap()).is_err());
        let m = Matrix::zeros(2, 3);
        assert!(m.reshape(4, 2).is_err());
    }

    #[test]
    fn stack_and_item_round_trip() {
        let s = Shape4::new(1, 2, 1, 2).unwrap();
        let a = Tensor::new(s, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(s, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let ab = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(ab.shape().n(), 2);
        assert_eq!(ab.item(0), a);
        assert_eq!(ab.item(1), b);
    }
}
