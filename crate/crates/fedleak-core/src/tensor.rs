//! Dense row-major f64 tensors.
//!
//! Everything in this crate runs in f64: the linear-layer reconstructions
//! divide near-cancelling gradient sums, and f32 headroom is not enough to
//! keep single-activator bins exact.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::input(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Panicking constructor for internal call sites with known-good shapes.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Single element of a rank-0 or one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::input(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// In-place x[i] += a[i]; shapes must match exactly.
    pub fn add_assign(&mut self, a: &Tensor) {
        assert_eq!(self.shape, a.shape, "add_assign shape mismatch");
        for (x, y) in self.data.iter_mut().zip(&a.data) {
            *x += y;
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for x in self.data.iter_mut() {
            *x *= c;
        }
    }

    pub fn clamp_in_place(&mut self, lo: f64, hi: f64) {
        for x in self.data.iter_mut() {
            *x = x.clamp(lo, hi);
        }
    }

    /// Mean of all elements.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

// ── shape-checked binary/unary kernels used by the tape ──

pub(crate) fn ew2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape, b.shape, "elementwise op shape mismatch: {:?} vs {:?}", a.shape, b.shape);
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// C[m,n] = A[m,k] * B[k,n] via the blocked dgemm kernel.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape.len(), 2, "matmul lhs must be 2-d");
    assert_eq!(b.shape.len(), 2, "matmul rhs must be 2-d");
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2, "matmul inner dims: {} vs {}", k, k2);
    let mut out = vec![0.0f64; m * n];
    if m * n * k > 0 {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                k as isize,
                1,
                b.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor { shape: vec![m, n], data: out }
}

pub(crate) fn transpose2(a: &Tensor) -> Tensor {
    assert_eq!(a.shape.len(), 2, "transpose on non-2-d tensor");
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor { shape: vec![n, m], data: out }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_len() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = matmul(&a, &b);
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let t = transpose2(&transpose2(&a));
        assert_eq!(t, a);
    }

    #[test]
    fn scalar_is_rank0() {
        let s = Tensor::scalar(4.5);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item(), 4.5);
    }
}
