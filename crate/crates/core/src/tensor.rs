//! Dense row-major tensor over a generic scalar.
//!
//! Deliberately minimal: shape bookkeeping plus the handful of dense kernels
//! the attention and loss code need. Nothing here allocates views; rows are
//! borrowed as slices.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Number of rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on rank-{}", self.shape.len());
        self.shape[0]
    }

    /// Number of columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on rank-{}", self.shape.len());
        self.shape[1]
    }

    /// Borrow row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at2(&self, i: usize, j: usize) -> F {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: F) {
        self.data[i * self.shape[1] + j] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise cast to another scalar type (via f64).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.wide())).collect(),
        }
    }
}

/// `a (m,k) * b (k,n) -> (m,n)`.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (l, &av) in arow.iter().enumerate() {
            let brow = b.row(l);
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `m (r,c) * v (c) -> (r)`.
pub fn matvec<F: Scalar>(m: &Tensor<F>, v: &[F]) -> Vec<F> {
    assert_eq!(m.cols(), v.len(), "matvec dims");
    (0..m.rows()).map(|i| dot(m.row(i), v)).collect()
}

/// `m^T (r,c) * v (r) -> (c)`, without materializing the transpose.
pub fn matvec_t<F: Scalar>(m: &Tensor<F>, v: &[F]) -> Vec<F> {
    assert_eq!(m.rows(), v.len(), "matvec_t dims");
    let mut out = vec![F::zero(); m.cols()];
    for (i, &vi) in v.iter().enumerate() {
        for (o, &mij) in out.iter_mut().zip(m.row(i).iter()) {
            *o += vi * mij;
        }
    }
    out
}

pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum()
}

pub fn norm2<F: Scalar>(a: &[F]) -> F {
    dot(a, a).sqrt()
}

/// Rank-1 update `out += alpha * u v^T` on a rank-2 tensor.
pub fn add_outer<F: Scalar>(out: &mut Tensor<F>, alpha: F, u: &[F], v: &[F]) {
    assert_eq!(out.rows(), u.len());
    assert_eq!(out.cols(), v.len());
    for (i, &ui) in u.iter().enumerate() {
        let scale = alpha * ui;
        for (o, &vj) in out.row_mut(i).iter_mut().zip(v.iter()) {
            *o += scale * vj;
        }
    }
}
