//! Dense row-major tensors. Feature maps use NCHW order.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure_shape, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        let numel: usize = dims.iter().product();
        ensure_shape!(
            numel == data.len(),
            "dims {:?} hold {} values, got {}",
            dims,
            numel,
            data.len()
        );
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, T::one())
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Self {
        let dims = dims.into();
        let numel = dims.iter().product();
        Self {
            dims,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let dims = dims.into();
        let numel: usize = dims.iter().product();
        Self {
            dims,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(
        dims: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        Self::from_fn(dims, |_| T::lit(rng.random_range(lo..hi)))
    }

    pub fn randn<R: Rng + ?Sized>(dims: impl Into<Vec<usize>>, rng: &mut R) -> Self {
        Self::from_fn(dims, |_| {
            let v: f64 = StandardNormal.sample(rng);
            T::lit(v)
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// `[n, c, h, w]` of a 4-d tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        ensure_shape!(
            self.dims.len() == 4,
            "expected NCHW tensor, got dims {:?}",
            self.dims
        );
        Ok([self.dims[0], self.dims[1], self.dims[2], self.dims[3]])
    }

    pub fn reshape(mut self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        let numel: usize = dims.iter().product();
        ensure_shape!(
            numel == self.data.len(),
            "cannot reshape {:?} into {:?}",
            self.dims,
            dims
        );
        self.dims = dims;
        Ok(self)
    }

    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let [_, cc, hh, ww] = [self.dims[0], self.dims[1], self.dims[2], self.dims[3]];
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        ensure_shape!(
            self.dims == other.dims,
            "elementwise op on {:?} and {:?}",
            self.dims,
            other.dims
        );
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        ensure_shape!(
            self.dims == other.dims,
            "accumulate {:?} into {:?}",
            other.dims,
            self.dims
        );
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.dims, other.dims, "max_abs_diff on mismatched dims");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}
