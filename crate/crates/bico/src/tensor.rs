//! Dense row-major tensors over f32 (training) or f64 (gradient checks),
//! plus the handful of matmul kernels everything else is built on.

use crate::error::{BicoError, Result};
use num_traits::{Float, NumAssign, NumCast};
use std::fmt::Debug;

/// Element type for tensors and the autodiff graph. Training runs in f32;
/// gradient checks re-run the same graph code in f64.
pub trait Scalar:
    Float + NumAssign + NumCast + Default + Debug + Send + Sync + 'static
{
}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Convert an f64 constant into the active scalar type.
#[inline]
pub fn sc<S: Scalar>(x: f64) -> S {
    S::from(x).expect("scalar conversion")
}

#[inline]
pub fn erf<S: Scalar>(x: S) -> S {
    sc(libm::erf(x.to_f64().expect("to_f64")))
}

#[derive(Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}(len={})", self.dims, self.data.len())
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(BicoError::dim(
                "tensor_new",
                format!("dims {:?} imply {} elements, got {}", dims, numel, data.len()),
            ));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let numel: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![S::zero(); numel],
        }
    }

    pub fn full(dims: &[usize], value: S) -> Self {
        let numel: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            dims: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let numel: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Rank-2 row count (rank-1 tensors are treated as a single row).
    pub fn rows(&self) -> usize {
        match self.dims.len() {
            2 => self.dims[0],
            1 => 1,
            _ => panic!("rows() on rank-{} tensor", self.dims.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.dims.len() {
            2 => self.dims[1],
            1 => self.dims[0],
            _ => panic!("cols() on rank-{} tensor", self.dims.len()),
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.dims.len() == 2
    }

    pub fn row(&self, i: usize) -> &[S] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scalar_value(&self) -> S {
        assert_eq!(self.numel(), 1, "scalar_value on non-scalar");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|&v| T::from(v).expect("cast"))
                .collect(),
        }
    }

    /// Exact elementwise equality (same dims, same values).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a == b || (a.is_nan() && b.is_nan()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64().unwrap())
            .fold(0.0, f64::max)
    }

    pub fn mean_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims, other.dims);
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64().unwrap())
            .sum();
        s / self.numel() as f64
    }
}

impl<S: Scalar> Tensor<S> {
    /// Fill with N(0, std) draws from the given rng.
    pub fn randn(dims: &[usize], std: f64, rng: &mut impl rand::Rng) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let numel: usize = dims.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                sc(z * std)
            })
            .collect();
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }
}

// ── matmul kernels (accumulate into c) ───────────────────────────────

/// c += a @ b, a: [m,k], b: [k,n], c: [m,n]
pub fn mm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (l, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c += a @ b^T, a: [m,k], b: [n,k], c: [m,n]
pub fn mm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// c += a^T @ b, a: [m,k], b: [m,n], c: [k,n]
pub fn mm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let crow = &mut c[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_dims() {
        assert!(Tensor::new(vec![2, 3], vec![0.0f32; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0f32; 6]).is_ok());
    }

    #[test]
    fn kernels_agree_with_naive() {
        let m = 3;
        let k = 4;
        let n = 5;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.1 - 0.7).collect();
        let mut c = vec![0.0; m * n];
        mm_nn(&a, &b, &mut c, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // a @ b^T against transposed-by-hand b
        let bt: Vec<f64> = {
            let mut t = vec![0.0; k * n];
            for l in 0..k {
                for j in 0..n {
                    t[j * k + l] = b[l * n + j];
                }
            }
            t
        };
        let mut c2 = vec![0.0; m * n];
        mm_nt(&a, &bt, &mut c2, m, k, n);
        assert_eq!(c, c2);
        // a^T @ (a @ b) spot check
        let mut d = vec![0.0; k * n];
        mm_tn(&a, &c, &mut d, m, k, n);
        for l in 0..k {
            for j in 0..n {
                let want: f64 = (0..m).map(|i| a[i * k + l] * c[i * n + j]).sum();
                assert!((d[l * n + j] - want).abs() < 1e-12);
            }
        }
    }
}
