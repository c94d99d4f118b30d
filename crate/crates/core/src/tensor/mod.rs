//! Dense row-major tensors with a reverse-mode tape.
//!
//! [`Tensor`] is plain storage (shape, data, optional gradient). Differentiable
//! computation happens on a [`Tape`]: values are registered as leaves, every
//! primitive appends one node, and [`Tape::backward`] replays the nodes in
//! reverse. Models are written once against [`Var`] and evaluated in either
//! `f32` (training) or `f64` (verification).

pub mod kernels;
mod optim;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use optim::{AdamW, AdamWConfig};
pub use tape::{Tape, Var};

/// Scalar element type of a tensor.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("float converts to f64")
    }
}

impl Float for f32 {}
impl Float for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Float = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} holds {} values but {} were supplied",
                shape,
                n,
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

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[], value)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Samples i.i.d. `N(0, std²)` entries.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient accumulator, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::dim(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let mut t = Tensor::new(shape, self.data.clone())?;
        t.requires_grad = self.requires_grad;
        Ok(t)
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "cannot compare shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`; `other` may also be a
    /// single `[k, n]` matrix shared across the batch.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let plan = kernels::MatmulPlan::new(&self.shape, &other.shape)?;
        let mut out = vec![T::zero(); plan.out_len()];
        plan.forward(&self.data, &other.data, &mut out);
        Tensor::new(&plan.out_shape, out)
    }

    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        let n = last_extent(&self.shape)?;
        let mut out = vec![T::zero(); self.data.len()];
        kernels::softmax_rows(&self.data, &mut out, n)?;
        Tensor::new(&self.shape, out)
    }

    pub fn layernorm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let d = last_extent(&self.shape)?;
        if gain.numel() != d || bias.numel() != d {
            return Err(Error::dim(format!(
                "layernorm affine parameters must have {d} entries"
            )));
        }
        let mut out = vec![T::zero(); self.data.len()];
        kernels::layernorm(&self.data, &gain.data, &bias.data, T::of(eps), d, &mut out, None);
        Tensor::new(&self.shape, out)
    }

    pub fn gelu(&self) -> Tensor<T> {
        self.map(kernels::gelu)
    }

    pub fn transpose_last2(&self) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::dim("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let (shape, data) = kernels::permute(&self.shape, &self.data, perm)?;
        Tensor::new(&shape, data)
    }
}

pub(crate) fn last_extent(shape: &[usize]) -> Result<usize> {
    match shape.last() {
        Some(&d) if d >= 1 => Ok(d),
        _ => Err(Error::dim(format!(
            "expected a non-empty trailing dimension, got shape {shape:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_matrix_is_matrix() {
        let a = Tensor::<f64>::new(&[3, 3], (0..9).map(|x| x as f64 - 4.0).collect()).unwrap();
        let out = Tensor::eye(3).matmul(&a).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn hand_contraction() {
        let a = Tensor::<f64>::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::new(&[2, 1], vec![0.0, 1.0]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[2.0, 4.0]);
    }

    #[test]
    fn zero_matrix_annihilates() {
        let a = Tensor::<f32>::from_fn(&[3, 4], |i| i as f32);
        let out = Tensor::zeros(&[2, 3]).matmul(&a).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_inner_mismatch_is_dimension_error() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let uniform = Tensor::<f64>::zeros(&[4]).softmax_rows().unwrap();
        for &p in uniform.data() {
            assert!((p - 0.25).abs() < 1e-12);
        }

        // Oracle: direct exponentiation and normalisation.
        let logits = [0.0, -0.70711, -0.70711, -1.0];
        let z: f64 = logits.iter().map(|x: &f64| x.exp()).sum();
        let expected: Vec<f64> = logits.iter().map(|x| x.exp() / z).collect();
        let got = Tensor::<f64>::new(&[4], logits.to_vec())
            .unwrap()
            .softmax_rows()
            .unwrap();
        for (g, e) in got.data().iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12);
        }
        for (g, e) in got.data().iter().zip([0.42481, 0.20946, 0.20946, 0.15628]) {
            assert!((g - e).abs() < 1e-5);
        }

        let big = Tensor::<f32>::new(&[2], vec![1000.0, 0.0])
            .unwrap()
            .softmax_rows()
            .unwrap();
        assert_eq!(big.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_nan() {
        let t = Tensor::<f32>::new(&[2], vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(t.softmax_rows(), Err(Error::Numeric(_))));
    }

    #[test]
    fn layernorm_examples() {
        let ones = Tensor::<f64>::ones(&[3]);
        let zeros = Tensor::<f64>::zeros(&[3]);
        let constant = Tensor::<f64>::full(&[3], 7.5);
        let out = constant.layernorm(&ones, &zeros, 1e-6).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));

        let x = Tensor::<f64>::new(&[2], vec![1.0, -1.0]).unwrap();
        let out = x
            .layernorm(&Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-6)
            .unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-6);
        assert!((out.data()[1] + 1.0).abs() < 1e-6);

        let bias = Tensor::<f64>::new(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let x = Tensor::<f64>::new(&[2, 3], vec![1.0, 5.0, -2.0, 0.0, 3.0, 3.5]).unwrap();
        let out = x.layernorm(&Tensor::zeros(&[3]), &bias, 1e-6).unwrap();
        assert_eq!(out.data(), &[0.1, -0.2, 0.3, 0.1, -0.2, 0.3]);
    }

    #[test]
    fn gelu_zero_and_asymptotes() {
        let t = Tensor::<f64>::new(&[3], vec![0.0, 10.0, -10.0]).unwrap().gelu();
        assert_eq!(t.data()[0], 0.0);
        assert!((t.data()[1] - 10.0).abs() < 1e-4);
        assert!(t.data()[2].abs() < 1e-4);
    }

    #[test]
    fn reshape_round_trip_preserves_order() {
        let t = Tensor::<f32>::from_fn(&[2, 3, 4], |i| i as f32);
        let back = t.reshape(&[6, 4]).unwrap().reshape(&[2, 3, 4]).unwrap();
        assert_eq!(back, t);
        assert!(t.reshape(&[5, 5]).is_err());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::<f32>::zeros(&[2]).with_requires_grad();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }
}
