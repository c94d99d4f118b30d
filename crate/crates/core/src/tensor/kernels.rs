//! Slice-level kernels shared by [`Tensor`](super::Tensor) and the tape.
//!
//! All reductions run sequentially left to right so results never depend on
//! scheduling.

use super::Float;
use crate::error::{Error, Result};

/// Shape bookkeeping for a batched matrix product.
#[derive(Clone, Debug)]
pub struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` is a single matrix reused for every batch entry.
    pub b_shared: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::dim(format!(
                "matmul needs rank >= 2 operands, got {a:?} and {b:?}"
            )));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != kb {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {a:?} x {b:?}"
            )));
        }
        let a_batch = &a[..a.len() - 2];
        let b_batch = &b[..b.len() - 2];
        let b_shared = b_batch.is_empty();
        if !b_shared && a_batch != b_batch {
            return Err(Error::dim(format!(
                "matmul batch extents differ: {a:?} x {b:?}"
            )));
        }
        let batch = a_batch.iter().product();
        let mut out_shape = a_batch.to_vec();
        out_shape.extend([m, n]);
        Ok(MatmulPlan {
            batch,
            m,
            k,
            n,
            b_shared,
            out_shape,
        })
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.m * self.n
    }

    fn b_offset(&self, bi: usize) -> usize {
        if self.b_shared {
            0
        } else {
            bi * self.k * self.n
        }
    }

    pub fn forward<T: Float>(&self, a: &[T], b: &[T], out: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for bi in 0..self.batch {
            let a = &a[bi * m * k..(bi + 1) * m * k];
            let b = &b[self.b_offset(bi)..self.b_offset(bi) + k * n];
            let out = &mut out[bi * m * n..(bi + 1) * m * n];
            matmul(a, b, out, m, k, n);
        }
    }

    /// Accumulates `g · bᵀ` into `da` and `aᵀ · g` into `db`.
    pub fn backward<T: Float>(
        &self,
        a: &[T],
        b: &[T],
        g: &[T],
        da: Option<&mut [T]>,
        db: Option<&mut [T]>,
    ) {
        let (m, k, n) = (self.m, self.k, self.n);
        if let Some(da) = da {
            for bi in 0..self.batch {
                let b = &b[self.b_offset(bi)..self.b_offset(bi) + k * n];
                let g = &g[bi * m * n..(bi + 1) * m * n];
                let da = &mut da[bi * m * k..(bi + 1) * m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let brow = &b[kk * n..(kk + 1) * n];
                        da[i * k + kk] += dot(grow, brow);
                    }
                }
            }
        }
        if let Some(db) = db {
            for bi in 0..self.batch {
                let a = &a[bi * m * k..(bi + 1) * m * k];
                let g = &g[bi * m * n..(bi + 1) * m * n];
                let off = self.b_offset(bi);
                let db = &mut db[off..off + k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let aik = a[i * k + kk];
                        if aik == T::zero() {
                            continue;
                        }
                        let drow = &mut db[kk * n..(kk + 1) * n];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += aik * gv;
                        }
                    }
                }
            }
        }
    }
}

/// `out = a · b` for row-major `a: [m, k]`, `b: [k, n]`.
pub fn matmul<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|x| *x = T::zero());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Max-subtracted softmax over contiguous rows of length `n`.
pub fn softmax_rows<T: Float>(x: &[T], out: &mut [T], n: usize) -> Result<()> {
    for (row, orow) in x.chunks(n).zip(out.chunks_mut(n)) {
        let mut max = T::neg_infinity();
        for &v in row {
            if v.is_nan() {
                return Err(Error::Numeric("softmax input contains NaN".into()));
            }
            if v > max {
                max = v;
            }
        }
        if !max.is_finite() {
            return Err(Error::Numeric(format!("softmax row maximum is {max}")));
        }
        let mut z = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            z += *o;
        }
        for o in orow.iter_mut() {
            *o = *o / z;
        }
    }
    Ok(())
}

/// Per-row statistics saved by the layernorm forward pass.
#[derive(Clone, Debug, Default)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layernorm<T: Float>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    eps: T,
    d: usize,
    out: &mut [T],
    mut stats: Option<&mut NormStats<T>>,
) {
    let inv_d = T::one() / T::from_usize(d).unwrap();
    for (row, orow) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean = mean * inv_d;
        let mut var = T::zero();
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var = var * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..d {
            orow[j] = (row[j] - mean) * rstd * gain[j] + bias[j];
        }
        if let Some(s) = stats.as_deref_mut() {
            s.mean.push(mean);
            s.rstd.push(rstd);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Float>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Materialises `x` with axes reordered so that output axis `i` is input
/// axis `perm[i]`.
pub fn permute<T: Float>(shape: &[usize], x: &[T], perm: &[usize]) -> Result<(Vec<usize>, Vec<T>)> {
    let r = shape.len();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::dim(format!(
            "{perm:?} is not a permutation of {r} axes"
        )));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(x[src]);
        // odometer increment over the output index
        for ax in (0..r).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Ok((out_shape, out))
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let x: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let (s, y) = permute(&shape, &x, &[2, 0, 1]).unwrap();
        assert_eq!(s, vec![4, 2, 3]);
        for a in 0..4 {
            for b in 0..2 {
                for c in 0..3 {
                    assert_eq!(y[a * 6 + b * 3 + c], x[b * 12 + c * 4 + a]);
                }
            }
        }
        let (_, back) = permute(&s, &y, &inverse_permutation(&[2, 0, 1])).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn permute_rejects_repeated_axes() {
        let x = vec![0.0f32; 6];
        assert!(permute(&[2, 3], &x, &[0, 0]).is_err());
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
