//! Dense row-major tensors of small rank.
//!
//! Every path value, area block and jet component is a [`Tensor`]. Linear maps
//! are stored with the codomain axes first and the argument axes last, so
//! `A ∈ L(V⊗W; U)` has shape `(dim U, dim V, dim W)` and `A(v⊗w)` is
//! [`Tensor::apply`] against `v.outer(&w)`.

use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return shape_err(format!(
                "shape {:?} needs {} entries, got {}",
                shape,
                numel(&shape),
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; numel(shape)] }
    }

    pub fn scalar(x: f64) -> Self {
        Self { shape: vec![], data: vec![x] }
    }

    pub fn vector(v: Vec<f64>) -> Self {
        Self { shape: vec![v.len()], data: v }
    }

    /// Row-major matrix; panics if `data.len() != rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { shape: vec![rows, cols], data }
    }

    pub fn identity(d: usize) -> Self {
        let mut t = Self::zeros(&[d, d]);
        for i in 0..d {
            t.data[i * d + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for k in 0..t.data.len() {
            t.data[k] = f(&idx);
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank");
        let mut off = 0;
        for (i, (&k, &n)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(k < n, "index {k} out of range on axis {i}");
            off = off * n + k;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    /// Value of a rank-0 or single-entry tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} entries", self.data.len());
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.data.len() {
            return shape_err(format!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
    }

    fn check_same(&self, other: &Self, op: &str) {
        assert!(
            self.shape == other.shape,
            "{op}: shape {:?} vs {:?}",
            self.shape,
            other.shape
        );
    }

    pub fn scale(&self, a: f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|x| a * x).collect() }
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &Self) {
        self.check_same(other, "axpy");
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn outer(&self, other: &Self) -> Self {
        let mut shape = self.shape.clone();
        shape.extend_from_slice(&other.shape);
        let mut data = Vec::with_capacity(self.data.len() * other.data.len());
        for a in &self.data {
            for b in &other.data {
                data.push(a * b);
            }
        }
        Self { shape, data }
    }

    /// Contracts the last `k` axes of `self` with the first `k` axes of `other`.
    pub fn contract(&self, other: &Self, k: usize) -> Result<Self> {
        if k > self.ndim() || k > other.ndim() {
            return shape_err(format!("contract {k} axes of {:?} and {:?}", self.shape, other.shape));
        }
        let split = self.ndim() - k;
        if self.shape[split..] != other.shape[..k] {
            return shape_err(format!(
                "contract: trailing {:?} vs leading {:?}",
                &self.shape[split..],
                &other.shape[..k]
            ));
        }
        let p = numel(&self.shape[..split]);
        let c = numel(&self.shape[split..]);
        let q = numel(&other.shape[k..]);
        let mut data = vec![0.0; p * q];
        for i in 0..p {
            let row = &self.data[i * c..(i + 1) * c];
            let out = &mut data[i * q..(i + 1) * q];
            for (l, &a) in row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let col = &other.data[l * q..(l + 1) * q];
                for (o, &b) in out.iter_mut().zip(col) {
                    *o += a * b;
                }
            }
        }
        let mut shape = self.shape[..split].to_vec();
        shape.extend_from_slice(&other.shape[k..]);
        Ok(Self { shape, data })
    }

    /// Evaluates the linear map `self` at `x` (contracts every axis of `x`).
    pub fn apply(&self, x: &Self) -> Result<Self> {
        self.contract(x, x.ndim())
    }

    /// Composition `self ∘ other` of linear maps (contracts one axis).
    pub fn compose(&self, other: &Self) -> Result<Self> {
        self.contract(other, 1)
    }

    /// Precomposes argument slot `axis` with the matrix `m`:
    /// `out[.., i, ..] = Σ_k self[.., k, ..] m[k, i]`.
    pub fn map_axis(&self, axis: usize, m: &Self) -> Result<Self> {
        if m.ndim() != 2 || axis >= self.ndim() || m.shape[0] != self.shape[axis] {
            return shape_err(format!("map_axis {axis} of {:?} with {:?}", self.shape, m.shape));
        }
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        let (kn, inew) = (m.shape[0], m.shape[1]);
        let mut shape = self.shape.clone();
        shape[axis] = inew;
        let mut data = vec![0.0; outer * inew * inner];
        for o in 0..outer {
            for k in 0..kn {
                let src = &self.data[(o * kn + k) * inner..(o * kn + k + 1) * inner];
                for i in 0..inew {
                    let w = m.data[k * inew + i];
                    if w == 0.0 {
                        continue;
                    }
                    let dst = &mut data[(o * inew + i) * inner..(o * inew + i + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        Ok(Self { shape, data })
    }

    /// Swaps the last two axes; this is the factor reversal `(v⊗w)ᵀ = w⊗v`
    /// acting on the argument of a map in `L(V⊗W; U)`.
    pub fn transpose_last2(&self) -> Self {
        let n = self.ndim();
        assert!(n >= 2, "transpose_last2 on rank {n}");
        let (p, q) = (self.shape[n - 2], self.shape[n - 1]);
        let outer = numel(&self.shape[..n - 2]);
        let mut data = vec![0.0; self.data.len()];
        for o in 0..outer {
            let base = o * p * q;
            for i in 0..p {
                for j in 0..q {
                    data[base + j * p + i] = self.data[base + i * q + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(n - 2, n - 1);
        Self { shape, data }
    }

    /// Axis permutation: `out` axis `a` is `self` axis `perm[a]`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        let n = self.ndim();
        assert!(perm.len() == n && (0..n).all(|a| perm.contains(&a)), "invalid permutation {perm:?}");
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let mut src_strides = vec![1usize; n];
        for a in (0..n.saturating_sub(1)).rev() {
            src_strides[a] = src_strides[a + 1] * self.shape[a + 1];
        }
        let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; n];
        for _ in 0..self.data.len() {
            data.push(self.data[idx.iter().zip(&strides).map(|(i, s)| i * s).sum::<usize>()]);
            for a in (0..n).rev() {
                idx[a] += 1;
                if idx[a] < shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        Self { shape, data }
    }

    pub fn sym_last2(&self) -> Self {
        let t = self.transpose_last2();
        (self + &t).scale(0.5)
    }

    /// Largest deviation from symmetry in the last two axes.
    pub fn asymmetry(&self) -> f64 {
        (self - &self.transpose_last2()).max_abs()
    }

    /// Concatenates vectors.
    pub fn concat(parts: &[&Tensor]) -> Self {
        let mut data = Vec::new();
        for p in parts {
            assert_eq!(p.ndim(), 1, "concat expects vectors");
            data.extend_from_slice(&p.data);
        }
        Self::vector(data)
    }

    /// Copies `block` into the matrix `self` at offset `(r, c)`.
    pub fn put_block(&mut self, r: usize, c: usize, block: &Tensor) {
        assert!(self.ndim() == 2 && block.ndim() == 2, "put_block expects matrices");
        let cols = self.shape[1];
        for i in 0..block.shape[0] {
            for j in 0..block.shape[1] {
                self.data[(r + i) * cols + c + j] = block.data[i * block.shape[1] + j];
            }
        }
    }

    /// Extracts the `rows × cols` block at offset `(r, c)` of a matrix.
    pub fn block(&self, r: usize, c: usize, rows: usize, cols: usize) -> Tensor {
        assert_eq!(self.ndim(), 2, "block expects a matrix");
        let n = self.shape[1];
        Tensor::from_fn(&[rows, cols], |ix| self.data[(r + ix[0]) * n + c + ix[1]])
    }

    pub fn slice_vec(&self, start: usize, len: usize) -> Tensor {
        assert_eq!(self.ndim(), 1, "slice_vec expects a vector");
        Tensor::vector(self.data[start..start + len].to_vec())
    }
}

impl Add for &Tensor {
    type Output = Tensor;
    fn add(self, rhs: &Tensor) -> Tensor {
        self.check_same(rhs, "add");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &Tensor {
    type Output = Tensor;
    fn sub(self, rhs: &Tensor) -> Tensor {
        self.check_same(rhs, "sub");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

macro_rules! forward_owned {
    ($tr:ident, $m:ident) => {
        impl $tr<Tensor> for Tensor {
            type Output = Tensor;
            fn $m(self, rhs: Tensor) -> Tensor {
                (&self).$m(&rhs)
            }
        }
        impl $tr<&Tensor> for Tensor {
            type Output = Tensor;
            fn $m(self, rhs: &Tensor) -> Tensor {
                (&self).$m(rhs)
            }
        }
        impl $tr<Tensor> for &Tensor {
            type Output = Tensor;
            fn $m(self, rhs: Tensor) -> Tensor {
                self.$m(&rhs)
            }
        }
    };
}

forward_owned!(Add, add);
forward_owned!(Sub, sub);

impl Neg for &Tensor {
    type Output = Tensor;
    fn neg(self) -> Tensor {
        self.scale(-1.0)
    }
}

impl Mul<f64> for &Tensor {
    type Output = Tensor;
    fn mul(self, a: f64) -> Tensor {
        self.scale(a)
    }
}

impl AddAssign<&Tensor> for Tensor {
    fn add_assign(&mut self, rhs: &Tensor) {
        self.axpy(1.0, rhs);
    }
}

impl SubAssign<&Tensor> for Tensor {
    fn sub_assign(&mut self, rhs: &Tensor) {
        self.axpy(-1.0, rhs);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_moves_axes() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| (100 * i[0] + 10 * i[1] + i[2]) as f64);
        let p = t.permute(&[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]), t.at(&[1, 2, 3]));
        assert_eq!(t.permute(&[0, 2, 1]), t.transpose_last2());
        assert_eq!(t.permute(&[0, 1, 2]), t);
    }

    #[test]
    fn contract_matches_matmul() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::matrix(3, 2, vec![1., 0., 0., 1., 1., 1.]);
        let c = a.compose(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[4., 5., 10., 11.]);
    }

    #[test]
    fn apply_bilinear_to_outer() {
        let a = Tensor::from_fn(&[1, 2, 2], |ix| (ix[1] * 2 + ix[2] + 1) as f64);
        let v = Tensor::vector(vec![1.0, 2.0]);
        let w = Tensor::vector(vec![3.0, -1.0]);
        let direct: f64 = (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| a.at(&[0, i, j]) * v.data()[i] * w.data()[j])
            .sum();
        assert_eq!(a.apply(&v.outer(&w)).unwrap().item(), direct);
    }

    #[test]
    fn transpose_reverses_factors() {
        let a = Tensor::from_fn(&[2, 3, 2], |ix| (ix[0] * 100 + ix[1] * 10 + ix[2]) as f64);
        let v = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let w = Tensor::vector(vec![1.5, 0.25]);
        let lhs = a.apply(&v.outer(&w)).unwrap();
        let rhs = a.transpose_last2().apply(&w.outer(&v)).unwrap();
        assert_eq!(lhs, rhs);
        assert_eq!(a.transpose_last2().transpose_last2(), a);
    }

    #[test]
    fn map_axis_precomposes_slot() {
        let a = Tensor::from_fn(&[1, 2, 2], |ix| (1 + ix[1] + 3 * ix[2]) as f64);
        let m = Tensor::matrix(2, 2, vec![0., 1., 2., 0.5]);
        let v = Tensor::vector(vec![1.0, -2.0]);
        let w = Tensor::vector(vec![0.3, 0.7]);
        let lhs = a.map_axis(1, &m).unwrap().apply(&v.outer(&w)).unwrap();
        let mv = m.apply(&v).unwrap();
        let rhs = a.apply(&mv.outer(&w)).unwrap();
        assert!((lhs.item() - rhs.item()).abs() < 1e-14);
    }

    #[test]
    fn shape_errors_are_reported() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2]);
        assert!(a.compose(&b).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
