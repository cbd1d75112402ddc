//! Smooth maps with analytic derivatives up to third order.
//!
//! Every registry map is a ridge map: each output entry `e` is
//! `φ_e(⟨a_e, x⟩ + b_e)` for a scalar function `φ_e` from [`ScalarFn`]. This
//! covers linear, polynomial and trigonometric vector fields in any dimension,
//! and derivatives are exact: `D^k f_e(x) = φ_e^{(k)}(·) a_e^{⊗k}`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Scalar building blocks with closed-form derivatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarFn {
    /// `Σ c_k x^k`.
    Poly { coeffs: Vec<f64> },
    /// `offset + amp · sin(freq · x + phase)`.
    Sin {
        amp: f64,
        freq: f64,
        #[serde(default)]
        phase: f64,
        #[serde(default)]
        offset: f64,
    },
    /// `offset + amp · exp(rate · x)`.
    Exp {
        amp: f64,
        rate: f64,
        #[serde(default)]
        offset: f64,
    },
    /// `offset + amp · tanh(scale · x)`.
    Tanh {
        amp: f64,
        scale: f64,
        #[serde(default)]
        offset: f64,
    },
}

impl ScalarFn {
    pub fn identity() -> Self {
        Self::Poly { coeffs: vec![0.0, 1.0] }
    }

    pub fn constant(c: f64) -> Self {
        Self::Poly { coeffs: vec![c] }
    }

    pub fn linear(slope: f64, intercept: f64) -> Self {
        Self::Poly { coeffs: vec![intercept, slope] }
    }

    pub fn sin() -> Self {
        Self::Sin { amp: 1.0, freq: 1.0, phase: 0.0, offset: 0.0 }
    }

    pub fn tanh() -> Self {
        Self::Tanh { amp: 1.0, scale: 1.0, offset: 0.0 }
    }

    pub fn exp() -> Self {
        Self::Exp { amp: 1.0, rate: 1.0, offset: 0.0 }
    }

    /// `[φ, φ', φ'', φ''']` at `x`.
    pub fn derivs(&self, x: f64) -> [f64; 4] {
        match self {
            Self::Poly { coeffs } => {
                let mut out = [0.0; 4];
                for (order, o) in out.iter_mut().enumerate() {
                    *o = coeffs
                        .iter()
                        .enumerate()
                        .skip(order)
                        .map(|(k, &c)| {
                            let falling: f64 = (0..order).map(|i| (k - i) as f64).product();
                            c * falling * x.powi((k - order) as i32)
                        })
                        .sum();
                }
                out
            }
            Self::Sin { amp, freq, phase, offset } => {
                let z = freq * x + phase;
                let (s, c) = z.sin_cos();
                [offset + amp * s, amp * freq * c, -amp * freq * freq * s, -amp * freq.powi(3) * c]
            }
            Self::Exp { amp, rate, offset } => {
                let e = (rate * x).exp();
                [offset + amp * e, amp * rate * e, amp * rate * rate * e, amp * rate.powi(3) * e]
            }
            Self::Tanh { amp, scale, offset } => {
                let t = (scale * x).tanh();
                let s2 = 1.0 - t * t;
                [
                    offset + amp * t,
                    amp * scale * s2,
                    -2.0 * amp * scale * scale * t * s2,
                    amp * scale.powi(3) * s2 * (6.0 * t * t - 2.0),
                ]
            }
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        self.derivs(x)[0]
    }
}

/// A smooth map `R^n → R^{out_shape}` with derivatives to third order.
/// `D^k f(x)` has shape `out_shape ++ [n; k]`.
pub trait SmoothMap: Send + Sync + std::fmt::Debug {
    fn in_dim(&self) -> usize;
    fn out_shape(&self) -> Vec<usize>;
    /// `[f, Df, …, D^order f]` at `x`, `order <= 3`.
    fn derivs(&self, x: &Tensor, order: usize) -> Result<Vec<Tensor>>;
}

/// One ridge entry `φ(⟨a, x⟩ + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RidgeEntry {
    pub a: Vec<f64>,
    #[serde(default)]
    pub b: f64,
    pub phi: ScalarFn,
}

/// Map whose output entries (row-major over `out_shape`) are ridge functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RidgeMap {
    pub in_dim: usize,
    pub out_shape: Vec<usize>,
    pub entries: Vec<RidgeEntry>,
}

impl RidgeMap {
    pub fn new(in_dim: usize, out_shape: Vec<usize>, entries: Vec<RidgeEntry>) -> Result<Self> {
        let n_out: usize = out_shape.iter().product();
        if entries.len() != n_out {
            return shape_err(format!("ridge map needs {n_out} entries, got {}", entries.len()));
        }
        if entries.iter().any(|e| e.a.len() != in_dim) {
            return shape_err(format!("ridge directions must have length {in_dim}"));
        }
        Ok(Self { in_dim, out_shape, entries })
    }

    /// `f_i(x) = φ(x_i)` on `R^n`.
    pub fn componentwise(n: usize, phi: ScalarFn) -> Self {
        let entries = (0..n)
            .map(|i| RidgeEntry {
                a: (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect(),
                b: 0.0,
                phi: phi.clone(),
            })
            .collect();
        Self { in_dim: n, out_shape: vec![n], entries }
    }

    /// `f(x) = A x + c` with `A` of shape `out_shape ++ [n]`.
    pub fn affine(a: &Tensor, c: &Tensor) -> Result<Self> {
        let n = *a.shape().last().ok_or_else(|| Error::Invalid("affine map needs a matrix".into()))?;
        let out_shape = a.shape()[..a.ndim() - 1].to_vec();
        if c.shape() != out_shape.as_slice() {
            return shape_err("affine offset shape");
        }
        let entries = (0..c.len())
            .map(|e| RidgeEntry {
                a: a.data()[e * n..(e + 1) * n].to_vec(),
                b: 0.0,
                phi: ScalarFn::linear(1.0, c.data()[e]),
            })
            .collect();
        Self::new(n, out_shape, entries)
    }

    /// Scalar map `x ↦ φ(x)` on `R^1` with output shape `(1,)`.
    pub fn scalar(phi: ScalarFn) -> Self {
        Self::componentwise(1, phi)
    }

    /// `x ↦ φ(x_0)` on `R^n` with output shape `(1,)`.
    pub fn first_coordinate(n: usize, phi: ScalarFn) -> Result<Self> {
        let mut a = vec![0.0; n];
        if let Some(a0) = a.first_mut() {
            *a0 = 1.0;
        }
        Self::new(n, vec![1], vec![RidgeEntry { a, b: 0.0, phi }])
    }
}

impl SmoothMap for RidgeMap {
    fn in_dim(&self) -> usize {
        self.in_dim
    }

    fn out_shape(&self) -> Vec<usize> {
        self.out_shape.clone()
    }

    fn derivs(&self, x: &Tensor, order: usize) -> Result<Vec<Tensor>> {
        if x.shape() != [self.in_dim] {
            return shape_err(format!("ridge map expects ({},), got {:?}", self.in_dim, x.shape()));
        }
        if order > 3 {
            return Err(Error::Invalid("derivatives above third order are not available".into()));
        }
        let n = self.in_dim;
        let mut out: Vec<Tensor> = (0..=order)
            .map(|k| {
                let mut shape = self.out_shape.clone();
                shape.extend(std::iter::repeat_n(n, k));
                Tensor::zeros(&shape)
            })
            .collect();
        for (e, entry) in self.entries.iter().enumerate() {
            let z: f64 = entry.a.iter().zip(x.data()).map(|(a, xi)| a * xi).sum::<f64>() + entry.b;
            let d = entry.phi.derivs(z);
            out[0].data_mut()[e] = d[0];
            if order >= 1 {
                for i in 0..n {
                    out[1].data_mut()[e * n + i] = d[1] * entry.a[i];
                }
            }
            if order >= 2 {
                for i in 0..n {
                    for j in 0..n {
                        out[2].data_mut()[(e * n + i) * n + j] = d[2] * entry.a[i] * entry.a[j];
                    }
                }
            }
            if order >= 3 {
                for i in 0..n {
                    for j in 0..n {
                        for k in 0..n {
                            out[3].data_mut()[((e * n + i) * n + j) * n + k] =
                                d[3] * entry.a[i] * entry.a[j] * entry.a[k];
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Largest deviation of `Df, D²f, D³f` from central differences at `x`.
pub fn fd_check(map: &dyn SmoothMap, x: &Tensor, h: f64) -> Result<f64> {
    let n = map.in_dim();
    let d = map.derivs(x, 3)?;
    let mut worst = 0.0f64;
    for w in 0..n {
        let mut xp = x.clone();
        xp.data_mut()[w] += h;
        let mut xm = x.clone();
        xm.data_mut()[w] -= h;
        let dp = map.derivs(&xp, 2)?;
        let dm = map.derivs(&xm, 2)?;
        for k in 0..3 {
            let fd = (&dp[k] - &dm[k]).scale(0.5 / h);
            let an = slice_last(&d[k + 1], w);
            worst = worst.max((&fd - &an).max_abs());
        }
    }
    Ok(worst)
}

/// `t[..., w]` for the last axis.
pub(crate) fn slice_last(t: &Tensor, w: usize) -> Tensor {
    let n = *t.shape().last().expect("slice_last on scalar");
    let shape = t.shape()[..t.ndim() - 1].to_vec();
    let data = t.data().iter().skip(w).step_by(n).copied().collect();
    Tensor::new(shape, data).expect("slice_last shape")
}
