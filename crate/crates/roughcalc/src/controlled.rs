//! Controlled paths, space-time controlled fields and their composition.
//!
//! Tensor slots: codomain axes first, then argument axes. For a field with
//! codomain shape `U`, spatial dimension `n` and driver dimension `d`:
//!
//! | slot  | shape        | meaning                                  |
//! |-------|--------------|------------------------------------------|
//! | `f`   | `U`          | value                                    |
//! | `fp`  | `U ++ [d]`   | Gubinelli derivative `F′`                |
//! | `df`  | `U ++ [n]`   | spatial derivative `∂F`                  |
//! | `fpp` | `U ++ [d,d]` | second Gubinelli derivative `F″`         |
//! | `dfp` | `U ++ [n,d]` | mixed derivative, `∂F′(w ⊗ v)`           |
//! | `d2f` | `U ++ [n,n]` | spatial Hessian, symmetric               |
//! | `fdot`| `U`          | drift `Ḟ`                                |
//!
//! Second-order maps act on `𝕏_{s,t}` by contracting both trailing axes.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::functions::{slice_last, SmoothMap};
use crate::grid_paths::{GridPath, TimeGrid};
use crate::rough_lift::RoughPath;
use crate::tensor::Tensor;

fn with_axes(base: &[usize], extra: &[usize]) -> Vec<usize> {
    let mut s = base.to_vec();
    s.extend_from_slice(extra);
    s
}

fn check_shape(what: &str, t: &Tensor, want: &[usize]) -> Result<()> {
    if t.shape() != want {
        return shape_err(format!("{what}: expected shape {want:?}, got {:?}", t.shape()));
    }
    Ok(())
}

/// `Σ_i m[.., i, v] x_i`: the map `v ↦ m(x ⊗ v)` for `m` with two trailing slots.
fn first_slot(m: &Tensor, x: &Tensor) -> Result<Tensor> {
    m.transpose_last2().contract(x, 1)
}

/// A `W`-valued path controlled by `X`: `δY_{s,t} = Y′_s δX_{s,t} + R_{s,t}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlledPath {
    y: GridPath,
    yp: GridPath,
}

impl ControlledPath {
    pub fn new(y: GridPath, yp: GridPath) -> Result<Self> {
        if y.grid() != yp.grid() {
            return shape_err("controlled path components live on different grids");
        }
        if yp.shape().len() != y.shape().len() + 1 || yp.shape()[..y.shape().len()] != *y.shape() {
            return shape_err(format!("Y′ shape {:?} does not match Y shape {:?}", yp.shape(), y.shape()));
        }
        Ok(Self { y, yp })
    }

    pub fn y(&self) -> &GridPath {
        &self.y
    }

    pub fn yp(&self) -> &GridPath {
        &self.yp
    }

    pub fn grid(&self) -> &TimeGrid {
        self.y.grid()
    }

    pub fn driver_dim(&self) -> usize {
        *self.yp.shape().last().expect("Y′ has a driver axis")
    }
}

/// `(Y, Y′, Y″, Ẏ)` with `δY = Y′δX + Y″𝕏 + Ẏ(t−s) + O(|t−s|^{3α})`.
#[derive(Debug, Clone, PartialEq)]
pub struct StronglyControlledPath {
    y: GridPath,
    yp: GridPath,
    ypp: GridPath,
    ydot: GridPath,
}

impl StronglyControlledPath {
    pub fn new(y: GridPath, yp: GridPath, ypp: GridPath, ydot: GridPath) -> Result<Self> {
        let g = *y.grid();
        if yp.grid() != &g || ypp.grid() != &g || ydot.grid() != &g {
            return shape_err("strongly controlled path components live on different grids");
        }
        let w = y.shape().to_vec();
        let d = match yp.shape().last() {
            Some(&d) if yp.shape().len() == w.len() + 1 => d,
            _ => return shape_err(format!("Y′ shape {:?} does not match Y shape {w:?}", yp.shape())),
        };
        if yp.shape()[..w.len()] != w[..] {
            return shape_err(format!("Y′ shape {:?} does not match Y shape {w:?}", yp.shape()));
        }
        if ypp.shape() != with_axes(&w, &[d, d]).as_slice() {
            return shape_err(format!("Y″ shape {:?}, expected {:?}", ypp.shape(), with_axes(&w, &[d, d])));
        }
        if ydot.shape() != w.as_slice() {
            return shape_err(format!("Ẏ shape {:?}, expected {w:?}", ydot.shape()));
        }
        Ok(Self { y, yp, ypp, ydot })
    }

    pub fn zeros(grid: TimeGrid, shape: &[usize], d: usize) -> Self {
        Self {
            y: GridPath::zeros(grid, shape),
            yp: GridPath::zeros(grid, &with_axes(shape, &[d])),
            ypp: GridPath::zeros(grid, &with_axes(shape, &[d, d])),
            ydot: GridPath::zeros(grid, shape),
        }
    }

    pub fn y(&self) -> &GridPath {
        &self.y
    }

    pub fn yp(&self) -> &GridPath {
        &self.yp
    }

    pub fn ypp(&self) -> &GridPath {
        &self.ypp
    }

    pub fn ydot(&self) -> &GridPath {
        &self.ydot
    }

    pub fn grid(&self) -> &TimeGrid {
        self.y.grid()
    }

    pub fn value_shape(&self) -> &[usize] {
        self.y.shape()
    }

    pub fn driver_dim(&self) -> usize {
        *self.yp.shape().last().expect("Y′ has a driver axis")
    }

    pub fn into_parts(self) -> (GridPath, GridPath, GridPath, GridPath) {
        (self.y, self.yp, self.ypp, self.ydot)
    }

    /// `(Y, Y′)` as a controlled path.
    pub fn controlled(&self) -> ControlledPath {
        ControlledPath { y: self.y.clone(), yp: self.yp.clone() }
    }

    /// `(Y′, Y″)`: `δY′_{s,t}(v) ≈ Y″_s(δX_{s,t} ⊗ v)`, stored with the `δX`
    /// slot last.
    pub fn derivative_pair(&self) -> ControlledPath {
        let ypp_t = self.ypp.map(|_, v| v.transpose_last2()).expect("transpose keeps shapes");
        ControlledPath { y: self.yp.clone(), yp: ypp_t }
    }

    pub fn stopped(&self, tau: usize) -> Self {
        Self {
            y: self.y.stopped(tau),
            yp: self.yp.stopped(tau),
            ypp: self.ypp.stopped(tau),
            ydot: self.ydot.stopped(tau),
        }
    }

    pub fn subsample(&self, factor: usize) -> Result<Self> {
        Ok(Self {
            y: self.y.subsample(factor)?,
            yp: self.yp.subsample(factor)?,
            ypp: self.ypp.subsample(factor)?,
            ydot: self.ydot.subsample(factor)?,
        })
    }

    /// Largest componentwise deviation from `other`.
    pub fn max_diff(&self, other: &Self) -> Result<f64> {
        let mut worst = 0.0f64;
        for (a, b) in [(&self.y, &other.y), (&self.yp, &other.yp), (&self.ypp, &other.ypp), (&self.ydot, &other.ydot)] {
            if a.grid() != b.grid() || a.shape() != b.shape() {
                return shape_err("max_diff of incompatible jets");
            }
            for (u, v) in a.values().iter().zip(b.values()) {
                worst = worst.max((u - v).max_abs());
            }
        }
        Ok(worst)
    }
}

fn check_driver(grid: &TimeGrid, d: usize, rx: &RoughPath) -> Result<()> {
    if rx.grid() != grid {
        return shape_err("controlled path and rough path live on different grids");
    }
    if rx.dim() != d {
        return shape_err(format!("driver dimension {} does not match Y′ ({d})", rx.dim()));
    }
    Ok(())
}

/// Grid sup of `|δY_{i,j} − Y′_i δX_{i,j}| / (t_j − t_i)^{2α}` over `j − i ≥ min_gap`.
pub fn remainder_2(cp: &ControlledPath, rx: &RoughPath, min_gap: usize) -> Result<f64> {
    check_driver(cp.grid(), cp.driver_dim(), rx)?;
    if min_gap == 0 {
        return Err(Error::Invalid("min_gap must be at least 1".into()));
    }
    let g = *cp.grid();
    let beta = 2.0 * rx.alpha();
    let n = g.n_steps();
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut best = 0.0f64;
            for j in (i + min_gap)..=n {
                let dx = rx.increment(i, j);
                let mut r = cp.y.value(j) - cp.y.value(i);
                r -= &cp.yp.value(i).contract(&dx, 1).expect("checked shapes");
                best = best.max(r.norm() / g.span(i, j).powf(beta));
            }
            best
        })
        .collect();
    Ok(rows.into_iter().fold(0.0, f64::max))
}

/// The four seminorms of a strongly controlled path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrongSeminorms {
    /// `|R^{Y,Y′,Y″,Ẏ}|_{3α}`.
    pub r3: f64,
    /// `|R^{Y′,Y″}|_{2α}`.
    pub r2: f64,
    /// `‖Y″‖_α`.
    pub ypp_holder: f64,
    /// `‖Ẏ‖_α`.
    pub ydot_holder: f64,
}

impl StrongSeminorms {
    pub fn total(&self) -> f64 {
        self.r3 + self.r2 + self.ypp_holder + self.ydot_holder
    }
}

fn third_order_residual(scp: &StronglyControlledPath, i: usize, j: usize, dx: &Tensor, area: &Tensor, dt: f64) -> Tensor {
    let mut r = scp.y.value(j) - scp.y.value(i);
    r -= &scp.yp.value(i).contract(dx, 1).expect("checked shapes");
    r -= &scp.ypp.value(i).contract(area, 2).expect("checked shapes");
    r.axpy(-dt, scp.ydot.value(i));
    r
}

/// Grid sup of `|δY − Y′δX − Y″𝕏 − Ẏ(t−s)| / (t−s)^{3α}` over `j − i ≥ min_gap`.
pub fn remainder_3(scp: &StronglyControlledPath, rx: &RoughPath, min_gap: usize) -> Result<f64> {
    Ok(strong_seminorms(scp, rx, min_gap)?.r3)
}

/// All seminorms entering `[Y, Y′, Y″, Ẏ]_{X;3}`.
pub fn strong_seminorms(scp: &StronglyControlledPath, rx: &RoughPath, min_gap: usize) -> Result<StrongSeminorms> {
    check_driver(scp.grid(), scp.driver_dim(), rx)?;
    if min_gap == 0 {
        return Err(Error::Invalid("min_gap must be at least 1".into()));
    }
    let g = *scp.grid();
    let a = rx.alpha();
    let n = g.n_steps();
    let rows: Vec<StrongSeminorms> = (0..n)
        .into_par_iter()
        .map(|i| {
            let areas = rx.area().row(i);
            let mut s = StrongSeminorms { r3: 0.0, r2: 0.0, ypp_holder: 0.0, ydot_holder: 0.0 };
            for j in (i + min_gap)..=n {
                let h = g.span(i, j);
                let dx = rx.increment(i, j);
                let r3 = third_order_residual(scp, i, j, &dx, &areas[j - i - 1], h);
                s.r3 = s.r3.max(r3.norm() / h.powf(3.0 * a));
                let mut r2 = scp.yp.value(j) - scp.yp.value(i);
                r2 -= &first_slot(scp.ypp.value(i), &dx).expect("checked shapes");
                s.r2 = s.r2.max(r2.norm() / h.powf(2.0 * a));
                s.ypp_holder = s.ypp_holder.max((scp.ypp.value(j) - scp.ypp.value(i)).norm() / h.powf(a));
                s.ydot_holder = s.ydot_holder.max((scp.ydot.value(j) - scp.ydot.value(i)).norm() / h.powf(a));
            }
            s
        })
        .collect();
    Ok(rows.into_iter().fold(
        StrongSeminorms { r3: 0.0, r2: 0.0, ypp_holder: 0.0, ydot_holder: 0.0 },
        |acc, s| StrongSeminorms {
            r3: acc.r3.max(s.r3),
            r2: acc.r2.max(s.r2),
            ypp_holder: acc.ypp_holder.max(s.ypp_holder),
            ydot_holder: acc.ydot_holder.max(s.ydot_holder),
        },
    ))
}

/// Dimensions of a controlled field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JetDims {
    pub driver: usize,
    pub domain: usize,
    pub codomain: Vec<usize>,
}

impl JetDims {
    pub fn new(driver: usize, domain: usize, codomain: Vec<usize>) -> Self {
        Self { driver, domain, codomain }
    }

    fn rank(&self) -> usize {
        self.codomain.len()
    }
}

/// One evaluation `(F, F′, ∂F, F″, ∂F′, ∂²F, Ḟ)` of a controlled field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Jet {
    pub f: Tensor,
    pub fp: Tensor,
    pub df: Tensor,
    pub fpp: Tensor,
    pub dfp: Tensor,
    pub d2f: Tensor,
    pub fdot: Tensor,
}

impl Jet {
    pub fn zeros(dims: &JetDims) -> Self {
        let (u, d, n) = (&dims.codomain, dims.driver, dims.domain);
        Self {
            f: Tensor::zeros(u),
            fp: Tensor::zeros(&with_axes(u, &[d])),
            df: Tensor::zeros(&with_axes(u, &[n])),
            fpp: Tensor::zeros(&with_axes(u, &[d, d])),
            dfp: Tensor::zeros(&with_axes(u, &[n, d])),
            d2f: Tensor::zeros(&with_axes(u, &[n, n])),
            fdot: Tensor::zeros(u),
        }
    }

    pub fn check(&self, dims: &JetDims) -> Result<()> {
        let (u, d, n) = (&dims.codomain, dims.driver, dims.domain);
        check_shape("F", &self.f, u)?;
        check_shape("F′", &self.fp, &with_axes(u, &[d]))?;
        check_shape("∂F", &self.df, &with_axes(u, &[n]))?;
        check_shape("F″", &self.fpp, &with_axes(u, &[d, d]))?;
        check_shape("∂F′", &self.dfp, &with_axes(u, &[n, d]))?;
        check_shape("∂²F", &self.d2f, &with_axes(u, &[n, n]))?;
        check_shape("Ḟ", &self.fdot, u)
    }

    pub fn components(&self) -> [&Tensor; 7] {
        [&self.f, &self.fp, &self.df, &self.fpp, &self.dfp, &self.d2f, &self.fdot]
    }

    /// Largest componentwise deviation.
    pub fn max_diff(&self, other: &Jet) -> f64 {
        self.components()
            .iter()
            .zip(other.components())
            .map(|(a, b)| if a.same_shape(b) { (*a - b).max_abs() } else { f64::INFINITY })
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|c| c.is_finite())
    }
}

/// A space-time controlled field evaluated lazily at `(grid index, point)`.
pub trait JetField: Send + Sync {
    fn grid(&self) -> &TimeGrid;
    fn dims(&self) -> &JetDims;
    fn eval(&self, k: usize, x: &Tensor) -> Result<Jet>;

    /// Jets at every grid node for a fixed point.
    fn eval_path(&self, x: &Tensor) -> Result<Vec<Jet>> {
        (0..self.grid().n_nodes()).map(|k| self.eval(k, x)).collect()
    }
}

fn check_point(dims: &JetDims, grid: &TimeGrid, k: usize, x: &Tensor) -> Result<()> {
    if k > grid.n_steps() {
        return Err(Error::Index(format!("time index {k} beyond {}", grid.n_steps())));
    }
    if x.shape() != [dims.domain] {
        return shape_err(format!("field expects a point of shape ({},), got {:?}", dims.domain, x.shape()));
    }
    Ok(())
}

/// `(x, 0, Id, 0, 0, 0, 0)`.
#[derive(Debug, Clone)]
pub struct IdentityField {
    grid: TimeGrid,
    dims: JetDims,
}

impl IdentityField {
    pub fn new(grid: TimeGrid, domain: usize, driver: usize) -> Self {
        Self { grid, dims: JetDims::new(driver, domain, vec![domain]) }
    }
}

impl JetField for IdentityField {
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn dims(&self) -> &JetDims {
        &self.dims
    }

    fn eval(&self, k: usize, x: &Tensor) -> Result<Jet> {
        check_point(&self.dims, &self.grid, k, x)?;
        let mut j = Jet::zeros(&self.dims);
        j.f = x.clone();
        j.df = Tensor::identity(self.dims.domain);
        Ok(j)
    }
}

/// `F ≡ c`, all other components zero.
#[derive(Debug, Clone)]
pub struct ConstantField {
    grid: TimeGrid,
    dims: JetDims,
    value: Tensor,
}

impl ConstantField {
    pub fn new(grid: TimeGrid, domain: usize, driver: usize, value: Tensor) -> Self {
        let dims = JetDims::new(driver, domain, value.shape().to_vec());
        Self { grid, dims, value }
    }
}

impl JetField for ConstantField {
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn dims(&self) -> &JetDims {
        &self.dims
    }

    fn eval(&self, k: usize, x: &Tensor) -> Result<Jet> {
        check_point(&self.dims, &self.grid, k, x)?;
        let mut j = Jet::zeros(&self.dims);
        j.f = self.value.clone();
        Ok(j)
    }
}

/// Time-independent field `(f, 0, Df, 0, 0, D²f, 0)`.
#[derive(Debug, Clone)]
pub struct SpatialField {
    grid: TimeGrid,
    dims: JetDims,
    map: Arc<dyn SmoothMap>,
}

impl SpatialField {
    pub fn new(grid: TimeGrid, driver: usize, map: Arc<dyn SmoothMap>) -> Self {
        let dims = JetDims::new(driver, map.in_dim(), map.out_shape());
        Self { grid, dims, map }
    }
}

impl JetField for SpatialField {
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn dims(&self) -> &JetDims {
        &self.dims
    }

    fn eval(&self, k: usize, x: &Tensor) -> Result<Jet> {
        check_point(&self.dims, &self.grid, k, x)?;
        let mut d = self.map.derivs(x, 2)?.into_iter();
        let mut j = Jet::zeros(&self.dims);
        j.f = d.next().expect("order 0");
        j.df = d.next().expect("order 1");
        j.d2f = d.next().expect("order 2");
        Ok(j)
    }
}

type JetFn = dyn Fn(usize, &Tensor) -> Result<Jet> + Send + Sync;

/// Field given by a closure; the closure is trusted to return consistent jets.
pub struct FnField {
    grid: TimeGrid,
    dims: JetDims,
    f: Box<JetFn>,
}

impl FnField {
    pub fn new(grid: TimeGrid, dims: JetDims, f: impl Fn(usize, &Tensor) -> Result<Jet> + Send + Sync + 'static) -> Self {
        Self { grid, dims, f: Box::new(f) }
    }
}

impl std::fmt::Debug for FnField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnField").field("grid", &self.grid).field("dims", &self.dims).finish()
    }
}

impl JetField for FnField {
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn dims(&self) -> &JetDims {
        &self.dims
    }

    fn eval(&self, k: usize, x: &Tensor) -> Result<Jet> {
        check_point(&self.dims, &self.grid, k, x)?;
        let j = (self.f)(k, x)?;
        j.check(&self.dims)?;
        Ok(j)
    }
}

/// A strongly controlled path seen as a field constant in space:
/// `(Y, Y′, 0, Y″, 0, 0, Ẏ)`.
#[derive(Debug, Clone)]
pub struct PathField {
    scp: StronglyControlledPath,
    dims: JetDims,
}

/// Embeds `scp` as a field on `R^domain` that ignores its spatial argument.
pub fn path_as_field(scp: &StronglyControlledPath, domain: usize) -> PathField {
    let dims = JetDims::new(scp.driver_dim(), domain, scp.value_shape().to_vec());
    PathField { scp: scp.clone(), dims }
}

impl JetField for PathField {
    fn grid(&self) -> &TimeGrid {
        self.scp.grid()
    }

    fn dims(&self) -> &JetDims {
        &self.dims
    }

    fn eval(&self, k: usize, x: &Tensor) -> Result<Jet> {
        check_point(&self.dims, self.scp.grid(), k, x)?;
        let mut j = Jet::zeros(&self.dims);
        j.f = self.scp.y.value(k).clone();
        j.fp = self.scp.yp.value(k).clone();
        j.fpp = self.scp.ypp.value(k).clone();
        j.fdot = self.scp.ydot.value(k).clone();
        Ok(j)
    }
}

/// Composition of jets: `outer` evaluated at `inner.f`, with bracket rate `b`.
///
/// Requires `inner` to be vector-valued with codomain equal to the domain of
/// `outer`.
pub fn compose_jets(outer: &Jet, inner: &Jet, b: &Tensor) -> Result<Jet> {
    let r = outer.f.ndim();
    let fp1 = &inner.fp;
    let df2 = &outer.df;
    // T = ∂F2′ F1′, (T)(v1 ⊗ v2) = ∂F2′((F1′v1) ⊗ v2)
    let t = outer.dfp.map_axis(r, fp1)?;
    let hess_pp = outer.d2f.map_axis(r, fp1)?.map_axis(r + 1, fp1)?;

    let f = outer.f.clone();
    let fp = &outer.fp + &df2.compose(fp1)?;
    let df = df2.compose(&inner.df)?;
    let fpp = &(&(&(&outer.fpp + &t) + &t.transpose_last2()) + &hess_pp) + &df2.compose(&inner.fpp)?;
    let dfp = &(&outer.dfp.map_axis(r, &inner.df)? + &outer.d2f.map_axis(r, &inner.df)?.map_axis(r + 1, fp1)?)
        + &df2.compose(&inner.dfp)?;
    let d2f = &outer.d2f.map_axis(r, &inner.df)?.map_axis(r + 1, &inner.df)? + &df2.compose(&inner.d2f)?;
    let corr = &hess_pp.scale(0.5) + &t;
    let fdot = &(&outer.fdot + &df2.compose(&inner.fdot)?) + &corr.contract(b, 2)?;
    Ok(Jet { f, fp, df, fpp, dfp, d2f, fdot })
}

/// Lazy composition `F2 ∘ F1`.
#[derive(Clone)]
pub struct ComposedField {
    outer: Arc<dyn JetField>,
    inner: Arc<dyn JetField>,
    bracket_rate: GridPath,
    dims: JetDims,
}

impl std::fmt::Debug for ComposedField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ComposedField").field("dims", &self.dims).finish()
    }
}

/// `F2 ∘ F1` with all seven component formulas; evaluation is lazy.
pub fn compose_fields(f2: Arc<dyn JetField>, f1: Arc<dyn JetField>, bracket_rate: &GridPath) -> Result<ComposedField> {
    let (d2, d1) = (f2.dims(), f1.dims());
    if f1.grid() != f2.grid() || bracket_rate.grid() != f1.grid() {
        return shape_err("composed fields and bracket rate live on different grids");
    }
    if d1.codomain != [d2.domain] {
        return shape_err(format!("inner codomain {:?} is not the outer domain ({},)", d1.codomain, d2.domain));
    }
    if d1.driver != d2.driver || bracket_rate.shape() != [d1.driver, d1.driver] {
        return shape_err("driver dimensions of composed fields or bracket rate disagree");
    }
    let dims = JetDims::new(d1.driver, d1.domain, d2.codomain.clone());
    Ok(ComposedField { outer: f2, inner: f1, bracket_rate: bracket_rate.clone(), dims })
}

impl JetField for ComposedField {
    fn grid(&self) -> &TimeGrid {
        self.inner.grid()
    }

    fn dims(&self) -> &JetDims {
        &self.dims
    }

    fn eval(&self, k: usize, x: &Tensor) -> Result<Jet> {
        let j1 = self.inner.eval(k, x)?;
        let j2 = self.outer.eval(k, &j1.f)?;
        compose_jets(&j2, &j1, self.bracket_rate.value(k))
    }

    fn eval_path(&self, x: &Tensor) -> Result<Vec<Jet>> {
        let inner = self.inner.eval_path(x)?;
        inner
            .iter()
            .enumerate()
            .map(|(k, j1)| {
                let j2 = self.outer.eval(k, &j1.f)?;
                compose_jets(&j2, j1, self.bracket_rate.value(k))
            })
            .collect()
    }
}

/// `Z_t = F_t(Y_t)` with its jet `(Z, Z′, Z″, Ż)`.
pub fn compose_field_path(f: &dyn JetField, scp: &StronglyControlledPath, bracket_rate: &GridPath) -> Result<StronglyControlledPath> {
    let dims = f.dims();
    if f.grid() != scp.grid() || bracket_rate.grid() != scp.grid() {
        return shape_err("field, path and bracket rate live on different grids");
    }
    if scp.value_shape() != [dims.domain] || scp.driver_dim() != dims.driver {
        return shape_err("path values or driver do not match the field");
    }
    let r = dims.rank();
    let n = scp.grid().n_nodes();
    let parts: Vec<[Tensor; 4]> = (0..n)
        .into_par_iter()
        .map(|k| {
            let y = scp.y.value(k);
            let yp = scp.yp.value(k);
            let jet = f.eval(k, y)?;
            let dfy = |t: &Tensor| jet.df.compose(t);
            let t = jet.dfp.map_axis(r, yp)?;
            let hess = jet.d2f.map_axis(r, yp)?.map_axis(r + 1, yp)?;
            let z = jet.f.clone();
            let zp = &jet.fp + &dfy(yp)?;
            let zpp = &(&(&(&jet.fpp + &t) + &t.transpose_last2()) + &hess) + &dfy(scp.ypp.value(k))?;
            let corr = &hess.scale(0.5) + &t;
            let zdot = &(&jet.fdot + &dfy(scp.ydot.value(k))?) + &corr.contract(bracket_rate.value(k), 2)?;
            Ok([z, zp, zpp, zdot])
        })
        .collect::<Result<_>>()?;
    let g = *scp.grid();
    let mut cols: [Vec<Tensor>; 4] = Default::default();
    for p in parts {
        for (c, t) in cols.iter_mut().zip(p) {
            c.push(t);
        }
    }
    let [z, zp, zpp, zdot] = cols;
    StronglyControlledPath::new(GridPath::new(g, z)?, GridPath::new(g, zp)?, GridPath::new(g, zpp)?, GridPath::new(g, zdot)?)
}

/// Converts between left-point and right-point expansions:
/// `(Y, −Y′, (Y″)^⊤, −Ẏ)`.
///
/// Exact for weakly geometric drivers. For a driver with bracket rate `ḃ`
/// pass `Some(ḃ)`; the drift then becomes `−Ẏ + Y″:ḃ`. Both forms are
/// involutions.
pub fn reverse_orientation(scp: &StronglyControlledPath, bracket_rate: Option<&GridPath>) -> Result<StronglyControlledPath> {
    let ypp_t = scp.ypp.map(|_, v| v.transpose_last2())?;
    let ydot = match bracket_rate {
        None => scp.ydot.scale(-1.0),
        Some(b) => {
            if b.grid() != scp.grid() || b.shape() != [scp.driver_dim(), scp.driver_dim()] {
                return shape_err("bracket rate does not match the path");
            }
            scp.ydot.map(|k, v| {
                let c = scp.ypp.value(k).contract(b.value(k), 2).expect("checked shapes");
                &c - v
            })?
        }
    };
    StronglyControlledPath::new(scp.y.clone(), scp.yp.scale(-1.0), ypp_t, ydot)
}

/// Axis-aligned box in `R^n` sampled on a uniform lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Default lattice points per axis for criterion checks.
pub const DEFAULT_RESOLUTION: usize = 21;

impl SampleBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() || lo.iter().zip(&hi).any(|(a, b)| a > b || a.is_nan() || b.is_nan()) {
            return Err(Error::Invalid("sample box needs matching bounds with lo <= hi".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn cube(n: usize, lo: f64, hi: f64) -> Self {
        Self { lo: vec![lo; n], hi: vec![hi; n] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Row-major lattice with `resolution` points per axis.
    pub fn lattice(&self, resolution: usize) -> Vec<Tensor> {
        let n = self.dim();
        let r = resolution.max(1);
        let total = r.pow(n as u32);
        (0..total)
            .map(|mut idx| {
                let mut p = vec![0.0; n];
                for a in (0..n).rev() {
                    let i = idx % r;
                    idx /= r;
                    p[a] = if r == 1 {
                        0.5 * (self.lo[a] + self.hi[a])
                    } else {
                        self.lo[a] + (self.hi[a] - self.lo[a]) * i as f64 / (r - 1) as f64
                    };
                }
                Tensor::vector(p)
            })
            .collect()
    }
}

/// Spatial residuals at frozen times (`[𝓕]_x`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SpatialResiduals {
    /// `[F, ∂F, ∂²F]_{Lip³}`.
    pub lip3: f64,
    /// `[F′, ∂F′]_{Lip²}`.
    pub lip2: f64,
    /// `[F″]_{Lip¹}`.
    pub lip1_fpp: f64,
    /// `[Ḟ]_{Lip¹}`.
    pub lip1_fdot: f64,
}

/// Temporal residuals at frozen points (`[𝓕]_t`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TemporalResiduals {
    /// `[F, F′, F″, Ḟ]_{X;3}`.
    pub strong: f64,
    /// `[∂F, (∂F′)^⊤]_{X;2}`.
    pub controlled: f64,
    /// `‖∂²F‖_α`.
    pub hessian_holder: f64,
}

/// Mixed space-time cascade residuals, normalized by powers of
/// `|t; x|_s = max(|t|^α, |x|)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CascadeTable {
    pub order3_f: f64,
    pub order2_fp: f64,
    pub order2_df: f64,
    pub order1_fpp: f64,
    pub order1_dfp: f64,
    pub order1_d2f: f64,
    pub order1_fdot: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JetSeminorms {
    pub x_part: f64,
    pub t_part: f64,
    pub spatial: SpatialResiduals,
    pub temporal: TemporalResiduals,
    pub cascade: CascadeTable,
    pub lattice_points: usize,
    pub time_nodes: usize,
}

impl JetSeminorms {
    pub fn total(&self) -> f64 {
        self.x_part + self.t_part
    }

    pub fn all_nonnegative(&self) -> bool {
        let c = &self.cascade;
        [
            self.x_part,
            self.t_part,
            c.order3_f,
            c.order2_fp,
            c.order2_df,
            c.order1_fpp,
            c.order1_dfp,
            c.order1_d2f,
            c.order1_fdot,
        ]
        .iter()
        .all(|v| *v >= 0.0)
    }
}

/// Options for [`field_criterion`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriterionOptions {
    pub resolution: usize,
    pub min_gap: usize,
    /// Maximal number of time nodes used for temporal sups.
    pub max_time_nodes: usize,
    /// Lattice points and time nodes per axis for the mixed cascade audit.
    pub cascade_points: usize,
}

impl Default for CriterionOptions {
    fn default() -> Self {
        Self { resolution: DEFAULT_RESOLUTION, min_gap: 1, max_time_nodes: 129, cascade_points: 7 }
    }
}

fn spatial_pair(j0: &Jet, j1: &Jet, dx: &Tensor) -> Result<SpatialResiduals> {
    let h = dx.norm();
    if h == 0.0 {
        return Ok(SpatialResiduals::default());
    }
    let hess_dx = j0.d2f.contract(dx, 1)?;
    let mut r0 = &j1.f - &j0.f;
    r0 -= &j0.df.contract(dx, 1)?;
    r0.axpy(-0.5, &hess_dx.contract(dx, 1)?);
    let r1 = &(&j1.df - &j0.df) - &hess_dx;
    let r2 = &j1.d2f - &j0.d2f;
    let rp0 = &(&j1.fp - &j0.fp) - &first_slot(&j0.dfp, dx)?;
    let rp1 = &j1.dfp - &j0.dfp;
    Ok(SpatialResiduals {
        lip3: r0.norm() / h.powi(3) + r1.norm() / (h * h) + r2.norm() / h,
        lip2: rp0.norm() / (h * h) + rp1.norm() / h,
        lip1_fpp: (&j1.fpp - &j0.fpp).norm() / h,
        lip1_fdot: (&j1.fdot - &j0.fdot).norm() / h,
    })
}

fn max_spatial(a: SpatialResiduals, b: SpatialResiduals) -> SpatialResiduals {
    SpatialResiduals {
        lip3: a.lip3.max(b.lip3),
        lip2: a.lip2.max(b.lip2),
        lip1_fpp: a.lip1_fpp.max(b.lip1_fpp),
        lip1_fdot: a.lip1_fdot.max(b.lip1_fdot),
    }
}

fn temporal_point(path: &[Jet], nodes: &[usize], rx: &RoughPath, min_gap: usize) -> Result<TemporalResiduals> {
    let g = rx.grid();
    let a = rx.alpha();
    let mut out = TemporalResiduals::default();
    for (ia, &i) in nodes.iter().enumerate() {
        let areas = rx.area().row(i);
        for &j in &nodes[ia + 1..] {
            if j - i < min_gap {
                continue;
            }
            let h = g.span(i, j);
            let dx = rx.increment(i, j);
            let (j0, j1) = (&path[i], &path[j]);
            let mut r3 = &j1.f - &j0.f;
            r3 -= &j0.fp.contract(&dx, 1)?;
            r3 -= &j0.fpp.contract(&areas[j - i - 1], 2)?;
            r3.axpy(-h, &j0.fdot);
            let rp = &(&j1.fp - &j0.fp) - &first_slot(&j0.fpp, &dx)?;
            let strong = r3.norm() / h.powf(3.0 * a)
                + rp.norm() / h.powf(2.0 * a)
                + (&j1.fpp - &j0.fpp).norm() / h.powf(a)
                + (&j1.fdot - &j0.fdot).norm() / h.powf(a);
            let rd = &(&j1.df - &j0.df) - &j0.dfp.contract(&dx, 1)?;
            let controlled = rd.norm() / h.powf(2.0 * a) + (&j1.dfp - &j0.dfp).norm() / h.powf(a);
            out.strong = out.strong.max(strong);
            out.controlled = out.controlled.max(controlled);
            out.hessian_holder = out.hessian_holder.max((&j1.d2f - &j0.d2f).norm() / h.powf(a));
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cascade_pair(
    j0: &Jet,
    j1: &Jet,
    dx_t: &Tensor,
    area: &Tensor,
    dt: f64,
    dx_s: &Tensor,
    alpha: f64,
    table: &mut CascadeTable,
) -> Result<()> {
    let dist = dt.powf(alpha).max(dx_s.norm());
    if dist == 0.0 {
        return Ok(());
    }
    let mixed = j0.dfp.contract(&dx_s.outer(dx_t), 2)?;
    let hess_dx = j0.d2f.contract(dx_s, 1)?;
    let mut r3 = &j1.f - &j0.f;
    r3 -= &j0.fp.contract(dx_t, 1)?;
    r3 -= &j0.df.contract(dx_s, 1)?;
    r3 -= &j0.fpp.contract(area, 2)?;
    r3 -= &mixed;
    r3.axpy(-0.5, &hess_dx.contract(dx_s, 1)?);
    r3.axpy(-dt, &j0.fdot);
    let rp = &(&(&j1.fp - &j0.fp) - &first_slot(&j0.fpp, dx_t)?) - &first_slot(&j0.dfp, dx_s)?;
    let rd = &(&(&j1.df - &j0.df) - &j0.dfp.contract(dx_t, 1)?) - &hess_dx;
    table.order3_f = table.order3_f.max(r3.norm() / dist.powi(3));
    table.order2_fp = table.order2_fp.max(rp.norm() / dist.powi(2));
    table.order2_df = table.order2_df.max(rd.norm() / dist.powi(2));
    table.order1_fpp = table.order1_fpp.max((&j1.fpp - &j0.fpp).norm() / dist);
    table.order1_dfp = table.order1_dfp.max((&j1.dfp - &j0.dfp).norm() / dist);
    table.order1_d2f = table.order1_d2f.max((&j1.d2f - &j0.d2f).norm() / dist);
    table.order1_fdot = table.order1_fdot.max((&j1.fdot - &j0.fdot).norm() / dist);
    Ok(())
}

fn evenly(total: usize, count: usize) -> Vec<usize> {
    if count >= total {
        return (0..total).collect();
    }
    let mut v: Vec<usize> = (0..count).map(|i| i * (total - 1) / (count - 1).max(1)).collect();
    v.dedup();
    v
}

/// Jet-criterion seminorms `[𝓕]_x` and `[𝓕]_t` sampled on a lattice of `bx`,
/// plus the mixed cascade audit. Sampled sups are lower bounds of the true
/// seminorms.
pub fn field_criterion(f: &dyn JetField, rx: &RoughPath, bx: &SampleBox, opts: &CriterionOptions) -> Result<JetSeminorms> {
    let dims = f.dims().clone();
    if rx.grid() != f.grid() || rx.dim() != dims.driver {
        return shape_err("field and rough path disagree on grid or driver dimension");
    }
    if bx.dim() != dims.domain {
        return shape_err(format!("sample box has dimension {}, field domain is {}", bx.dim(), dims.domain));
    }
    if opts.min_gap == 0 {
        return Err(Error::Invalid("min_gap must be at least 1".into()));
    }
    let g = *rx.grid();
    let nodes = evenly(g.n_nodes(), opts.max_time_nodes.max(2));
    let points = bx.lattice(opts.resolution);
    let paths: Vec<Vec<Jet>> = points.par_iter().map(|x| f.eval_path(x)).collect::<Result<_>>()?;
    for p in &paths {
        for j in p {
            if !j.is_finite() {
                return Err(Error::Invalid("field evaluation is not finite".into()));
            }
        }
    }

    let spatial = nodes
        .par_iter()
        .map(|&k| {
            let mut best = SpatialResiduals::default();
            for a in 0..points.len() {
                for b in 0..points.len() {
                    if a == b {
                        continue;
                    }
                    let dx = &points[b] - &points[a];
                    best = max_spatial(best, spatial_pair(&paths[a][k], &paths[b][k], &dx)?);
                }
            }
            Ok(best)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(SpatialResiduals::default(), max_spatial);

    let temporal = paths
        .par_iter()
        .map(|p| temporal_point(p, &nodes, rx, opts.min_gap))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(TemporalResiduals::default(), |a, b| TemporalResiduals {
            strong: a.strong.max(b.strong),
            controlled: a.controlled.max(b.controlled),
            hessian_holder: a.hessian_holder.max(b.hessian_holder),
        });

    let sub_points = evenly(points.len(), opts.cascade_points.pow(dims.domain as u32).max(2));
    let sub_nodes: Vec<usize> = evenly(nodes.len(), opts.cascade_points.max(2)).into_iter().map(|i| nodes[i]).collect();
    let mut cascade = CascadeTable::default();
    for (ia, &i) in sub_nodes.iter().enumerate() {
        let areas = rx.area().row(i);
        for &j in &sub_nodes[ia + 1..] {
            let dx_t = rx.increment(i, j);
            let area = &areas[j - i - 1];
            let dt = g.span(i, j);
            for &pa in &sub_points {
                for &pb in &sub_points {
                    let dx_s = &points[pb] - &points[pa];
                    cascade_pair(&paths[pa][i], &paths[pb][j], &dx_t, area, dt, &dx_s, rx.alpha(), &mut cascade)?;
                }
            }
        }
    }

    Ok(JetSeminorms {
        x_part: spatial.lip3 + spatial.lip2 + spatial.lip1_fpp + spatial.lip1_fdot,
        t_part: temporal.strong + temporal.controlled + temporal.hessian_holder,
        spatial,
        temporal,
        cascade,
        lattice_points: points.len(),
        time_nodes: nodes.len(),
    })
}

/// Finite-difference consistency of a field's spatial derivatives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    /// `max |∂F − D_h F|`.
    pub df_dev: f64,
    /// `max |∂²F − D_h ∂F|`.
    pub d2f_dev: f64,
    /// `max |∂F′ − D_h F′|`.
    pub dfp_dev: f64,
    /// `max |∂²F(u⊗v) − ∂²F(v⊗u)|`.
    pub symmetry_defect: f64,
    /// First-order residual `|δ(∂F) − (∂F′)^⊤δX| / Δ^{2α}` over consecutive
    /// steps, when a driver is supplied.
    pub commute_residual: Option<f64>,
}

/// Central-difference check of `∂F`, `∂²F` and `∂F′` on the lattice of `bx`
/// at every `time_stride`-th node.
pub fn fd_jet_check(
    f: &dyn JetField,
    bx: &SampleBox,
    h: f64,
    resolution: usize,
    rx: Option<&RoughPath>,
) -> Result<FdReport> {
    let dims = f.dims().clone();
    if bx.dim() != dims.domain {
        return shape_err("sample box dimension does not match the field");
    }
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Invalid("finite-difference step must be positive".into()));
    }
    let g = *f.grid();
    let nodes = evenly(g.n_nodes(), 9);
    let points = bx.lattice(resolution);
    let per_point: Vec<FdReport> = points
        .par_iter()
        .map(|x| {
            let mut rep = FdReport::default();
            for &k in &nodes {
                let j = f.eval(k, x)?;
                rep.symmetry_defect = rep.symmetry_defect.max(j.d2f.asymmetry());
                for w in 0..dims.domain {
                    let mut xp = x.clone();
                    xp.data_mut()[w] += h;
                    let mut xm = x.clone();
                    xm.data_mut()[w] -= h;
                    let (jp, jm) = (f.eval(k, &xp)?, f.eval(k, &xm)?);
                    let s = 0.5 / h;
                    let fd_f = (&jp.f - &jm.f).scale(s);
                    let fd_df = (&jp.df - &jm.df).scale(s);
                    let fd_fp = (&jp.fp - &jm.fp).scale(s);
                    rep.df_dev = rep.df_dev.max((&fd_f - &slice_last(&j.df, w)).max_abs());
                    rep.d2f_dev = rep.d2f_dev.max((&fd_df - &slice_last(&j.d2f, w)).max_abs());
                    let dfp_w = slice_last(&j.dfp.transpose_last2(), w);
                    rep.dfp_dev = rep.dfp_dev.max((&fd_fp - &dfp_w).max_abs());
                }
            }
            if let Some(rx) = rx {
                let path = f.eval_path(x)?;
                let mut worst = 0.0f64;
                for k in 0..g.n_steps() {
                    let r = &(&path[k + 1].df - &path[k].df) - &path[k].dfp.contract(&rx.step(k), 1)?;
                    worst = worst.max(r.norm() / g.dt().powf(2.0 * rx.alpha()));
                }
                rep.commute_residual = Some(worst);
            }
            Ok(rep)
        })
        .collect::<Result<_>>()?;
    Ok(per_point.into_iter().fold(FdReport::default(), |a, b| FdReport {
        df_dev: a.df_dev.max(b.df_dev),
        d2f_dev: a.d2f_dev.max(b.d2f_dev),
        dfp_dev: a.dfp_dev.max(b.dfp_dev),
        symmetry_defect: a.symmetry_defect.max(b.symmetry_defect),
        commute_residual: match (a.commute_residual, b.commute_residual) {
            (Some(p), Some(q)) => Some(p.max(q)),
            (p, q) => p.or(q),
        },
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functions::{RidgeEntry, RidgeMap, ScalarFn};
    use crate::rough_lift::{stratonovich_lift, sample_brownian};

    fn grid() -> TimeGrid {
        TimeGrid::unit(1.0, 16).unwrap()
    }

    fn spatial(map: RidgeMap, d: usize) -> Arc<dyn JetField> {
        Arc::new(SpatialField::new(grid(), d, Arc::new(map)))
    }

    /// A genuinely time-dependent field on `R^1` with a 1-d driver:
    /// `F_k(x) = sin(x + c_k)` with arbitrary (not necessarily consistent) jets.
    fn wiggly(d: usize) -> Arc<dyn JetField> {
        let dims = JetDims::new(d, 1, vec![1]);
        Arc::new(FnField::new(grid(), dims, move |k, x| {
            let c = 0.1 * k as f64;
            let z = x.item() + c;
            let mut j = Jet::zeros(&JetDims::new(d, 1, vec![1]));
            j.f = Tensor::vector(vec![z.sin()]);
            j.df = Tensor::matrix(1, 1, vec![z.cos()]);
            j.d2f = Tensor::from_fn(&[1, 1, 1], |_| -z.sin());
            j.fp = Tensor::from_fn(&[1, d], |i| (i[1] as f64 + 1.0) * z.cos());
            j.dfp = Tensor::from_fn(&[1, 1, d], |i| -(i[2] as f64 + 1.0) * z.sin());
            j.fpp = Tensor::from_fn(&[1, d, d], |i| (i[1] + 2 * i[2]) as f64 * z.cos() * 0.3);
            j.fdot = Tensor::vector(vec![0.5 * z.cos()]);
            Ok(j)
        }))
    }

    fn rate(d: usize) -> GridPath {
        GridPath::from_fn(grid(), |k, _| Tensor::from_fn(&[d, d], |i| if i[0] == i[1] { 1.0 + 0.01 * k as f64 } else { 0.2 })).unwrap()
    }

    #[test]
    fn identity_is_two_sided_neutral() {
        let d = 2;
        let id: Arc<dyn JetField> = Arc::new(IdentityField::new(grid(), 1, d));
        let f = wiggly(d);
        let left = compose_fields(id.clone(), f.clone(), &rate(d)).unwrap();
        let right = compose_fields(f.clone(), id, &rate(d)).unwrap();
        for k in [0, 5, 16] {
            for &x in &[-0.7, 0.0, 1.3] {
                let p = Tensor::vector(vec![x]);
                let base = f.eval(k, &p).unwrap();
                assert_eq!(left.eval(k, &p).unwrap(), base);
                assert_eq!(right.eval(k, &p).unwrap(), base);
            }
        }
    }

    #[test]
    fn chain_rule_for_time_independent_maps() {
        let g = spatial(RidgeMap::scalar(ScalarFn::sin()), 1);
        let f = spatial(RidgeMap::scalar(ScalarFn::exp()), 1);
        let c = compose_fields(f, g, &GridPath::zeros(grid(), &[1, 1])).unwrap();
        for i in 0..10 {
            let x = -2.0 + 0.4 * i as f64;
            let j = c.eval(3, &Tensor::vector(vec![x])).unwrap();
            let e = x.sin().exp();
            let d1 = e * x.cos();
            let d2 = e * (x.cos().powi(2) - x.sin());
            assert!((j.f.item() - e).abs() <= 1e-10 * e.abs());
            assert!((j.df.data()[0] - d1).abs() <= 1e-10 * d1.abs().max(1e-300));
            assert!((j.d2f.data()[0] - d2).abs() <= 1e-10 * d2.abs().max(1e-12));
            assert_eq!(j.fp.max_abs() + j.fpp.max_abs() + j.dfp.max_abs() + j.fdot.max_abs(), 0.0);
        }
    }

    #[test]
    fn compose_field_path_matches_path_embedding_exactly() {
        let d = 2;
        let f = wiggly(d);
        let g = grid();
        let scp = StronglyControlledPath::new(
            GridPath::from_fn(g, |_, t| Tensor::vector(vec![t.sin()])).unwrap(),
            GridPath::from_fn(g, |_, t| Tensor::matrix(1, d, vec![t, 1.0 - t])).unwrap(),
            GridPath::from_fn(g, |_, t| Tensor::from_fn(&[1, d, d], |i| t * (i[1] as f64 - i[2] as f64 + 0.5))).unwrap(),
            GridPath::from_fn(g, |_, t| Tensor::vector(vec![t * t])).unwrap(),
        )
        .unwrap();
        let b = rate(d);
        let direct = compose_field_path(f.as_ref(), &scp, &b).unwrap();
        let embedded = compose_fields(f, Arc::new(path_as_field(&scp, 1)), &b).unwrap();
        for k in 0..=g.n_steps() {
            let j = embedded.eval(k, &Tensor::vector(vec![0.0])).unwrap();
            assert_eq!(&j.f, direct.y().value(k));
            assert_eq!(&j.fp, direct.yp().value(k));
            assert_eq!(&j.fpp, direct.ypp().value(k));
            assert_eq!(&j.fdot, direct.ydot().value(k));
        }
    }

    #[test]
    fn compose_field_path_with_identity_returns_input() {
        let g = grid();
        let scp = StronglyControlledPath::new(
            GridPath::from_fn(g, |_, t| Tensor::vector(vec![t, -t])).unwrap(),
            GridPath::from_fn(g, |_, t| Tensor::matrix(2, 1, vec![t, 2.0])).unwrap(),
            GridPath::from_fn(g, |_, t| Tensor::from_fn(&[2, 1, 1], |_| t)).unwrap(),
            GridPath::from_fn(g, |_, t| Tensor::vector(vec![1.0, t])).unwrap(),
        )
        .unwrap();
        let id = IdentityField::new(g, 2, 1);
        let out = compose_field_path(&id, &scp, &GridPath::zeros(g, &[1, 1])).unwrap();
        assert_eq!(out, scp);
    }

    #[test]
    fn reverse_orientation_is_an_involution() {
        let g = grid();
        let scp = StronglyControlledPath::new(
            GridPath::from_fn(g, |_, t| Tensor::vector(vec![t])).unwrap(),
            GridPath::from_fn(g, |_, t| Tensor::matrix(1, 2, vec![t, 2.0])).unwrap(),
            GridPath::from_fn(g, |_, t| Tensor::from_fn(&[1, 2, 2], |i| t + i[1] as f64 - 3.0 * i[2] as f64)).unwrap(),
            GridPath::from_fn(g, |_, t| Tensor::vector(vec![t * t])).unwrap(),
        )
        .unwrap();
        let twice = reverse_orientation(&reverse_orientation(&scp, None).unwrap(), None).unwrap();
        assert_eq!(twice, scp);
        let b = rate(2);
        let twice = reverse_orientation(&reverse_orientation(&scp, Some(&b)).unwrap(), Some(&b)).unwrap();
        assert!(twice.max_diff(&scp).unwrap() < 1e-14);
        let z = StronglyControlledPath::zeros(g, &[1], 2);
        assert_eq!(reverse_orientation(&z, None).unwrap().max_diff(&z).unwrap(), 0.0);
    }

    #[test]
    fn remainder_2_trivial_cases() {
        let g = TimeGrid::unit(1.0, 64).unwrap();
        let w = sample_brownian(g, 1, 3).unwrap();
        let rx = stratonovich_lift(&w, 4, 3).unwrap();
        let cp = ControlledPath::new(w.clone(), GridPath::constant(g, Tensor::identity(1))).unwrap();
        assert_eq!(remainder_2(&cp, &rx, 1).unwrap(), 0.0);
        let cp0 = ControlledPath::new(w.clone(), GridPath::zeros(g, &[1, 1])).unwrap();
        let h = crate::grid_paths::holder_seminorm(&w, 2.0 * rx.alpha(), 1).unwrap();
        assert!((remainder_2(&cp0, &rx, 1).unwrap() - h).abs() <= 1e-12 * h);
    }

    #[test]
    fn remainder_3_of_cubic_against_trivial_driver() {
        let g = TimeGrid::unit(1.0, 64).unwrap();
        let rx = RoughPath::zero(g, 1);
        let y = GridPath::from_fn(g, |_, t| Tensor::vector(vec![t.powi(3)])).unwrap();
        let ydot = GridPath::from_fn(g, |_, t| Tensor::vector(vec![3.0 * t * t])).unwrap();
        let scp = StronglyControlledPath::new(y, GridPath::zeros(g, &[1, 1]), GridPath::zeros(g, &[1, 1, 1]), ydot).unwrap();
        // |t³ − s³ − 3s²h| = h²(3s + h) ≤ 4h², so the 3α-remainder is at most 4 h^{2−3α} ≤ 4.
        let r = remainder_3(&scp, &rx, 1).unwrap();
        assert!(r > 0.0 && r <= 4.0, "{r}");
        let zero = StronglyControlledPath::zeros(g, &[2], 1);
        assert_eq!(remainder_3(&zero, &rx, 1).unwrap(), 0.0);
    }

    #[test]
    fn criterion_of_constant_field_vanishes() {
        let g = TimeGrid::unit(1.0, 16).unwrap();
        let rx = stratonovich_lift(&sample_brownian(g, 1, 9).unwrap(), 4, 9).unwrap();
        let f = ConstantField::new(g, 1, 1, Tensor::vector(vec![2.5]));
        let s = field_criterion(&f, &rx, &SampleBox::cube(1, -1.0, 1.0), &CriterionOptions::default()).unwrap();
        assert_eq!(s.total(), 0.0);
        assert_eq!(s.cascade, CascadeTable::default());
    }

    #[test]
    fn criterion_of_sine_is_purely_spatial() {
        let g = TimeGrid::unit(1.0, 16).unwrap();
        let rx = stratonovich_lift(&sample_brownian(g, 1, 9).unwrap(), 4, 9).unwrap();
        let f = SpatialField::new(g, 1, Arc::new(RidgeMap::scalar(ScalarFn::sin())));
        let s = field_criterion(&f, &rx, &SampleBox::cube(1, -1.0, 1.0), &CriterionOptions::default()).unwrap();
        assert_eq!(s.t_part, 0.0);
        // Taylor: |R0| ≤ |h|³/6, |R1| ≤ h²/2, |R2| ≤ |h|.
        assert!(s.spatial.lip3 > 0.0 && s.spatial.lip3 <= 1.0 / 6.0 + 0.5 + 1.0 + 1e-12);
        assert_eq!(s.spatial.lip2, 0.0);
        assert!(s.all_nonnegative());
    }

    #[test]
    fn embedded_path_has_no_spatial_part() {
        let g = TimeGrid::unit(1.0, 16).unwrap();
        let w = sample_brownian(g, 1, 2).unwrap();
        let rx = stratonovich_lift(&w, 4, 2).unwrap();
        let scp = StronglyControlledPath::new(
            w.clone(),
            GridPath::constant(g, Tensor::identity(1)),
            GridPath::zeros(g, &[1, 1, 1]),
            GridPath::zeros(g, &[1]),
        )
        .unwrap();
        let f = path_as_field(&scp, 2);
        let opts = CriterionOptions { resolution: 5, ..Default::default() };
        let s = field_criterion(&f, &rx, &SampleBox::cube(2, -1.0, 1.0), &opts).unwrap();
        assert_eq!(s.x_part, 0.0);
        let zero = path_as_field(&StronglyControlledPath::zeros(g, &[1], 1), 1);
        assert_eq!(zero.eval(4, &Tensor::vector(vec![0.3])).unwrap(), Jet::zeros(zero.dims()));
    }

    fn quadratic_field() -> FnField {
        // F(x) = (x0² + x0 x1, x1²), F′(x)[·, v] = x_v e_0, Ḟ = 0.
        let dims = JetDims::new(2, 2, vec![2]);
        FnField::new(grid(), dims.clone(), move |_, x| {
            let (a, b) = (x.data()[0], x.data()[1]);
            let mut j = Jet::zeros(&dims);
            j.f = Tensor::vector(vec![a * a + a * b, b * b]);
            j.df = Tensor::matrix(2, 2, vec![2.0 * a + b, a, 0.0, 2.0 * b]);
            j.d2f = Tensor::new(vec![2, 2, 2], vec![2.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
            j.fp = Tensor::matrix(2, 2, vec![a * a, b * b, 0.0, 0.0]);
            j.dfp = Tensor::new(vec![2, 2, 2], vec![2.0 * a, 0.0, 0.0, 2.0 * b, 0.0, 0.0, 0.0, 0.0]).unwrap();
            Ok(j)
        })
    }

    #[test]
    fn fd_check_is_second_order_and_exact_for_quadratics() {
        let f = quadratic_field();
        let bx = SampleBox::cube(2, -1.0, 1.0);
        let r = fd_jet_check(&f, &bx, 1e-3, 5, None).unwrap();
        assert!(r.df_dev < 1e-9 && r.d2f_dev < 1e-9 && r.dfp_dev < 1e-9);
        assert_eq!(r.symmetry_defect, 0.0);

        let s = SpatialField::new(grid(), 1, Arc::new(RidgeMap::scalar(ScalarFn::sin())));
        let bx1 = SampleBox::cube(1, -1.0, 1.0);
        let e1 = fd_jet_check(&s, &bx1, 1e-2, 7, None).unwrap().df_dev;
        let e2 = fd_jet_check(&s, &bx1, 5e-3, 7, None).unwrap().df_dev;
        let order = (e1 / e2).log2();
        assert!((order - 2.0).abs() < 0.05, "{order}");

        let c = ConstantField::new(grid(), 1, 1, Tensor::vector(vec![1.0]));
        assert_eq!(fd_jet_check(&c, &bx1, 1e-3, 5, None).unwrap(), FdReport::default());
    }

    #[test]
    fn fd_check_detects_injected_error() {
        let base = Arc::new(quadratic_field());
        let dims = base.dims().clone();
        let wrong = FnField::new(grid(), dims, move |k, x| {
            let mut j = base.eval(k, x)?;
            j.df.data_mut()[1] += 0.25;
            Ok(j)
        });
        let r = fd_jet_check(&wrong, &SampleBox::cube(2, -1.0, 1.0), 1e-3, 3, None).unwrap();
        assert!(r.df_dev >= 0.25 - 1e-9);
    }

    fn random_ridge(seed: u64, n_in: usize, n_out: usize) -> RidgeMap {
        let mut s = seed;
        let mut next = move || {
            s = crate::rng::derive_seed(s, &[1]);
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        let entries = (0..n_out)
            .map(|_| RidgeEntry {
                a: (0..n_in).map(|_| next()).collect(),
                b: next(),
                phi: ScalarFn::Sin { amp: 1.0 + next(), freq: 1.0 + 0.5 * next(), phase: next(), offset: next() },
            })
            .collect();
        RidgeMap::new(n_in, vec![n_out], entries).unwrap()
    }

    /// A time-dependent field built by composing with a path embedding plus
    /// a spatial shift, so all seven components are nonzero.
    fn rich_field(seed: u64, d: usize) -> Arc<dyn JetField> {
        let g = grid();
        let m = Arc::new(random_ridge(seed, 2, 2));
        let dims = JetDims::new(d, 2, vec![2]);
        Arc::new(FnField::new(g, dims.clone(), move |k, x| {
            let t = g.time(k);
            let shift = Tensor::vector(vec![(1.0 + t).ln(), t * t]);
            let dv = m.derivs(&(x + &shift), 2)?;
            let mut j = Jet::zeros(&dims);
            j.f = dv[0].clone();
            j.df = dv[1].clone();
            j.d2f = dv[2].clone();
            j.fp = Tensor::from_fn(&[2, d], |i| dv[1].at(&[i[0], i[1] % 2]) * (1.0 + t));
            j.dfp = Tensor::from_fn(&[2, 2, d], |i| dv[2].at(&[i[0], i[2] % 2, i[1]]) * (1.0 + t));
            j.fpp = Tensor::from_fn(&[2, d, d], |i| dv[0].at(&[i[0]]) * (i[1] as f64 - 0.5 * i[2] as f64));
            j.fdot = &dv[0] * t;
            Ok(j)
        }))
    }

    #[test]
    fn associativity_on_rich_fields() {
        let d = 2;
        let b = rate(d);
        let (f1, f2, f3) = (rich_field(1, d), rich_field(2, d), rich_field(3, d));
        let left = compose_fields(Arc::new(compose_fields(f3.clone(), f2.clone(), &b).unwrap()), f1.clone(), &b).unwrap();
        let right = compose_fields(f3, Arc::new(compose_fields(f2, f1, &b).unwrap()), &b).unwrap();
        for k in [0, 7, 16] {
            for p in [[0.1, -0.3], [0.8, 0.5], [-1.0, 0.0]] {
                let x = Tensor::vector(p.to_vec());
                let (a, c) = (left.eval(k, &x).unwrap(), right.eval(k, &x).unwrap());
                let scale = a.components().iter().map(|t| t.max_abs()).fold(1.0, f64::max);
                assert!(a.max_diff(&c) <= 1e-9 * scale, "{}", a.max_diff(&c));
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn composition_is_associative(s1 in 0u64..1000, s2 in 0u64..1000, s3 in 0u64..1000,
                                          k in 0usize..=16, x0 in -1.5f64..1.5, x1 in -1.5f64..1.5) {
                let d = 2;
                let b = rate(d);
                let (f1, f2, f3) = (rich_field(s1, d), rich_field(s2, d), rich_field(s3, d));
                let left = compose_fields(Arc::new(compose_fields(f3.clone(), f2.clone(), &b).unwrap()), f1.clone(), &b).unwrap();
                let right = compose_fields(f3, Arc::new(compose_fields(f2, f1, &b).unwrap()), &b).unwrap();
                let x = Tensor::vector(vec![x0, x1]);
                let (a, c) = (left.eval(k, &x).unwrap(), right.eval(k, &x).unwrap());
                let scale = a.components().iter().map(|t| t.max_abs()).fold(1.0, f64::max);
                prop_assert!(a.max_diff(&c) <= 1e-9 * scale);
            }

            #[test]
            fn identity_is_neutral(s in 0u64..1000, k in 0usize..=16, x0 in -2.0f64..2.0, x1 in -2.0f64..2.0) {
                let d = 2;
                let b = rate(d);
                let f = rich_field(s, d);
                let id: Arc<dyn JetField> = Arc::new(IdentityField::new(grid(), 2, d));
                let x = Tensor::vector(vec![x0, x1]);
                let base = f.eval(k, &x).unwrap();
                prop_assert_eq!(compose_fields(id.clone(), f.clone(), &b).unwrap().eval(k, &x).unwrap(), base.clone());
                prop_assert_eq!(compose_fields(f, id, &b).unwrap().eval(k, &x).unwrap(), base);
            }

            #[test]
            fn composed_hessian_is_symmetric(s1 in 0u64..1000, s2 in 0u64..1000, x0 in -2.0f64..2.0, x1 in -2.0f64..2.0) {
                let d = 1;
                let b = rate(d);
                let c = compose_fields(rich_field(s2, d), rich_field(s1, d), &b).unwrap();
                let j = c.eval(3, &Tensor::vector(vec![x0, x1])).unwrap();
                prop_assert!(j.d2f.asymmetry() <= 1e-13 * j.d2f.max_abs().max(1.0));
            }
        }
    }
}
