//! Rough paths, Brownian lifts, martingale samples and joint lifts.
//!
//! Area convention: `𝕏^{ij}_{s,t} ≈ ∫_s^t δX^i_{s,r} dX^j_r`, i.e. the first
//! tensor factor is the running increment and the second the integrator.
//! Brownian areas are left-point (Itô) or trapezoidal (Stratonovich) sums on
//! a Brownian-bridge refinement of the working grid:
//!
//! ```text
//! Itô:    𝕎_{s,t} = Σ_m δW_{s,r_m} ⊗ δW_{r_m,r_{m+1}}
//! Strat:  𝕎_{s,t} = Σ_m (δW_{s,r_m} + ½δW_{r_m,r_{m+1}}) ⊗ δW_{r_m,r_{m+1}}
//! ```
//!
//! The joint lift of `𝐗` with a martingale `M` has base `(X; M)` and area
//! blocks `[[𝕏, Π(X;M)], [Π(M;X), 𝕄]]` where on the grid `Π(X;M)` and `𝕄`
//! are left-point sums and `Π(M;X) = δM⊗δX − Π(X;M)^⊤`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::grid_paths::{ChenRule, GridPath, TimeGrid, TwoParamGrid};
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.4;
pub const DEFAULT_REFINE: usize = 16;
pub const CONVENTION_VERSION: u32 = 1;

const TAG_BROWNIAN: u64 = 0x4252_4f57;
const TAG_BRIDGE: u64 = 0x4252_4944;
const TAG_LIFT: u64 = 0x4c49_4654;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LiftKind {
    Ito,
    Stratonovich,
}

/// `𝐗 = (X, 𝕏)` on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RoughPath {
    alpha: f64,
    base: GridPath,
    area: TwoParamGrid,
}

impl RoughPath {
    /// Wraps a base path and an area. The area may carry any reconstruction
    /// rule; [`chen_defect`] reports how far it is from `chen(X, X)`.
    pub fn new(alpha: f64, base: GridPath, area: TwoParamGrid) -> Result<Self> {
        if !(alpha > 1.0 / 3.0 && alpha <= 0.5) {
            return Err(Error::Invalid(format!("alpha must lie in (1/3, 1/2], got {alpha}")));
        }
        if base.shape().len() != 1 {
            return shape_err("rough path base must be vector valued");
        }
        let d = base.shape()[0];
        if area.shape() != [d, d] || area.grid() != base.grid() {
            return shape_err(format!("area shape {:?} for base dimension {d}", area.shape()));
        }
        Ok(Self { alpha, base, area })
    }

    /// Rough path from consecutive area blocks with the Chen rule `chen(X, X)`.
    pub fn from_blocks(alpha: f64, base: GridPath, blocks: Vec<Tensor>) -> Result<Self> {
        let rule = ChenRule::Chen { left: base.clone(), right: base.clone() };
        let area = TwoParamGrid::new(*base.grid(), blocks, rule)?;
        Self::new(alpha, base, area)
    }

    /// Canonical lift of the piecewise-linear interpolation of `base`.
    pub fn piecewise_linear(alpha: f64, base: GridPath) -> Result<Self> {
        let blocks = (0..base.grid().n_steps())
            .map(|k| {
                let d = base.step(k);
                d.outer(&d).scale(0.5)
            })
            .collect();
        Self::from_blocks(alpha, base, blocks)
    }

    pub fn zero(grid: TimeGrid, dim: usize) -> Self {
        let base = GridPath::zeros(grid, &[dim]);
        Self::from_blocks(DEFAULT_ALPHA, base, vec![Tensor::zeros(&[dim, dim]); grid.n_steps()])
            .expect("zero rough path")
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn with_alpha(self, alpha: f64) -> Result<Self> {
        Self::new(alpha, self.base, self.area)
    }

    pub fn grid(&self) -> &TimeGrid {
        self.base.grid()
    }

    pub fn dim(&self) -> usize {
        self.base.shape()[0]
    }

    pub fn base(&self) -> &GridPath {
        &self.base
    }

    pub fn area(&self) -> &TwoParamGrid {
        &self.area
    }

    pub fn increment(&self, i: usize, j: usize) -> Tensor {
        self.base.value(j) - self.base.value(i)
    }

    pub fn step(&self, k: usize) -> Tensor {
        self.base.step(k)
    }

    /// Consecutive area block `𝕏_{t_k,t_{k+1}}`.
    pub fn area_step(&self, k: usize) -> &Tensor {
        self.area.block(k)
    }

    pub fn area_at(&self, i: usize, j: usize) -> Result<Tensor> {
        self.area.value(i, j)
    }

    /// Restriction to every `factor`-th node (exact via Chen).
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let base = self.base.subsample(factor)?;
        let blocks = (0..base.grid().n_steps())
            .map(|k| self.area.value(k * factor, (k + 1) * factor))
            .collect::<Result<Vec<_>>>()?;
        Self::from_blocks(self.alpha, base, blocks)
    }

    /// `𝐗^τ`: frozen after node `tau`.
    pub fn stopped(&self, tau: usize) -> Result<Self> {
        let base = self.base.stopped(tau);
        let d = self.dim();
        let blocks = (0..self.grid().n_steps())
            .map(|k| if k < tau { self.area.block(k).clone() } else { Tensor::zeros(&[d, d]) })
            .collect();
        Self::from_blocks(self.alpha, base, blocks)
    }

    /// `max |𝕏 + 𝕏^⊤ − δX⊗δX|` on interval `k`; zero for geometric lifts.
    pub fn sym_part_defect(&self, k: usize) -> f64 {
        let d = self.step(k);
        let a = self.area.block(k);
        (&(a + &a.transpose_last2()) - &d.outer(&d)).max_abs()
    }
}

/// `[𝐗]` or `⟨M⟩` with per-interval difference quotients.
#[derive(Debug, Clone, PartialEq)]
pub struct BracketPath {
    path: GridPath,
    rate: GridPath,
    analytic: bool,
}

impl BracketPath {
    /// Builds the running sum of symmetric per-interval increments.
    pub fn from_increments(grid: TimeGrid, increments: Vec<Tensor>, analytic: bool) -> Result<Self> {
        if increments.len() != grid.n_steps() {
            return shape_err("bracket needs one increment per interval");
        }
        let shape = increments[0].shape().to_vec();
        if shape.len() != 2 || shape[0] != shape[1] {
            return shape_err(format!("bracket increments must be square, got {shape:?}"));
        }
        let mut values = Vec::with_capacity(grid.n_nodes());
        let mut acc = Tensor::zeros(&shape);
        values.push(acc.clone());
        for inc in &increments {
            acc += inc;
            values.push(acc.clone());
        }
        let dt = grid.dt();
        let mut rates: Vec<Tensor> = increments.iter().map(|inc| inc.scale(1.0 / dt)).collect();
        rates.push(rates.last().cloned().unwrap_or_else(|| Tensor::zeros(&shape)));
        Ok(Self {
            path: GridPath::new(grid, values)?,
            rate: GridPath::new(grid, rates)?,
            analytic,
        })
    }

    pub fn zero(grid: TimeGrid, dim: usize) -> Self {
        Self::from_increments(grid, vec![Tensor::zeros(&[dim, dim]); grid.n_steps()], true)
            .expect("zero bracket")
    }

    pub fn path(&self) -> &GridPath {
        &self.path
    }

    /// Difference quotients `(B_{k+1} − B_k)/Δ`; the last node repeats the
    /// final interval.
    pub fn rate(&self) -> &GridPath {
        &self.rate
    }

    pub fn rate_at(&self, k: usize) -> &Tensor {
        self.rate.value(k)
    }

    pub fn increment(&self, k: usize) -> Tensor {
        self.path.step(k)
    }

    pub fn is_analytic(&self) -> bool {
        self.analytic
    }

    pub fn dim(&self) -> usize {
        self.path.shape()[0]
    }

    pub fn grid(&self) -> &TimeGrid {
        self.path.grid()
    }

    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let grid = self.grid().coarsen(factor)?;
        let incs = (0..grid.n_steps())
            .map(|k| self.path.value((k + 1) * factor) - self.path.value(k * factor))
            .collect();
        Self::from_increments(grid, incs, self.analytic)
    }

    pub fn stopped(&self, tau: usize) -> Result<Self> {
        let d = self.dim();
        let incs = (0..self.grid().n_steps())
            .map(|k| if k < tau { self.increment(k) } else { Tensor::zeros(&[d, d]) })
            .collect();
        Self::from_increments(*self.grid(), incs, self.analytic)
    }
}

/// A sampled continuous martingale with its bracket.
#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleSample {
    path: GridPath,
    bracket: BracketPath,
}

impl MartingaleSample {
    pub fn new(path: GridPath, bracket: BracketPath) -> Result<Self> {
        if path.shape().len() != 1 || bracket.dim() != path.shape()[0] || bracket.grid() != path.grid() {
            return shape_err("martingale path and bracket do not match");
        }
        Ok(Self { path, bracket })
    }

    /// `M = ∫φ dW` with the analytic bracket `Σ φφ^⊤ Δ`.
    pub fn from_ito(phi: &GridPath, w: &GridPath) -> Result<Self> {
        let path = ito_integral(phi, w)?;
        if path.shape().len() != 1 {
            return shape_err("martingale must be vector valued");
        }
        let dt = w.grid().dt();
        let incs = (0..w.grid().n_steps())
            .map(|k| {
                let p = phi.value(k);
                p.compose(&p.transpose_last2()).map(|q| q.scale(dt))
            })
            .collect::<Result<Vec<_>>>()?;
        let bracket = BracketPath::from_increments(*w.grid(), incs, true)?;
        Self::new(path, bracket)
    }

    /// Martingale with the realized covariation `Σ δM⊗δM` as bracket.
    pub fn realized(path: GridPath) -> Result<Self> {
        if path.shape().len() != 1 {
            return shape_err("martingale must be vector valued");
        }
        let incs = (0..path.grid().n_steps())
            .map(|k| {
                let d = path.step(k);
                d.outer(&d)
            })
            .collect();
        let bracket = BracketPath::from_increments(*path.grid(), incs, false)?;
        Self::new(path, bracket)
    }

    pub fn zero(grid: TimeGrid, dim: usize) -> Self {
        Self { path: GridPath::zeros(grid, &[dim]), bracket: BracketPath::zero(grid, dim) }
    }

    pub fn path(&self) -> &GridPath {
        &self.path
    }

    pub fn bracket(&self) -> &BracketPath {
        &self.bracket
    }

    pub fn dim(&self) -> usize {
        self.path.shape()[0]
    }

    pub fn grid(&self) -> &TimeGrid {
        self.path.grid()
    }

    pub fn stopped(&self, tau: usize) -> Result<Self> {
        Self::new(self.path.stopped(tau), self.bracket.stopped(tau)?)
    }

    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        Self::new(self.path.subsample(factor)?, self.bracket.coarsen(factor)?)
    }

    /// Stacks martingales; diagonal bracket blocks are kept, cross blocks are
    /// realized covariations.
    pub fn stack(ms: &[&MartingaleSample]) -> Result<Self> {
        let paths: Vec<&GridPath> = ms.iter().map(|m| m.path()).collect();
        let path = GridPath::stack(&paths)?;
        let grid = *path.grid();
        let dims: Vec<usize> = ms.iter().map(|m| m.dim()).collect();
        let total: usize = dims.iter().sum();
        let incs = (0..grid.n_steps())
            .map(|k| {
                let mut inc = Tensor::zeros(&[total, total]);
                let mut r = 0;
                for (a, ma) in ms.iter().enumerate() {
                    let mut c = 0;
                    for (b, mb) in ms.iter().enumerate() {
                        let block = if a == b {
                            ma.bracket.increment(k)
                        } else {
                            ma.path.step(k).outer(&mb.path.step(k))
                        };
                        inc.put_block(r, c, &block);
                        c += dims[b];
                    }
                    r += dims[a];
                }
                inc
            })
            .collect();
        let analytic = ms.len() == 1 && ms[0].bracket.is_analytic();
        Self::new(path, BracketPath::from_increments(grid, incs, analytic)?)
    }
}

/// Brownian motion with `W_0 = 0` and i.i.d. `N(0, Δ·Id)` increments.
pub fn sample_brownian(grid: TimeGrid, dim: usize, seed: u64) -> Result<GridPath> {
    if dim == 0 {
        return Err(Error::Invalid("Brownian dimension must be >= 1".into()));
    }
    let mut rng = rng::stream(seed, &[TAG_BROWNIAN, grid.n_steps() as u64, dim as u64]);
    let sd = grid.dt().sqrt();
    let mut values = Vec::with_capacity(grid.n_nodes());
    let mut acc = vec![0.0; dim];
    values.push(Tensor::vector(acc.clone()));
    for _ in 0..grid.n_steps() {
        for (a, z) in acc.iter_mut().zip(rng::normals(&mut rng, dim)) {
            *a += sd * z;
        }
        values.push(Tensor::vector(acc.clone()));
    }
    GridPath::new(grid, values)
}

/// Brownian-bridge refinement of a Brownian sample: every interval is split
/// into `factor` pieces drawn conditionally on its endpoints. Coarse nodes are
/// kept bitwise.
pub fn refine_brownian(w: &GridPath, factor: usize, seed: u64) -> Result<GridPath> {
    if w.shape().len() != 1 {
        return shape_err("refine_brownian expects a vector path");
    }
    let grid = w.grid().refine(factor)?;
    if factor == 1 {
        return Ok(w.clone());
    }
    let dim = w.shape()[0];
    let h = grid.dt();
    let n = w.grid().n_steps();
    let mut values = Vec::with_capacity(grid.n_nodes());
    for k in 0..n {
        let start = w.value(k);
        let total = w.step(k);
        let mut rng = rng::stream(seed, &[TAG_BRIDGE, n as u64, factor as u64, k as u64]);
        let mut pieces: Vec<Vec<f64>> =
            (0..factor).map(|_| rng::normals(&mut rng, dim).iter().map(|z| z * h.sqrt()).collect()).collect();
        for c in 0..dim {
            let s: f64 = pieces.iter().map(|p| p[c]).sum();
            let corr = (total.data()[c] - s) / factor as f64;
            for p in pieces.iter_mut() {
                p[c] += corr;
            }
        }
        let mut acc = start.clone();
        values.push(acc.clone());
        for p in pieces.iter().take(factor - 1) {
            acc += &Tensor::vector(p.clone());
            values.push(acc.clone());
        }
    }
    values.push(w.last().clone());
    GridPath::new(grid, values)
}

/// Lift of a coarse path whose fine samples are given: each coarse area is a
/// left-point (Itô) or trapezoidal (Stratonovich) sum over the `factor` fine
/// steps it contains.
pub fn lift_from_fine(fine: &GridPath, factor: usize, kind: LiftKind, alpha: f64) -> Result<RoughPath> {
    if fine.shape().len() != 1 {
        return shape_err("lift expects a vector path");
    }
    let base = fine.subsample(factor)?;
    let d = fine.shape()[0];
    let c = match kind {
        LiftKind::Ito => 0.0,
        LiftKind::Stratonovich => 0.5,
    };
    let blocks = (0..base.grid().n_steps())
        .map(|k| {
            let start = fine.value(k * factor);
            let mut area = Tensor::zeros(&[d, d]);
            for m in k * factor..(k + 1) * factor {
                let dw = fine.step(m);
                let mut left = fine.value(m) - start;
                left.axpy(c, &dw);
                area += &left.outer(&dw);
            }
            area
        })
        .collect();
    RoughPath::from_blocks(alpha, base, blocks)
}

fn lift(w: &GridPath, refine: usize, seed: u64, kind: LiftKind) -> Result<RoughPath> {
    if refine == 0 {
        return Err(Error::Invalid("refine must be >= 1".into()));
    }
    let fine = refine_brownian(w, refine, rng::derive_seed(seed, &[TAG_LIFT]))?;
    lift_from_fine(&fine, refine, kind, DEFAULT_ALPHA)
}

/// Itô lift with left-point areas on a `refine`-fold bridge refinement.
pub fn ito_lift(w: &GridPath, refine: usize, seed: u64) -> Result<RoughPath> {
    lift(w, refine, seed, LiftKind::Ito)
}

/// Stratonovich lift with trapezoidal areas on a `refine`-fold bridge refinement.
pub fn stratonovich_lift(w: &GridPath, refine: usize, seed: u64) -> Result<RoughPath> {
    lift(w, refine, seed, LiftKind::Stratonovich)
}

/// `[𝐗]_{0,t_k} = Σ_{m<k} (δX⊗δX − 2 Sym 𝕏)_{t_m,t_{m+1}}`.
pub fn bracket(r: &RoughPath) -> BracketPath {
    let incs = (0..r.grid().n_steps())
        .map(|k| {
            let d = r.step(k);
            let a = r.area_step(k);
            let sym2 = a + &a.transpose_last2();
            &d.outer(&d) - &sym2
        })
        .collect();
    BracketPath::from_increments(*r.grid(), incs, false).expect("bracket of a rough path")
}

/// Left-point sums `I_k = Σ_{m<k} φ_m δM_{m,m+1}`.
pub fn ito_integral(phi: &GridPath, m: &GridPath) -> Result<GridPath> {
    if phi.grid() != m.grid() {
        return shape_err("ito_integral on different grids");
    }
    let mut acc: Option<Tensor> = None;
    let mut values = Vec::with_capacity(m.grid().n_nodes());
    for k in 0..m.grid().n_steps() {
        let inc = phi.value(k).apply(&m.step(k))?;
        let cur = acc.get_or_insert_with(|| Tensor::zeros(inc.shape()));
        if values.is_empty() {
            values.push(cur.clone());
        }
        *cur += &inc;
        values.push(cur.clone());
    }
    GridPath::new(*m.grid(), values)
}

/// `Π(X;M)`: left-point Itô iterated integral `∫ δX_{s,r} ⊗ dM_r`.
pub fn ibp_integral_xm(x: &GridPath, m: &GridPath) -> Result<TwoParamGrid> {
    let mut shape = x.shape().to_vec();
    shape.extend_from_slice(m.shape());
    TwoParamGrid::zeros(*x.grid(), &shape, ChenRule::Chen { left: x.clone(), right: m.clone() })
}

/// `Π(M;X)_{s,t} = δM_{s,t}⊗δX_{s,t} − Π(X;M)^⊤_{s,t}`.
pub fn ibp_integral(m: &GridPath, x: &GridPath) -> Result<TwoParamGrid> {
    if m.grid() != x.grid() {
        return shape_err("ibp_integral on different grids");
    }
    let pxm = ibp_integral_xm(x, m)?;
    let blocks = (0..x.grid().n_steps())
        .map(|k| &m.step(k).outer(&x.step(k)) - &pxm.block(k).transpose_last2())
        .collect();
    TwoParamGrid::new(*x.grid(), blocks, ChenRule::Chen { left: m.clone(), right: x.clone() })
}

/// Joint lift `(𝐗; M)` over `V ⊕ R^{d_M}`.
pub fn joint_lift(rx: &RoughPath, m: &MartingaleSample) -> Result<RoughPath> {
    if rx.grid() != m.grid() {
        return shape_err("joint_lift on different grids");
    }
    let (d, dm) = (rx.dim(), m.dim());
    let base = GridPath::stack(&[rx.base(), m.path()])?;
    let pxm = ibp_integral_xm(rx.base(), m.path())?;
    let pmx = ibp_integral(m.path(), rx.base())?;
    let blocks = (0..rx.grid().n_steps())
        .map(|k| {
            let mut a = Tensor::zeros(&[d + dm, d + dm]);
            a.put_block(0, 0, rx.area_step(k));
            a.put_block(0, d, pxm.block(k));
            a.put_block(d, 0, pmx.block(k));
            // 𝕄 on one grid step is the left-point sum δM_{s,s}⊗δM = 0.
            a
        })
        .collect();
    RoughPath::from_blocks(rx.alpha(), base, blocks)
}

/// `(𝐗; M_1; …; M_k)` via the stacked martingale.
pub fn multi_joint_lift(rx: &RoughPath, ms: &[&MartingaleSample]) -> Result<RoughPath> {
    if ms.is_empty() {
        return Ok(rx.clone());
    }
    let stacked = MartingaleSample::stack(ms)?;
    joint_lift(rx, &stacked)
}

fn even_nodes(n: usize, count: usize) -> Vec<usize> {
    let count = count.clamp(2, n + 1);
    let mut nodes: Vec<usize> = (0..count).map(|i| (i * n + (count - 1) / 2) / (count - 1)).collect();
    nodes[0] = 0;
    nodes[count - 1] = n;
    nodes.dedup();
    nodes
}

/// `max |δ𝕏_{s,u,t} − δX_{s,u} ⊗ δX_{u,t}|` over triples of `subsample`
/// evenly spaced nodes.
pub fn chen_defect(r: &RoughPath, subsample: usize) -> Result<f64> {
    if subsample < 3 {
        return Err(Error::Invalid("chen_defect needs at least 3 nodes".into()));
    }
    let n = r.grid().n_steps();
    let nodes = even_nodes(n, subsample);
    let rows: Vec<Vec<Tensor>> = nodes.iter().map(|&i| if i < n { r.area().row(i) } else { vec![] }).collect();
    let val = |a: usize, b: usize| -> &Tensor { &rows[a][nodes[b] - nodes[a] - 1] };
    let mut worst = 0.0f64;
    for a in 0..nodes.len() {
        for b in a + 1..nodes.len() {
            for c in b + 1..nodes.len() {
                let delta = &(val(a, c) - val(a, b)) - val(b, c);
                let want = r.increment(nodes[a], nodes[b]).outer(&r.increment(nodes[b], nodes[c]));
                worst = worst.max((&delta - &want).norm());
            }
        }
    }
    Ok(worst)
}

/// Metadata written next to stored lifts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftManifest {
    pub seed: u64,
    pub refine: usize,
    pub alpha: f64,
    pub kind: LiftKind,
    pub convention_version: u32,
}

impl LiftManifest {
    pub fn new(seed: u64, refine: usize, kind: LiftKind) -> Self {
        Self { seed, refine, alpha: DEFAULT_ALPHA, kind, convention_version: CONVENTION_VERSION }
    }
}

/// Mesh-coupled Brownian lifts: one finest sample, every level obtained by
/// exact Chen coarsening, so finer levels refine and never resample.
#[derive(Debug, Clone)]
pub struct DriverFamily {
    finest: RoughPath,
    max_level: usize,
}

impl DriverFamily {
    /// Levels `0..=max_level` have `base_steps · 2^level` steps; areas are
    /// computed on a further `refine`-fold bridge refinement of the finest level.
    pub fn brownian(
        t_end: f64,
        base_steps: usize,
        max_level: usize,
        dim: usize,
        refine: usize,
        kind: LiftKind,
        seed: u64,
    ) -> Result<Self> {
        if !refine.is_power_of_two() {
            return Err(Error::Invalid(format!("refine must be a power of two, got {refine}")));
        }
        let extra = refine.trailing_zeros() as usize;
        let fine = brownian_level(t_end, base_steps, max_level + extra, dim, seed)?;
        let finest = lift_from_fine(&fine, refine, kind, DEFAULT_ALPHA)?;
        Ok(Self { finest, max_level })
    }

    /// Family built from an explicit finest rough path.
    pub fn from_finest(finest: RoughPath, max_level: usize) -> Result<Self> {
        if !finest.grid().n_steps().is_multiple_of(1 << max_level) {
            return Err(Error::Invalid("finest grid not divisible by 2^max_level".into()));
        }
        Ok(Self { finest, max_level })
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn finest(&self) -> &RoughPath {
        &self.finest
    }

    pub fn level(&self, level: usize) -> Result<RoughPath> {
        if level > self.max_level {
            return Err(Error::Invalid(format!("level {level} above max {}", self.max_level)));
        }
        self.finest.coarsen(1 << (self.max_level - level))
    }
}

/// Brownian sample on `base_steps · 2^level` steps, built from a base sample by
/// successive midpoint bridges so that all levels share coarse nodes.
pub fn brownian_level(t_end: f64, base_steps: usize, level: usize, dim: usize, seed: u64) -> Result<GridPath> {
    let mut w = sample_brownian(TimeGrid::unit(t_end, base_steps)?, dim, seed)?;
    for l in 0..level {
        w = refine_brownian(&w, 2, rng::derive_seed(seed, &[TAG_BRIDGE, l as u64]))?;
    }
    Ok(w)
}
