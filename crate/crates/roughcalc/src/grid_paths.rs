//! Uniform time grids, sampled paths and two-parameter processes.
//!
//! All processes live on a [`TimeGrid`] and are indexed by node. A
//! [`TwoParamGrid`] stores only the consecutive blocks `A_{t_k,t_{k+1}}` and
//! rebuilds `A_{s,t}` by accumulating left to right with its [`ChenRule`]:
//!
//! ```text
//! additive:      A_{s,t} = A_{s,u} + A_{u,t}
//! chen(L, R):    A_{s,t} = A_{s,u} + A_{u,t} + δL_{s,u} ⊗ δR_{u,t}
//! ```
//!
//! Seminorm estimators only see grid pairs with `j - i >= min_gap`, so they are
//! lower bounds for the continuum quantities.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if n_steps < 2 {
            return Err(Error::Invalid(format!("n_steps must be >= 2, got {n_steps}")));
        }
        if !t0.is_finite() || !t_end.is_finite() || t_end <= t0 {
            return Err(Error::Invalid(format!("need t0 < T, got [{t0}, {t_end}]")));
        }
        Ok(Self { t0, t_end, n_steps })
    }

    /// Grid on `[0, T]`.
    pub fn unit(t_end: f64, n_steps: usize) -> Result<Self> {
        Self::new(0.0, t_end, n_steps)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t_end
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }

    /// Length of `[t_i, t_j]`.
    pub fn span(&self, i: usize, j: usize) -> f64 {
        (j - i) as f64 * self.dt()
    }

    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Invalid("refinement factor must be >= 1".into()));
        }
        Self::new(self.t0, self.t_end, self.n_steps * factor)
    }

    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.n_steps.is_multiple_of(factor) {
            return Err(Error::Invalid(format!(
                "cannot coarsen {} steps by {factor}",
                self.n_steps
            )));
        }
        Self::new(self.t0, self.t_end, self.n_steps / factor)
    }

    pub(crate) fn check_pair(&self, i: usize, j: usize) -> Result<()> {
        if i >= j {
            return Err(Error::Index(format!("need i < j, got ({i}, {j})")));
        }
        if j > self.n_steps {
            return Err(Error::Index(format!("node {j} beyond n_steps = {}", self.n_steps)));
        }
        Ok(())
    }
}

/// Tensor-valued path sampled at every grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPath {
    grid: TimeGrid,
    shape: Vec<usize>,
    values: Vec<Tensor>,
}

impl GridPath {
    pub fn new(grid: TimeGrid, values: Vec<Tensor>) -> Result<Self> {
        if values.len() != grid.n_nodes() {
            return shape_err(format!(
                "path needs {} values, got {}",
                grid.n_nodes(),
                values.len()
            ));
        }
        let shape = values[0].shape().to_vec();
        for (k, v) in values.iter().enumerate() {
            if v.shape() != shape.as_slice() {
                return shape_err(format!("value {k} has shape {:?}, expected {shape:?}", v.shape()));
            }
            if !v.is_finite() {
                return Err(Error::Invalid(format!("non-finite value at node {k}")));
            }
        }
        Ok(Self { grid, shape, values })
    }

    pub fn from_fn(grid: TimeGrid, mut f: impl FnMut(usize, f64) -> Tensor) -> Result<Self> {
        let values = (0..=grid.n_steps()).map(|k| f(k, grid.time(k))).collect();
        Self::new(grid, values)
    }

    pub fn constant(grid: TimeGrid, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self { grid, shape, values: vec![value; grid.n_nodes()] }
    }

    pub fn zeros(grid: TimeGrid, shape: &[usize]) -> Self {
        Self::constant(grid, Tensor::zeros(shape))
    }

    /// Scalar path from plain numbers, stored with shape `(1,)`.
    pub fn from_scalars(grid: TimeGrid, xs: &[f64]) -> Result<Self> {
        Self::new(grid, xs.iter().map(|&x| Tensor::vector(vec![x])).collect())
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn value(&self, k: usize) -> &Tensor {
        &self.values[k]
    }

    pub fn first(&self) -> &Tensor {
        &self.values[0]
    }

    pub fn last(&self) -> &Tensor {
        &self.values[self.values.len() - 1]
    }

    pub fn into_values(self) -> Vec<Tensor> {
        self.values
    }

    /// Consecutive increment `δp_{k,k+1}`.
    pub fn step(&self, k: usize) -> Tensor {
        &self.values[k + 1] - &self.values[k]
    }

    /// First entry of every node (convenience for scalar paths).
    pub fn scalars(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.data()[0]).collect()
    }

    /// Keeps every `factor`-th node.
    pub fn subsample(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsen(factor)?;
        let values = (0..=grid.n_steps()).map(|k| self.values[k * factor].clone()).collect();
        Ok(Self { grid, shape: self.shape.clone(), values })
    }

    /// Path frozen after node `tau`.
    pub fn stopped(&self, tau: usize) -> Self {
        let values = (0..self.values.len())
            .map(|k| self.values[k.min(tau)].clone())
            .collect();
        Self { grid: self.grid, shape: self.shape.clone(), values }
    }

    pub fn map(&self, mut f: impl FnMut(usize, &Tensor) -> Tensor) -> Result<Self> {
        let values = self.values.iter().enumerate().map(|(k, v)| f(k, v)).collect();
        Self::new(self.grid, values)
    }

    pub fn zip_map(
        &self,
        other: &GridPath,
        mut f: impl FnMut(&Tensor, &Tensor) -> Tensor,
    ) -> Result<Self> {
        if self.grid != other.grid {
            return shape_err("zip_map on different grids");
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| f(a, b)).collect();
        Self::new(self.grid, values)
    }

    pub fn add(&self, other: &GridPath) -> Result<Self> {
        self.check_compatible(other)?;
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &GridPath) -> Result<Self> {
        self.check_compatible(other)?;
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, a: f64) -> Self {
        Self {
            grid: self.grid,
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| v.scale(a)).collect(),
        }
    }

    pub(crate) fn check_compatible(&self, other: &GridPath) -> Result<()> {
        if self.grid != other.grid {
            return shape_err("paths live on different grids");
        }
        if self.shape != other.shape {
            return shape_err(format!("path shapes {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    /// Stacks vector-valued paths into one vector path.
    pub fn stack(parts: &[&GridPath]) -> Result<Self> {
        let grid = *parts
            .first()
            .ok_or_else(|| Error::Invalid("stack of zero paths".into()))?
            .grid();
        for p in parts {
            if *p.grid() != grid || p.shape().len() != 1 {
                return shape_err("stack expects vector paths on a common grid");
            }
        }
        let values = (0..grid.n_nodes())
            .map(|k| Tensor::concat(&parts.iter().map(|p| p.value(k)).collect::<Vec<_>>()))
            .collect();
        Self::new(grid, values)
    }

    /// Piecewise-linear value at time `t` (only for interpolation-based checks).
    pub fn interpolate(&self, t: f64) -> Tensor {
        let g = &self.grid;
        let u = ((t - g.t0()) / g.dt()).clamp(0.0, g.n_steps() as f64);
        let k = (u.floor() as usize).min(g.n_steps() - 1);
        let w = u - k as f64;
        let mut out = self.values[k].scale(1.0 - w);
        out.axpy(w, &self.values[k + 1]);
        out
    }
}

/// How a [`TwoParamGrid`] reconstructs non-consecutive blocks.
#[derive(Debug, Clone, PartialEq)]
pub enum ChenRule {
    Additive,
    Chen { left: GridPath, right: GridPath },
}

/// Two-parameter process `A_{s,t}` stored by consecutive blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoParamGrid {
    grid: TimeGrid,
    shape: Vec<usize>,
    consecutive: Vec<Tensor>,
    rule: ChenRule,
    overrides: BTreeMap<(usize, usize), Tensor>,
}

impl TwoParamGrid {
    pub fn new(grid: TimeGrid, consecutive: Vec<Tensor>, rule: ChenRule) -> Result<Self> {
        if consecutive.len() != grid.n_steps() {
            return shape_err(format!(
                "need {} consecutive blocks, got {}",
                grid.n_steps(),
                consecutive.len()
            ));
        }
        let shape = consecutive[0].shape().to_vec();
        if consecutive.iter().any(|c| c.shape() != shape.as_slice()) {
            return shape_err("consecutive blocks of different shapes");
        }
        if consecutive.iter().any(|c| !c.is_finite()) {
            return Err(Error::Invalid("non-finite consecutive block".into()));
        }
        if let ChenRule::Chen { left, right } = &rule {
            if *left.grid() != grid || *right.grid() != grid {
                return shape_err("Chen rule paths on a different grid");
            }
            let mut want = left.shape().to_vec();
            want.extend_from_slice(right.shape());
            if want != shape {
                return shape_err(format!("Chen rule implies shape {want:?}, blocks are {shape:?}"));
            }
        }
        Ok(Self { grid, shape, consecutive, rule, overrides: BTreeMap::new() })
    }

    /// Additive process `A_{s,t} = δp_{s,t}` of a path.
    pub fn additive_from_path(p: &GridPath) -> Self {
        let consecutive = (0..p.grid().n_steps()).map(|k| p.step(k)).collect();
        Self {
            grid: *p.grid(),
            shape: p.shape().to_vec(),
            consecutive,
            rule: ChenRule::Additive,
            overrides: BTreeMap::new(),
        }
    }

    pub fn zeros(grid: TimeGrid, shape: &[usize], rule: ChenRule) -> Result<Self> {
        Self::new(grid, vec![Tensor::zeros(shape); grid.n_steps()], rule)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rule(&self) -> &ChenRule {
        &self.rule
    }

    pub fn consecutive(&self) -> &[Tensor] {
        &self.consecutive
    }

    pub fn block(&self, k: usize) -> &Tensor {
        &self.consecutive[k]
    }

    /// Replaces a stored block. Consecutive blocks are overwritten in place;
    /// any other `(i, j)` is stored verbatim and returned by [`Self::value`]
    /// instead of the reconstruction.
    pub fn set_block(&mut self, i: usize, j: usize, value: Tensor) -> Result<()> {
        self.grid.check_pair(i, j)?;
        if value.shape() != self.shape.as_slice() {
            return shape_err("block shape");
        }
        if j == i + 1 {
            self.consecutive[i] = value;
        } else {
            self.overrides.insert((i, j), value);
        }
        Ok(())
    }

    /// `A_{t_i, t_j}`.
    pub fn value(&self, i: usize, j: usize) -> Result<Tensor> {
        self.grid.check_pair(i, j)?;
        if let Some(v) = self.overrides.get(&(i, j)) {
            return Ok(v.clone());
        }
        Ok(self.accumulate(i, j))
    }

    fn accumulate(&self, i: usize, j: usize) -> Tensor {
        let mut acc = self.consecutive[i].clone();
        match &self.rule {
            ChenRule::Additive => {
                for k in i + 1..j {
                    acc += &self.consecutive[k];
                }
            }
            ChenRule::Chen { left, right } => {
                for k in i + 1..j {
                    acc += &self.consecutive[k];
                    let dl = left.value(k) - left.value(i);
                    acc += &dl.outer(&right.step(k));
                }
            }
        }
        acc
    }

    /// `A_{t_i, t_j}` for every `j > i`, built in one pass.
    pub fn row(&self, i: usize) -> Vec<Tensor> {
        let n = self.grid.n_steps();
        let mut out = Vec::with_capacity(n - i);
        if i >= n {
            return out;
        }
        let mut acc = self.consecutive[i].clone();
        out.push(acc.clone());
        for k in i + 1..n {
            acc += &self.consecutive[k];
            if let ChenRule::Chen { left, right } = &self.rule {
                let dl = left.value(k) - left.value(i);
                acc += &dl.outer(&right.step(k));
            }
            out.push(acc.clone());
        }
        for ((a, b), v) in self.overrides.range((i, 0)..(i + 1, 0)) {
            debug_assert_eq!(*a, i);
            out[b - i - 1] = v.clone();
        }
        out
    }

    /// Transposed process `A^⊤_{s,t}` (factor reversal in the last two axes).
    pub fn transpose(&self) -> Result<Self> {
        let consecutive = self.consecutive.iter().map(|c| c.transpose_last2()).collect();
        let rule = match &self.rule {
            ChenRule::Additive => ChenRule::Additive,
            ChenRule::Chen { left, right } => ChenRule::Chen { left: right.clone(), right: left.clone() },
        };
        Self::new(self.grid, consecutive, rule)
    }

    /// Restriction to every `factor`-th node with exactly reconstructed blocks.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsen(factor)?;
        let consecutive = (0..grid.n_steps())
            .map(|k| self.value(k * factor, (k + 1) * factor))
            .collect::<Result<Vec<_>>>()?;
        let rule = match &self.rule {
            ChenRule::Additive => ChenRule::Additive,
            ChenRule::Chen { left, right } => ChenRule::Chen {
                left: left.subsample(factor)?,
                right: right.subsample(factor)?,
            },
        };
        Self::new(grid, consecutive, rule)
    }
}

/// `δp_{t_i, t_j} = p_j − p_i`.
pub fn increment(p: &GridPath, i: usize, j: usize) -> Result<Tensor> {
    p.grid().check_pair(i, j)?;
    Ok(p.value(j) - p.value(i))
}

/// `δA_{s,u,t} = A_{s,t} − A_{s,u} − A_{u,t}` at nodes `i < k < j`.
pub fn second_delta(a: &TwoParamGrid, i: usize, k: usize, j: usize) -> Result<Tensor> {
    if !(i < k && k < j) {
        return Err(Error::Index(format!("need i < k < j, got ({i}, {k}, {j})")));
    }
    let ij = a.value(i, j)?;
    let ik = a.value(i, k)?;
    let kj = a.value(k, j)?;
    Ok(&(&ij - &ik) - &kj)
}

fn check_seminorm_args(exponent: f64, min_gap: usize) -> Result<()> {
    if min_gap == 0 {
        return Err(Error::Invalid("min_gap must be >= 1".into()));
    }
    if !exponent.is_finite() || exponent <= 0.0 {
        return Err(Error::Invalid(format!("exponent must be positive, got {exponent}")));
    }
    Ok(())
}

/// Grid estimate of the Hölder seminorm `sup |δp_{s,t}| / |t−s|^α`.
pub fn holder_seminorm(p: &GridPath, alpha: f64, min_gap: usize) -> Result<f64> {
    check_seminorm_args(alpha, min_gap)?;
    let g = p.grid();
    let n = g.n_steps();
    let mut best = 0.0f64;
    for i in 0..n {
        for j in (i + min_gap)..=n {
            let r = (p.value(j) - p.value(i)).norm() / g.span(i, j).powf(alpha);
            best = best.max(r);
        }
    }
    Ok(best)
}

/// Grid estimate of `sup |A_{s,t}| / |t−s|^β`.
pub fn two_param_seminorm(a: &TwoParamGrid, beta: f64, min_gap: usize) -> Result<f64> {
    check_seminorm_args(beta, min_gap)?;
    let g = a.grid();
    let mut best = 0.0f64;
    for i in 0..g.n_steps() {
        for (off, v) in a.row(i).iter().enumerate() {
            let j = i + off + 1;
            if j - i < min_gap {
                continue;
            }
            best = best.max(v.norm() / g.span(i, j).powf(beta));
        }
    }
    Ok(best)
}

/// Anisotropic size `|t; x|_s = |t|^α ∨ |x|`.
pub fn anisotropic_distance(dt: f64, dx: f64, alpha: f64) -> Result<f64> {
    if dt < 0.0 || dx < 0.0 || dt.is_nan() || dx.is_nan() {
        return Err(Error::Invalid(format!("anisotropic_distance needs dt, dx >= 0, got ({dt}, {dx})")));
    }
    Ok(dt.powf(alpha).max(dx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PathHeader {
    kind: String,
    t0: f64,
    t_end: f64,
    n_steps: usize,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rule: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    left_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    right_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    overrides: Option<usize>,
}

fn write_rows(path: &Path, first: &str, shape: &[usize], rows: &[(f64, &Tensor)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let ncols = shape.iter().product::<usize>();
    let mut header = vec![first.to_string()];
    header.extend((0..ncols).map(|c| format!("v{c}")));
    w.write_record(&header)?;
    for (t, v) in rows {
        let mut rec = vec![format!("{t:e}")];
        rec.extend(v.data().iter().map(|x| format!("{x:e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows(path: &Path, shape: &[usize]) -> Result<Vec<Tensor>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Invalid(format!("{path:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(Tensor::new(shape.to_vec(), vals)?);
    }
    Ok(out)
}

fn csv_sibling(stem: &Path, suffix: &str) -> std::path::PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

impl GridPath {
    /// Writes `<stem>.json` (grid metadata and shape) and `<stem>.csv`
    /// (one row per node: time, then row-major tensor entries).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let header = PathHeader {
            kind: "grid_path".into(),
            t0: self.grid.t0(),
            t_end: self.grid.t_end(),
            n_steps: self.grid.n_steps(),
            shape: self.shape.clone(),
            rule: None,
            left_shape: None,
            right_shape: None,
            overrides: None,
        };
        fs::write(csv_sibling(stem, ".json"), serde_json::to_string_pretty(&header)?)?;
        let times = self.grid.times();
        let rows: Vec<_> = times.iter().copied().zip(self.values.iter()).collect();
        write_rows(&csv_sibling(stem, ".csv"), "t", &self.shape, &rows)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let header: PathHeader = serde_json::from_str(&fs::read_to_string(csv_sibling(stem, ".json"))?)?;
        if header.kind != "grid_path" {
            return Err(Error::Invalid(format!("{stem:?} is a {}, not a grid_path", header.kind)));
        }
        let grid = TimeGrid::new(header.t0, header.t_end, header.n_steps)?;
        Self::new(grid, read_rows(&csv_sibling(stem, ".csv"), &header.shape)?)
    }
}

impl TwoParamGrid {
    /// Writes `<stem>.json`, `<stem>.csv` (one row per consecutive interval,
    /// keyed by its left time) and, for Chen rules, `<stem>.left.csv` and
    /// `<stem>.right.csv`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (rule, ls, rs) = match &self.rule {
            ChenRule::Additive => ("additive".to_string(), None, None),
            ChenRule::Chen { left, right } => {
                ("chen".to_string(), Some(left.shape().to_vec()), Some(right.shape().to_vec()))
            }
        };
        let header = PathHeader {
            kind: "two_param_grid".into(),
            t0: self.grid.t0(),
            t_end: self.grid.t_end(),
            n_steps: self.grid.n_steps(),
            shape: self.shape.clone(),
            rule: Some(rule),
            left_shape: ls,
            right_shape: rs,
            overrides: (!self.overrides.is_empty()).then_some(self.overrides.len()),
        };
        fs::write(csv_sibling(stem, ".json"), serde_json::to_string_pretty(&header)?)?;
        let times = self.grid.times();
        let rows: Vec<_> = times.iter().copied().zip(self.consecutive.iter()).collect();
        write_rows(&csv_sibling(stem, ".csv"), "t_left", &self.shape, &rows)?;
        if let ChenRule::Chen { left, right } = &self.rule {
            let lrows: Vec<_> = times.iter().copied().zip(left.values().iter()).collect();
            write_rows(&csv_sibling(stem, ".left.csv"), "t", left.shape(), &lrows)?;
            let rrows: Vec<_> = times.iter().copied().zip(right.values().iter()).collect();
            write_rows(&csv_sibling(stem, ".right.csv"), "t", right.shape(), &rrows)?;
        }
        if !self.overrides.is_empty() {
            let mut w = csv::Writer::from_path(csv_sibling(stem, ".overrides.csv"))?;
            let mut header = vec!["i".to_string(), "j".to_string()];
            header.extend((0..self.shape.iter().product::<usize>()).map(|c| format!("v{c}")));
            w.write_record(&header)?;
            for ((i, j), v) in &self.overrides {
                let mut rec = vec![i.to_string(), j.to_string()];
                rec.extend(v.data().iter().map(|x| format!("{x:e}")));
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let header: PathHeader = serde_json::from_str(&fs::read_to_string(csv_sibling(stem, ".json"))?)?;
        if header.kind != "two_param_grid" {
            return Err(Error::Invalid(format!("{stem:?} is a {}, not a two_param_grid", header.kind)));
        }
        let grid = TimeGrid::new(header.t0, header.t_end, header.n_steps)?;
        let blocks = read_rows(&csv_sibling(stem, ".csv"), &header.shape)?;
        let rule = match header.rule.as_deref() {
            Some("additive") | None => ChenRule::Additive,
            Some("chen") => {
                let ls = header.left_shape.clone().ok_or_else(|| Error::Invalid("missing left_shape".into()))?;
                let rs = header.right_shape.clone().ok_or_else(|| Error::Invalid("missing right_shape".into()))?;
                ChenRule::Chen {
                    left: GridPath::new(grid, read_rows(&csv_sibling(stem, ".left.csv"), &ls)?)?,
                    right: GridPath::new(grid, read_rows(&csv_sibling(stem, ".right.csv"), &rs)?)?,
                }
            }
            Some(other) => return Err(Error::Invalid(format!("unknown chen rule {other:?}"))),
        };
        let mut out = Self::new(grid, blocks, rule)?;
        if header.overrides.is_some_and(|n| n > 0) {
            let path = csv_sibling(stem, ".overrides.csv");
            let bad = |e: &dyn std::fmt::Display| Error::Invalid(format!("{path:?}: {e}"));
            let mut r = csv::Reader::from_path(&path)?;
            for rec in r.records() {
                let rec = rec?;
                let i: usize = rec.get(0).unwrap_or("").trim().parse().map_err(|e| bad(&e))?;
                let j: usize = rec.get(1).unwrap_or("").trim().parse().map_err(|e| bad(&e))?;
                let vals = rec.iter().skip(2).map(|s| s.trim().parse::<f64>().map_err(|e| bad(&e))).collect::<Result<Vec<_>>>()?;
                out.set_block(i, j, Tensor::new(header.shape.clone(), vals)?)?;
            }
        }
        Ok(out)
    }
}

/// Either kind of stored sample, as read back from disk.
#[derive(Debug, Clone)]
pub enum StoredSample {
    Path(GridPath),
    TwoParam(TwoParamGrid),
}

/// Loads `<stem>.json` + CSV regardless of the stored kind.
pub fn load_sample(stem: &Path) -> Result<StoredSample> {
    let header: PathHeader = serde_json::from_str(&fs::read_to_string(csv_sibling(stem, ".json"))?)?;
    match header.kind.as_str() {
        "grid_path" => Ok(StoredSample::Path(GridPath::load(stem)?)),
        "two_param_grid" => Ok(StoredSample::TwoParam(TwoParamGrid::load(stem)?)),
        k => Err(Error::Invalid(format!("unknown sample kind {k:?}"))),
    }
}
