//! Verifiers for the rough Itô–Wentzell, rough transport, rough
//! Alekseev–Gröbner and rough stochastic Itô–Wentzell identities.
//!
//! A defect function evaluates both sides of an identity on one grid and
//! returns the largest deviation over `[0, t_k]`. A study runs a defect
//! function on a dyadic family of coupled grids (finer levels refine, never
//! resample) and fits the order of the median defect.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controlled::{compose_field_path, ControlledPath, Jet, JetDims, JetField, SpatialField, StronglyControlledPath};
use crate::diagnostics::fit_log_log;
use crate::error::{shape_err, Error, Result};
use crate::functions::{RidgeEntry, RidgeMap, ScalarFn, SmoothMap};
use crate::grid_paths::{GridPath, TimeGrid};
use crate::integration::{rough_integral_path, rough_stochastic_integral, rs_integral};
use crate::rde_flows::{backward_flow_jet, forward_flow_jet, rde_solution_jet, solve_flow, VectorFieldPair, VectorFieldSpec};
use crate::rng;
use crate::rough_lift::{bracket, brownian_level, ito_integral, BracketPath, DriverFamily, LiftKind, MartingaleSample, RoughPath};
use crate::tensor::Tensor;

/// Defects at or below this are treated as exact zeros.
pub const EXACT_TOL: f64 = 1e-12;

/// Largest admissible decomposition defect of a constructed scRSM.
pub const SCRSM_TOL: f64 = 1e-10;

const TAG_X: u64 = 0x58;
const TAG_W: u64 = 0x57;

fn exact_tol() -> f64 {
    EXACT_TOL
}

/// Pass rule of a refinement study.
///
/// A report whose residuals are all below `exact_tol` passes unless an upper
/// order bound is set (negative controls must not converge). Otherwise the
/// fitted order must lie within the given bounds, the finest median must
/// not exceed `max_finest` and, with `decreasing`, the medians must decrease
/// strictly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PassCriteria {
    #[serde(default)]
    pub min_order: Option<f64>,
    #[serde(default)]
    pub max_order: Option<f64>,
    #[serde(default)]
    pub max_finest: Option<f64>,
    #[serde(default = "exact_tol")]
    pub exact_tol: f64,
    /// Require strictly decreasing medians across meshes.
    #[serde(default)]
    pub decreasing: bool,
}

impl Default for PassCriteria {
    fn default() -> Self {
        Self { min_order: None, max_order: None, max_finest: None, exact_tol: EXACT_TOL, decreasing: false }
    }
}

impl PassCriteria {
    pub fn min_order(order: f64) -> Self {
        Self { min_order: Some(order), ..Self::default() }
    }

    pub fn max_order(order: f64) -> Self {
        Self { max_order: Some(order), ..Self::default() }
    }

    pub fn with_max_finest(mut self, c: f64) -> Self {
        self.max_finest = Some(c);
        self
    }

    fn judge(&self, residuals: &[f64], order: Option<f64>) -> bool {
        if residuals.iter().all(|&r| r <= self.exact_tol) {
            return self.max_order.is_none();
        }
        let finest_ok = self.max_finest.is_none_or(|c| residuals.last().is_some_and(|&r| r <= c));
        let order_ok = match order {
            Some(o) => self.min_order.is_none_or(|m| o >= m) && self.max_order.is_none_or(|m| o <= m),
            None => self.min_order.is_none() && self.max_order.is_none(),
        };
        let monotone_ok = !self.decreasing || residuals.windows(2).all(|p| p[1] < p[0]);
        finest_ok && order_ok && monotone_ok
    }
}

/// One replica's defect on one mesh, with auxiliary diagnostics whose maxima
/// are reported.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sample {
    pub residual: f64,
    pub extras: Vec<(&'static str, f64)>,
}

impl From<f64> for Sample {
    fn from(residual: f64) -> Self {
        Self { residual, extras: Vec::new() }
    }
}

impl Sample {
    pub fn with(mut self, name: &'static str, value: f64) -> Self {
        self.extras.push((name, value));
        self
    }
}

/// Residuals of an identity across mesh refinements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub name: String,
    pub meshes: Vec<f64>,
    /// Median defect over replicas, per mesh.
    pub residuals: Vec<f64>,
    pub p90: Vec<f64>,
    pub replicas: usize,
    /// Log-log slope of the medians; absent when fewer than two are positive.
    pub fitted_order: Option<f64>,
    pub extras: BTreeMap<String, f64>,
    pub criteria: PassCriteria,
    pub pass: bool,
}

fn fitted_order(meshes: &[f64], residuals: &[f64]) -> Option<f64> {
    let table: Vec<(f64, f64)> = meshes.iter().copied().zip(residuals.iter().copied()).collect();
    fit_log_log(&table, 2).ok().map(|f| f.slope)
}

impl ConvergenceReport {
    /// `samples[m]` holds the per-replica defects on mesh `m`.
    pub fn from_samples(name: &str, meshes: Vec<f64>, samples: &[Vec<f64>], criteria: PassCriteria) -> Result<Self> {
        if meshes.is_empty() || samples.len() != meshes.len() {
            return Err(Error::Invalid("one sample set per mesh is required".into()));
        }
        if meshes.windows(2).any(|w| w[1] >= w[0]) || meshes.iter().any(|m| *m <= 0.0) {
            return Err(Error::Invalid("meshes must be positive and strictly decreasing".into()));
        }
        let replicas = samples[0].len();
        if replicas == 0 || samples.iter().any(|s| s.len() != replicas) {
            return Err(Error::Invalid("every mesh needs the same positive number of replicas".into()));
        }
        if samples.iter().flatten().any(|r| r.is_nan() || *r < 0.0) {
            return Err(Error::Invalid("defects must be nonnegative numbers".into()));
        }
        let residuals: Vec<f64> = samples.iter().map(|s| rng::median(s)).collect();
        let p90 = samples.iter().map(|s| rng::quantile(s, 0.9)).collect();
        let order = fitted_order(&meshes, &residuals);
        let pass = criteria.judge(&residuals, order);
        Ok(Self {
            name: name.to_string(),
            meshes,
            residuals,
            p90,
            replicas,
            fitted_order: order,
            extras: BTreeMap::new(),
            criteria,
            pass,
        })
    }

    /// Order fitted on the first `m + 1` meshes, for each `m`.
    pub fn order_so_far(&self) -> Vec<Option<f64>> {
        (1..=self.meshes.len()).map(|m| fitted_order(&self.meshes[..m], &self.residuals[..m])).collect()
    }

    /// Residual table with columns `mesh,median,p90,order_so_far`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["mesh", "median", "p90", "order_so_far"])?;
        for (i, o) in self.order_so_far().into_iter().enumerate() {
            let order = o.map(|o| o.to_string()).unwrap_or_default();
            w.write_record([self.meshes[i].to_string(), self.residuals[i].to_string(), self.p90[i].to_string(), order])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)? + "\n")?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv()?)?;
        Ok(())
    }
}

/// Runs `f(replica)` (one sample per mesh) over replicas in parallel and
/// collects the results in replica order.
pub fn run_study(
    name: &str,
    meshes: &[f64],
    replicas: usize,
    criteria: &PassCriteria,
    f: impl Fn(usize) -> Result<Vec<Sample>> + Sync,
) -> Result<ConvergenceReport> {
    if replicas == 0 {
        return Err(Error::Invalid("a study needs at least one replica".into()));
    }
    let per: Vec<Vec<Sample>> = (0..replicas)
        .into_par_iter()
        .map(|r| f(r).map_err(|e| Error::Replica { replica: r, source: Box::new(e) }))
        .collect::<Result<_>>()?;
    if per.iter().any(|s| s.len() != meshes.len()) {
        return Err(Error::Invalid("a replica returned the wrong number of meshes".into()));
    }
    let samples: Vec<Vec<f64>> = (0..meshes.len()).map(|m| per.iter().map(|s| s[m].residual).collect()).collect();
    let mut report = ConvergenceReport::from_samples(name, meshes.to_vec(), &samples, criteria.clone())?;
    for (key, v) in per.iter().flatten().flat_map(|s| s.extras.iter()) {
        let e = report.extras.entry(key.to_string()).or_insert(0.0);
        *e = e.max(*v);
    }
    Ok(report)
}

/// Dyadic mesh family: level `l` has `base_steps · 2^l` steps on `[0, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshFamily {
    pub t_end: f64,
    pub base_steps: usize,
    pub levels: usize,
}

impl MeshFamily {
    pub fn new(t_end: f64, base_steps: usize, levels: usize) -> Result<Self> {
        let m = Self { t_end, base_steps, levels };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_end.is_nan() || self.t_end <= 0.0 || self.base_steps == 0 || self.levels == 0 || self.levels > 16 {
            return Err(Error::Config("mesh family needs t_end > 0, base_steps >= 1 and 1..=16 levels".into()));
        }
        Ok(())
    }

    pub fn steps(&self, level: usize) -> usize {
        self.base_steps << level
    }

    pub fn grid(&self, level: usize) -> Result<TimeGrid> {
        TimeGrid::unit(self.t_end, self.steps(level))
    }

    pub fn finest_level(&self) -> usize {
        self.levels - 1
    }

    pub fn meshes(&self) -> Vec<f64> {
        (0..self.levels).map(|l| self.t_end / self.steps(l) as f64).collect()
    }
}

/// Driver of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriverSpec {
    /// `Z^i_t = 0.8 sin((2 + i) t + i/2)` with the piecewise-linear lift of
    /// the finest grid.
    Smooth { dim: usize },
    /// Brownian motion with areas on a `refine`-fold bridge refinement of the
    /// finest grid.
    Brownian {
        dim: usize,
        lift: LiftKind,
        #[serde(default = "one")]
        refine: usize,
    },
}

fn one() -> usize {
    1
}

/// Deterministic smooth path used by [`DriverSpec::Smooth`].
pub fn smooth_path(grid: TimeGrid, dim: usize) -> Result<GridPath> {
    GridPath::from_fn(grid, |_, t| {
        Tensor::vector((0..dim).map(|i| 0.8 * ((2.0 + i as f64) * t + 0.5 * i as f64).sin()).collect())
    })
}

impl DriverSpec {
    pub fn dim(&self) -> usize {
        match self {
            Self::Smooth { dim } | Self::Brownian { dim, .. } => *dim,
        }
    }

    /// Coupled lifts on levels `0..=max_level` of `mesh`.
    pub fn family(&self, mesh: &MeshFamily, max_level: usize, seed: u64) -> Result<DriverFamily> {
        match self {
            Self::Smooth { dim } => {
                let base = smooth_path(TimeGrid::unit(mesh.t_end, mesh.steps(max_level))?, *dim)?;
                DriverFamily::from_finest(RoughPath::piecewise_linear(0.5, base)?, max_level)
            }
            Self::Brownian { dim, lift, refine } => {
                DriverFamily::brownian(mesh.t_end, mesh.base_steps, max_level, *dim, *refine, *lift, seed)
            }
        }
    }
}

/// `t_k` as a scalar path, so that `rs_integral(φ, time_path)` is `Σ φ_k Δ_k`.
pub fn time_path(grid: TimeGrid) -> GridPath {
    GridPath::from_fn(grid, |_, t| Tensor::scalar(t)).expect("time path")
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).max_abs()
}

/// Result of the rough Itô–Wentzell check on one grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiwDefect {
    /// `max_t |Z_t − Z_0 − RHS_{0,t}|`.
    pub defect: f64,
    /// `max_t |F′ + ∂F Y′|`, the `d𝐗` integrand.
    pub dx_integrand: f64,
}

/// Rough Itô–Wentzell defect of `Z_t = F_t(Y_t)` against
/// `∫(Z′, Z″)d𝐗 + ∫(Ḟ + ∂F Ẏ)dr + ∫(∂F′Y′ + ½∂²F(Y′, Y′))d[𝐗]`.
pub fn riw_defect(f: &dyn JetField, scp: &StronglyControlledPath, rx: &RoughPath, br: &BracketPath) -> Result<RiwDefect> {
    let g = *scp.grid();
    if rx.grid() != &g || br.grid() != &g {
        return shape_err("field, path, rough path and bracket must share a grid");
    }
    let z = compose_field_path(f, scp, br.rate())?;
    let r = f.dims().codomain.len();
    let terms = (0..g.n_nodes())
        .into_par_iter()
        .map(|k| {
            let jet = f.eval(k, scp.y().value(k))?;
            let yp = scp.yp().value(k);
            let mut corr = jet.dfp.map_axis(r, yp)?;
            corr.axpy(0.5, &jet.d2f.map_axis(r, yp)?.map_axis(r + 1, yp)?);
            Ok((&jet.fdot + &jet.df.compose(scp.ydot().value(k))?, corr))
        })
        .collect::<Result<Vec<_>>>()?;
    let (drift, corr): (Vec<Tensor>, Vec<Tensor>) = terms.into_iter().unzip();
    let rhs_x = rough_integral_path(&z.derivative_pair(), rx)?;
    let rhs_t = rs_integral(&GridPath::new(g, drift)?, &time_path(g))?;
    let rhs_b = rs_integral(&GridPath::new(g, corr)?, br.path())?;
    let z0 = z.y().first();
    let mut defect = 0.0f64;
    for k in 0..g.n_nodes() {
        let rhs = &(rhs_x.value(k) + rhs_t.value(k)) + rhs_b.value(k);
        defect = defect.max(max_abs_diff(&(z.y().value(k) - z0), &rhs));
    }
    let dx_integrand = z.yp().values().iter().map(Tensor::max_abs).fold(0.0, f64::max);
    Ok(RiwDefect { defect, dx_integrand })
}

/// Inputs of a rough Itô–Wentzell check on one level.
pub struct RiwInputs {
    pub field: Arc<dyn JetField>,
    pub path: StronglyControlledPath,
    pub rx: RoughPath,
}

/// Refinement study of [`riw_defect`]; `build(level)` constructs the level.
pub fn verify_riw(
    name: &str,
    mesh: &MeshFamily,
    criteria: &PassCriteria,
    build: impl Fn(usize) -> Result<RiwInputs> + Sync,
) -> Result<ConvergenceReport> {
    run_study(name, &mesh.meshes(), 1, criteria, |_| {
        (0..mesh.levels)
            .map(|l| {
                let inp = build(l)?;
                let d = riw_defect(inp.field.as_ref(), &inp.path, &inp.rx, &bracket(&inp.rx))?;
                Ok(Sample::from(d.defect).with("dx_integrand", d.dx_integrand))
            })
            .collect()
    })
}

/// Result of the rough transport checks on one grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportDefect {
    /// `max_{t, x} |u_t(ψ_t(x)) − u_0(x)|` along the reference flow `ψ`.
    pub drift: f64,
    /// Largest `|(u∘φ)′|, |(u∘φ)″|, |(u∘φ)^•|` along forward solutions.
    pub jet_residual: f64,
    /// `max_x |u_T(x) − g(x)|`.
    pub terminal: f64,
}

fn spread(len: usize, count: usize) -> Vec<usize> {
    match count.min(len) {
        0 => vec![],
        1 => vec![len / 2],
        c => (0..c).map(|i| i * (len - 1) / (c - 1)).collect(),
    }
}

/// Rough transport checks for `u_t(x) = g(φ(t, T; x))` built on `rz`.
///
/// The drift is measured along the forward flow of `reference`, a refinement
/// of `rz` on the same interval (or `rz` itself, in which case the discrete
/// flow property makes it vanish to rounding). The composed jet is checked
/// along forward solutions from `jet_points` of the `points`.
pub fn transport_defect(
    vf: &VectorFieldPair,
    g: Arc<dyn SmoothMap>,
    rz: &RoughPath,
    reference: &RoughPath,
    points: &[Tensor],
    jet_points: usize,
) -> Result<TransportDefect> {
    let (gc, gr) = (rz.grid(), reference.grid());
    let n = gc.n_steps();
    if gr.t0() != gc.t0() || gr.t_end() != gc.t_end() || gr.n_steps() % n != 0 {
        return shape_err("reference driver must refine the driver on the same interval");
    }
    let factor = gr.n_steps() / n;
    let u = backward_flow_jet(vf, rz, g.clone())?;
    let u_value = |k: usize, y: &Tensor| -> Result<Tensor> {
        let fp = solve_flow(vf, rz, k, n, y, 0)?;
        Ok(g.derivs(fp.state(n), 0)?.remove(0))
    };
    let drift = points
        .par_iter()
        .map(|x| {
            let psi = solve_flow(vf, reference, 0, gr.n_steps(), x, 0)?;
            let u0 = u_value(0, x)?;
            let mut worst = 0.0f64;
            for k in 1..=n {
                worst = worst.max(max_abs_diff(&u_value(k, psi.state(k * factor))?, &u0));
            }
            Ok(worst)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let rate = bracket(rz).rate().clone();
    let mut jet_residual = 0.0f64;
    for i in spread(points.len(), jet_points) {
        let scp = rde_solution_jet(vf, rz, &points[i])?;
        let z = compose_field_path(&u, &scp, &rate)?;
        for k in 0..gc.n_nodes() {
            let m = z.yp().value(k).max_abs().max(z.ypp().value(k).max_abs()).max(z.ydot().value(k).max_abs());
            jet_residual = jet_residual.max(m);
        }
    }
    let mut terminal = 0.0f64;
    for x in points {
        terminal = terminal.max(max_abs_diff(&u.eval(n, x)?.f, &g.derivs(x, 0)?[0]));
    }
    Ok(TransportDefect { drift, jet_residual, terminal })
}

/// Rough transport refinement study.
#[derive(Clone)]
pub struct TransportScenario {
    pub vf: VectorFieldPair,
    pub g: Arc<dyn SmoothMap>,
    pub driver: DriverSpec,
    pub mesh: MeshFamily,
    /// Levels between the finest studied level and the reference flow.
    pub reference_levels: usize,
    pub points: Vec<Tensor>,
    pub jet_points: usize,
    pub replicas: usize,
    pub seed: u64,
}

pub fn verify_transport(name: &str, sc: &TransportScenario, criteria: &PassCriteria) -> Result<ConvergenceReport> {
    let top = sc.mesh.finest_level() + sc.reference_levels;
    run_study(name, &sc.mesh.meshes(), sc.replicas, criteria, |r| {
        let fam = sc.driver.family(&sc.mesh, top, rng::replica_seed(sc.seed, r as u64))?;
        let reference = fam.level(top)?;
        (0..sc.mesh.levels)
            .map(|l| {
                let d = transport_defect(&sc.vf, sc.g.clone(), &fam.level(l)?, &reference, &sc.points, sc.jet_points)?;
                Ok(Sample::from(d.drift).with("jet_residual", d.jet_residual).with("terminal", d.terminal))
            })
            .collect()
    })
}

/// Rough Alekseev–Gröbner defect of
/// `F_t(Y_t) − F_0(Y_0) = ∫DF(Y)(Ẏ − μ(Y))dr + ∫DF(Y)(Y′ − σ(Y)) d𝐙`
/// with `F_t(x) = f(φ(t, T; x))` the backward flow of `(μ, σ)` on `rz`.
///
/// The `d𝐙` integrand `H = DF(Y)K`, `K = Y′ − σ(Y)`, is integrated with the
/// Gubinelli derivative `H′ = (∂F′ + ∂²F Y′)K + DF(Y)((Y″)^⊤ − Dσ(Y)Y′)`.
pub fn rag_defect(vf: &VectorFieldPair, scp: &StronglyControlledPath, f: Arc<dyn SmoothMap>, rz: &RoughPath) -> Result<f64> {
    let g = *scp.grid();
    if rz.grid() != &g || scp.value_shape() != [vf.state_dim()] || scp.driver_dim() != vf.driver_dim() {
        return shape_err("path, driver and vector fields do not match");
    }
    let u = backward_flow_jet(vf, rz, f)?;
    let nodes = (0..g.n_nodes())
        .into_par_iter()
        .map(|k| {
            let (y, yp) = (scp.y().value(k), scp.yp().value(k));
            let jet = u.eval(k, y)?;
            let sig = vf.sigma_derivs(y, 1)?;
            let kk = yp - &sig[0];
            let kp = &scp.ypp().value(k).transpose_last2() - &sig[1].contract(yp, 1)?;
            let du_p = &jet.dfp + &jet.d2f.contract(yp, 1)?;
            let h = jet.df.compose(&kk)?;
            let hp = &du_p.transpose_last2().contract(&kk, 1)?.transpose_last2() + &jet.df.compose(&kp)?;
            let leb = jet.df.compose(&(scp.ydot().value(k) - &vf.mu(y)?))?;
            Ok([jet.f, h, hp, leb])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cols: [Vec<Tensor>; 4] = Default::default();
    for p in nodes {
        for (c, t) in cols.iter_mut().zip(p) {
            c.push(t);
        }
    }
    let [lhs, h, hp, leb] = cols;
    let rhs_x = rough_integral_path(&ControlledPath::new(GridPath::new(g, h)?, GridPath::new(g, hp)?)?, rz)?;
    let rhs_t = rs_integral(&GridPath::new(g, leb)?, &time_path(g))?;
    let mut defect = 0.0f64;
    for k in 0..g.n_nodes() {
        defect = defect.max(max_abs_diff(&(&lhs[k] - &lhs[0]), &(rhs_x.value(k) + rhs_t.value(k))));
    }
    Ok(defect)
}

/// Inputs of a rough Alekseev–Gröbner check on one level.
pub struct RagInputs {
    pub vf: VectorFieldPair,
    pub path: StronglyControlledPath,
    pub f: Arc<dyn SmoothMap>,
    pub rz: RoughPath,
}

/// Refinement study of [`rag_defect`]; `build(level)` constructs the level.
pub fn verify_rag(
    name: &str,
    mesh: &MeshFamily,
    criteria: &PassCriteria,
    build: impl Fn(usize) -> Result<RagInputs> + Sync,
) -> Result<ConvergenceReport> {
    run_study(name, &mesh.meshes(), 1, criteria, |_| {
        (0..mesh.levels)
            .map(|l| {
                let inp = build(l)?;
                Ok(Sample::from(rag_defect(&inp.vf, &inp.path, inp.f.clone(), &inp.rz)?))
            })
            .collect()
    })
}

/// Components of a strongly controlled rough semimartingale
/// `Y = Y_0 + ∫Ẏ ds + M + ∫(∂_X Y, ∂²_X Y; N) d𝐗`.
///
/// `∂_X Y` has shape `(n, d)` and martingale part `N` (a vector sample with
/// `n·d` components in row-major order); `∂²_X Y` is the Gubinelli derivative
/// of `∂_X Y − N` with the `δX` slot last.
#[derive(Debug, Clone)]
pub struct ScrsmSpec {
    pub y0: Tensor,
    pub ydot: GridPath,
    pub dxy: GridPath,
    pub dxxy: GridPath,
    pub m: MartingaleSample,
    pub n: MartingaleSample,
    pub rx: RoughPath,
}

/// A strongly controlled rough semimartingale on a grid.
#[derive(Debug, Clone)]
pub struct ScRSM {
    y: GridPath,
    dxy: GridPath,
    dxxy: GridPath,
    ydot: GridPath,
    m: MartingaleSample,
    n: MartingaleSample,
    rx: RoughPath,
}

fn check_scrsm_shapes(
    y0: &Tensor,
    ydot: &GridPath,
    dxy: &GridPath,
    dxxy: &GridPath,
    m: &MartingaleSample,
    n: &MartingaleSample,
    rx: &RoughPath,
) -> Result<()> {
    let g = rx.grid();
    if [ydot.grid(), dxy.grid(), dxxy.grid(), m.grid(), n.grid()].iter().any(|x| *x != g) {
        return shape_err("scRSM components live on different grids");
    }
    let (dim, d) = match y0.shape() {
        [dim] => (*dim, rx.dim()),
        s => return shape_err(format!("scRSM state must be a vector, got {s:?}")),
    };
    if ydot.shape() != [dim] || dxy.shape() != [dim, d] || dxxy.shape() != [dim, d, d] {
        return shape_err(format!("scRSM with state ({dim},) and driver {d} has inconsistent components"));
    }
    if m.dim() != dim || n.dim() != dim * d {
        return shape_err("scRSM martingale parts have the wrong dimension");
    }
    Ok(())
}

fn decomposition(
    y0: &Tensor,
    ydot: &GridPath,
    dxy: &GridPath,
    dxxy: &GridPath,
    m: &MartingaleSample,
    n: &MartingaleSample,
    rx: &RoughPath,
) -> Result<GridPath> {
    let g = *rx.grid();
    let drift = rs_integral(ydot, &time_path(g))?;
    let rsi = rough_stochastic_integral(dxy, dxxy, n, rx)?;
    let m0 = m.path().first();
    GridPath::from_fn(g, |k, _| {
        let mut v = y0 + drift.value(k);
        v += &(m.path().value(k) - m0);
        v += rsi.value(k);
        v
    })
}

impl ScRSM {
    /// Checks that `y` satisfies the defining decomposition within `tol`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        y: GridPath,
        dxy: GridPath,
        dxxy: GridPath,
        ydot: GridPath,
        m: MartingaleSample,
        n: MartingaleSample,
        rx: RoughPath,
        tol: f64,
    ) -> Result<Self> {
        if y.grid() != rx.grid() {
            return shape_err("scRSM path and rough path live on different grids");
        }
        check_scrsm_shapes(y.first(), &ydot, &dxy, &dxxy, &m, &n, &rx)?;
        let s = Self { y, dxy, dxxy, ydot, m, n, rx };
        let defect = s.decomposition_defect()?;
        if defect.is_nan() || defect > tol {
            return Err(Error::Invalid(format!("scRSM decomposition defect {defect:e} exceeds {tol:e}")));
        }
        Ok(s)
    }

    /// `max_t |Y_t − Y_0 − ∫Ẏ − (M_t − M_0) − RSI_t|`.
    pub fn decomposition_defect(&self) -> Result<f64> {
        let d = decomposition(self.y.first(), &self.ydot, &self.dxy, &self.dxxy, &self.m, &self.n, &self.rx)?;
        Ok((0..self.y.grid().n_nodes()).map(|k| max_abs_diff(self.y.value(k), d.value(k))).fold(0.0, f64::max))
    }

    pub fn y(&self) -> &GridPath {
        &self.y
    }

    pub fn dxy(&self) -> &GridPath {
        &self.dxy
    }

    pub fn dxxy(&self) -> &GridPath {
        &self.dxxy
    }

    pub fn ydot(&self) -> &GridPath {
        &self.ydot
    }

    pub fn m(&self) -> &MartingaleSample {
        &self.m
    }

    pub fn n(&self) -> &MartingaleSample {
        &self.n
    }

    pub fn rx(&self) -> &RoughPath {
        &self.rx
    }

    pub fn grid(&self) -> &TimeGrid {
        self.y.grid()
    }

    pub fn state_dim(&self) -> usize {
        self.y.shape()[0]
    }

    /// `(Y, ∂_X Y, ∂²_X Y, Ẏ)` in the strongly controlled layout.
    pub fn controlled_jet(&self) -> Result<StronglyControlledPath> {
        StronglyControlledPath::new(
            self.y.clone(),
            self.dxy.clone(),
            self.dxxy.map(|_, v| v.transpose_last2())?,
            self.ydot.clone(),
        )
    }
}

/// Assembles `Y` by the defining formula.
pub fn build_scrsm(spec: ScrsmSpec) -> Result<ScRSM> {
    check_scrsm_shapes(&spec.y0, &spec.ydot, &spec.dxy, &spec.dxxy, &spec.m, &spec.n, &spec.rx)?;
    let y = decomposition(&spec.y0, &spec.ydot, &spec.dxy, &spec.dxxy, &spec.m, &spec.n, &spec.rx)?;
    ScRSM::new(y, spec.dxy, spec.dxxy, spec.ydot, spec.m, spec.n, spec.rx, SCRSM_TOL)
}

/// `G_t(x) = Σ_{t_m < t} w_m β(x) δW_m` for a spatial map
/// `β: R^n → L(R^{d_W}; R^{d_H})` and an adapted scalar weight `w`.
#[derive(Debug, Clone)]
pub struct MartingaleField {
    beta: Arc<dyn SmoothMap>,
    w: GridPath,
    weight: GridPath,
    integral: GridPath,
}

pub fn martingale_field(beta: Arc<dyn SmoothMap>, w: &GridPath) -> Result<MartingaleField> {
    martingale_field_weighted(beta, w, &GridPath::constant(*w.grid(), Tensor::scalar(1.0)))
}

pub fn martingale_field_weighted(beta: Arc<dyn SmoothMap>, w: &GridPath, weight: &GridPath) -> Result<MartingaleField> {
    let bs = beta.out_shape();
    if w.shape().len() != 1 || bs.len() != 2 || bs[1] != w.shape()[0] {
        return shape_err(format!("β must take values in (d_H, {:?}), got {bs:?}", w.shape()));
    }
    if weight.grid() != w.grid() || !weight.shape().is_empty() {
        return shape_err("weight must be a scalar path on the driver grid");
    }
    let dw = w.shape()[0];
    let phi = weight.map(|_, v| Tensor::identity(dw).scale(v.item()))?;
    let integral = ito_integral(&phi, w)?;
    Ok(MartingaleField { beta, w: w.clone(), weight: weight.clone(), integral })
}

impl MartingaleField {
    pub fn grid(&self) -> &TimeGrid {
        self.w.grid()
    }

    pub fn domain(&self) -> usize {
        self.beta.in_dim()
    }

    pub fn codomain(&self) -> usize {
        self.beta.out_shape()[0]
    }

    pub fn w(&self) -> &GridPath {
        &self.w
    }

    pub fn weight(&self) -> &GridPath {
        &self.weight
    }

    /// `[β, Dβ, …]` at `x` with the `W` slot moved last: `D^lβ` has shape
    /// `(d_H, n^l, d_W)`.
    pub fn beta_derivs(&self, x: &Tensor, order: usize) -> Result<Vec<Tensor>> {
        Ok(self
            .beta
            .derivs(x, order)?
            .into_iter()
            .map(|t| {
                let r = t.ndim();
                let mut perm: Vec<usize> = vec![0];
                perm.extend(2..r);
                perm.push(1);
                t.permute(&perm)
            })
            .collect())
    }

    /// `[G_k(x), DG_k(x), D²G_k(x)]`.
    pub fn eval(&self, k: usize, x: &Tensor) -> Result<[Tensor; 3]> {
        if k > self.grid().n_steps() {
            return Err(Error::Index(format!("time index {k} beyond {}", self.grid().n_steps())));
        }
        let i = self.integral.value(k);
        let b = self.beta_derivs(x, 2)?;
        Ok([b[0].contract(i, 1)?, b[1].contract(i, 1)?, b[2].contract(i, 1)?])
    }

    /// `(G, 0, DG, 0, 0, D²G, 0)` as a jet over a driver of dimension `driver`.
    pub fn jet(&self, k: usize, x: &Tensor, driver: usize) -> Result<Jet> {
        let [g, dg, d2g] = self.eval(k, x)?;
        let mut j = Jet::zeros(&JetDims::new(driver, self.domain(), vec![self.codomain()]));
        j.f = g;
        j.df = dg;
        j.d2f = d2g;
        Ok(j)
    }
}

/// Right-hand-side terms of the rough stochastic Itô–Wentzell identity that
/// can be dropped for negative controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RsiwTerms {
    /// `½∫∂²H d⟨M⟩`.
    pub bracket_m: bool,
    /// `⟨∫Dβ(Y) dW, M⟩`.
    pub covariation: bool,
}

impl Default for RsiwTerms {
    fn default() -> Self {
        Self { bracket_m: true, covariation: true }
    }
}

struct NodeTerms {
    value: Tensor,
    zp: Tensor,
    zpp_t: Tensor,
    drift: Tensor,
    corr_x: Tensor,
    corr_m: Tensor,
    ito: Tensor,
    dn: Option<Tensor>,
    g_inc: Option<Tensor>,
    cov_inc: Option<Tensor>,
}

/// Pathwise defect of `H_t(Y_t) − H_0(Y_0)` for `H = F + G` against
///
/// `∫(Z′, Z″; Ñ)d𝐗 + ∫∂H dM + ∫w β(Y) dW + ∫(Ḟ + ∂H Ẏ)dr
///  + ∫(∂F′Y′ + ½∂²H(Y′, Y′))d[𝐗] + ½∫∂²H d⟨M⟩ + ⟨∫w Dβ(Y) dW, M⟩`,
///
/// with `Y′ = ∂_X Y`, `Z′ = F′ + ∂H Y′`,
/// `Z″ = F″ + ∂F′Y′ + (∂F′Y′)^⊤ + ∂²H(Y′, Y′) + ∂H ∂²_X Y` and `Ñ` the
/// martingale part of `Z′`, whose increments are
/// `∂H δN + ∂F′(δM, ·) + ∂²H(Y′ ·, δM) + w Dβ(Y)(Y′ ·) δW`.
/// The `d⟨M⟩` term uses the bracket carried by `M`; the covariation is the
/// realized sum `Σ w Dβ(Y)(δM) δW`.
pub fn total_rsiw_defect(f: Option<&dyn JetField>, g: Option<&MartingaleField>, y: &ScRSM, terms: RsiwTerms) -> Result<f64> {
    let grid = *y.grid();
    let (n, d) = (y.state_dim(), y.rx().dim());
    let codomain = match (f, g) {
        (None, None) => return Err(Error::Invalid("total rsIW needs at least one of F and G".into())),
        (Some(f), _) => f.dims().codomain.clone(),
        (None, Some(g)) => vec![g.codomain()],
    };
    if let Some(f) = f {
        let dims = f.dims();
        if f.grid() != &grid || dims.domain != n || dims.driver != d {
            return shape_err("field does not match the scRSM grid, state or driver");
        }
    }
    if let Some(g) = g {
        if g.grid() != &grid || g.domain() != n || codomain != [g.codomain()] {
            return shape_err("martingale field does not match the scRSM or the field codomain");
        }
    }
    let r = codomain.len();
    let dims = JetDims::new(d, n, codomain.clone());
    let ns = grid.n_steps();
    let nodes = (0..grid.n_nodes())
        .into_par_iter()
        .map(|k| {
            let yk = y.y().value(k);
            let yp = y.dxy().value(k);
            let mut jet = match f {
                Some(f) => f.eval(k, yk)?,
                None => Jet::zeros(&dims),
            };
            let beta = match g {
                Some(g) => {
                    let gj = g.jet(k, yk, d)?;
                    jet.f += &gj.f;
                    jet.df += &gj.df;
                    jet.d2f += &gj.d2f;
                    Some(g.beta_derivs(yk, 1)?)
                }
                None => None,
            };
            let t = jet.dfp.map_axis(r, yp)?;
            let hess = jet.d2f.map_axis(r, yp)?.map_axis(r + 1, yp)?;
            let zp = &jet.fp + &jet.df.compose(yp)?;
            let ypp = y.dxxy().value(k).transpose_last2();
            let zpp = &(&(&(&jet.fpp + &t) + &t.transpose_last2()) + &hess) + &jet.df.compose(&ypp)?;
            let drift = &jet.fdot + &jet.df.compose(y.ydot().value(k))?;
            let mut corr_x = t;
            corr_x.axpy(0.5, &hess);
            let corr_m = jet.d2f.scale(0.5);
            let (mut dn, mut g_inc, mut cov_inc) = (None, None, None);
            if k < ns {
                let dm = y.m().path().step(k);
                let dnk = y.n().path().step(k).reshape(vec![n, d])?;
                let mut inc = jet.df.compose(&dnk)?;
                inc += &jet.dfp.transpose_last2().contract(&dm, 1)?;
                inc += &jet.d2f.contract(&dm, 1)?.compose(yp)?;
                if let (Some(g), Some(b)) = (g, &beta) {
                    let wk = g.weight().value(k).item();
                    let dw = g.w().step(k);
                    inc.axpy(wk, &b[1].map_axis(1, yp)?.contract(&dw, 1)?);
                    g_inc = Some(b[0].contract(&dw, 1)?.scale(wk));
                    cov_inc = Some(b[1].contract(&dw, 1)?.contract(&dm, 1)?.scale(wk));
                }
                dn = Some(inc);
            }
            Ok(NodeTerms { value: jet.f, zp, zpp_t: zpp.transpose_last2(), drift, corr_x, corr_m, ito: jet.df, dn, g_inc, cov_inc })
        })
        .collect::<Result<Vec<NodeTerms>>>()?;

    let path = |sel: &dyn Fn(&NodeTerms) -> Tensor| GridPath::new(grid, nodes.iter().map(sel).collect());
    let running = |sel: &dyn Fn(&NodeTerms) -> Option<Tensor>, shape: &[usize]| -> Result<GridPath> {
        let mut acc = Tensor::zeros(shape);
        let mut values = Vec::with_capacity(grid.n_nodes());
        values.push(acc.clone());
        for node in &nodes[..ns] {
            if let Some(inc) = sel(node) {
                acc += &inc;
            }
            values.push(acc.clone());
        }
        GridPath::new(grid, values)
    };
    let zp_shape: Vec<usize> = nodes[0].zp.shape().to_vec();
    let zp_len: usize = zp_shape.iter().product();
    let n_tilde = running(&|t| t.dn.clone().map(|v| v.reshape(vec![zp_len]).expect("flatten")), &[zp_len])?;
    let rsi = rough_stochastic_integral(&path(&|t| t.zp.clone())?, &path(&|t| t.zpp_t.clone())?, &MartingaleSample::realized(n_tilde)?, y.rx())?;
    let ito = ito_integral(&path(&|t| t.ito.clone())?, y.m().path())?;
    let drift = rs_integral(&path(&|t| t.drift.clone())?, &time_path(grid))?;
    let bx = rs_integral(&path(&|t| t.corr_x.clone())?, bracket(y.rx()).path())?;
    let bm = rs_integral(&path(&|t| t.corr_m.clone())?, y.m().bracket().path())?;
    let gsum = running(&|t| t.g_inc.clone(), &codomain)?;
    let cov = running(&|t| t.cov_inc.clone(), &codomain)?;

    let v0 = &nodes[0].value;
    let mut defect = 0.0f64;
    for (k, node) in nodes.iter().enumerate() {
        let mut rhs = rsi.value(k) + ito.value(k);
        rhs += drift.value(k);
        rhs += bx.value(k);
        rhs += gsum.value(k);
        if terms.bracket_m {
            rhs += bm.value(k);
        }
        if terms.covariation {
            rhs += cov.value(k);
        }
        defect = defect.max(max_abs_diff(&(&node.value - v0), &rhs));
    }
    Ok(defect)
}

/// Rough stochastic Itô–Wentzell defect for a controlled field.
pub fn rsiw_defect(f: &dyn JetField, y: &ScRSM, terms: RsiwTerms) -> Result<f64> {
    total_rsiw_defect(Some(f), None, y, terms)
}

/// Rough stochastic Itô–Wentzell defect for a martingale field.
pub fn rsiw_martingale_defect(g: &MartingaleField, y: &ScRSM, terms: RsiwTerms) -> Result<f64> {
    total_rsiw_defect(None, Some(g), y, terms)
}

/// Which of the scenario's fields enter the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RsiwVariant {
    Field,
    Martingale,
    Total,
}

/// Rough stochastic Itô–Wentzell scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RsiwKind {
    /// `Y = W`, `∂_X Y = 0`, `F = sin`: the classical Itô formula for `f(W_t)`.
    Classical,
    /// Scalar state, `X` an independent Stratonovich Brownian lift and
    /// `M`, `N`, `G` driven by one Brownian motion `W`:
    /// `M = ∫(0.6 + 0.2 cos W)dW`, `N = ∫0.3 sin W dW`,
    /// `∂_X Y = 0.5 cos X + N`, `Ẏ = 0.3 sin W + 0.1`, `Y_0 = 0.2`;
    /// `F` the forward flow of `dφ = −0.3 sin φ dt + (0.4 + 0.2 cos φ) d𝐗`;
    /// `β = 0.5 sin`, weight `1 + 0.3 cos W`.
    Correlated,
}

/// One replica-level instance of a rough stochastic Itô–Wentzell scenario.
pub struct RsiwCase {
    pub y: ScRSM,
    pub f: Arc<dyn JetField>,
    pub g: MartingaleField,
}

/// Mesh family, replicas and seed of a rough stochastic Itô–Wentzell study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RsiwScenario {
    pub kind: RsiwKind,
    pub mesh: MeshFamily,
    pub replicas: usize,
    pub seed: u64,
}

fn scalar_path(grid: TimeGrid, f: impl Fn(usize) -> Tensor) -> Result<GridPath> {
    GridPath::from_fn(grid, |k, _| f(k))
}

fn scalar_map(phi: ScalarFn, out_shape: Vec<usize>) -> Result<RidgeMap> {
    RidgeMap::new(1, out_shape, vec![RidgeEntry { a: vec![1.0], b: 0.0, phi }])
}

impl RsiwScenario {
    /// All levels of replica `replica`, sharing one Brownian sample per driver.
    pub fn build(&self, replica: usize) -> Result<Vec<RsiwCase>> {
        let seed = rng::replica_seed(self.seed, replica as u64);
        let top = self.mesh.finest_level();
        let w_fine = brownian_level(self.mesh.t_end, self.mesh.base_steps, top, 1, rng::derive_seed(seed, &[TAG_W]))?;
        let x_fam = match self.kind {
            RsiwKind::Classical => None,
            RsiwKind::Correlated => Some(
                DriverSpec::Brownian { dim: 1, lift: LiftKind::Stratonovich, refine: 1 }.family(
                    &self.mesh,
                    top,
                    rng::derive_seed(seed, &[TAG_X]),
                )?,
            ),
        };
        let beta: Arc<dyn SmoothMap> = Arc::new(scalar_map(ScalarFn::Sin { amp: 0.5, freq: 1.0, phase: 0.0, offset: 0.0 }, vec![1, 1])?);
        (0..self.mesh.levels)
            .map(|l| {
                let w = w_fine.subsample(1 << (top - l))?;
                let g = *w.grid();
                let wv = |k: usize| w.value(k).data()[0];
                let weight = scalar_path(g, |k| Tensor::scalar(1.0 + 0.3 * wv(k).cos()))?;
                let gfield = martingale_field_weighted(beta.clone(), &w, &weight)?;
                match &x_fam {
                    None => {
                        let rx = RoughPath::zero(g, 1);
                        let m = MartingaleSample::from_ito(&GridPath::constant(g, Tensor::identity(1)), &w)?;
                        let y = build_scrsm(ScrsmSpec {
                            y0: Tensor::vector(vec![0.0]),
                            ydot: GridPath::zeros(g, &[1]),
                            dxy: GridPath::zeros(g, &[1, 1]),
                            dxxy: GridPath::zeros(g, &[1, 1, 1]),
                            m,
                            n: MartingaleSample::zero(g, 1),
                            rx,
                        })?;
                        let f: Arc<dyn JetField> = Arc::new(SpatialField::new(g, 1, Arc::new(RidgeMap::scalar(ScalarFn::sin()))));
                        Ok(RsiwCase { y, f, g: gfield })
                    }
                    Some(fam) => {
                        let rx = fam.level(l)?;
                        let xv = |k: usize| rx.base().value(k).data()[0];
                        let phi = scalar_path(g, |k| Tensor::matrix(1, 1, vec![0.6 + 0.2 * wv(k).cos()]))?;
                        let psi = scalar_path(g, |k| Tensor::matrix(1, 1, vec![0.3 * wv(k).sin()]))?;
                        let m = MartingaleSample::from_ito(&phi, &w)?;
                        let nm = MartingaleSample::from_ito(&psi, &w)?;
                        let dxy = scalar_path(g, |k| Tensor::matrix(1, 1, vec![0.5 * xv(k).cos() + nm.path().value(k).data()[0]]))?;
                        let dxxy = scalar_path(g, |k| Tensor::new(vec![1, 1, 1], vec![-0.5 * xv(k).sin()]).expect("shape"))?;
                        let ydot = scalar_path(g, |k| Tensor::vector(vec![0.3 * wv(k).sin() + 0.1]))?;
                        let y = build_scrsm(ScrsmSpec { y0: Tensor::vector(vec![0.2]), ydot, dxy, dxxy, m, n: nm, rx: rx.clone() })?;
                        let vf = VectorFieldSpec::Componentwise {
                            drift: vec![ScalarFn::Sin { amp: -0.3, freq: 1.0, phase: 0.0, offset: 0.0 }],
                            diffusion: vec![vec![ScalarFn::Sin { amp: 0.2, freq: 1.0, phase: std::f64::consts::FRAC_PI_2, offset: 0.4 }]],
                        }
                        .build()?;
                        let f: Arc<dyn JetField> = Arc::new(forward_flow_jet(&vf, &rx, 0)?);
                        Ok(RsiwCase { y, f, g: gfield })
                    }
                }
            })
            .collect()
    }
}

/// Refinement study of the rough stochastic Itô–Wentzell identity.
pub fn verify_rsiw_study(
    name: &str,
    sc: &RsiwScenario,
    variant: RsiwVariant,
    terms: RsiwTerms,
    criteria: &PassCriteria,
) -> Result<ConvergenceReport> {
    run_study(name, &sc.mesh.meshes(), sc.replicas, criteria, |r| {
        sc.build(r)?
            .iter()
            .map(|c| {
                let d = match variant {
                    RsiwVariant::Field => rsiw_defect(c.f.as_ref(), &c.y, terms)?,
                    RsiwVariant::Martingale => rsiw_martingale_defect(&c.g, &c.y, terms)?,
                    RsiwVariant::Total => total_rsiw_defect(Some(c.f.as_ref()), Some(&c.g), &c.y, terms)?,
                };
                Ok(Sample::from(d).with("construction_defect", c.y.decomposition_defect()?))
            })
            .collect()
    })
}

pub fn verify_rsiw(name: &str, sc: &RsiwScenario, criteria: &PassCriteria) -> Result<ConvergenceReport> {
    verify_rsiw_study(name, sc, RsiwVariant::Field, RsiwTerms::default(), criteria)
}

pub fn verify_rsiw_martingale(name: &str, sc: &RsiwScenario, criteria: &PassCriteria) -> Result<ConvergenceReport> {
    verify_rsiw_study(name, sc, RsiwVariant::Martingale, RsiwTerms::default(), criteria)
}

pub fn verify_total_rsiw(name: &str, sc: &RsiwScenario, criteria: &PassCriteria) -> Result<ConvergenceReport> {
    verify_rsiw_study(name, sc, RsiwVariant::Total, RsiwTerms::default(), criteria)
}
