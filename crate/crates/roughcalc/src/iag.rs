//! Itô–Alekseev–Gröbner partition sums, the rough forward-backward
//! interpolation formula, piecewise-linear approximation of Stratonovich
//! integrals and the linear-equation identity for the left Malliavin
//! derivative of the flow Jacobian.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controlled::{ControlledPath, Jet, JetField};
use crate::error::{shape_err, Error, Result};
use crate::functions::{RidgeMap, ScalarFn, SmoothMap};
use crate::grid_paths::{GridPath, TimeGrid};
use crate::integration::rough_integral;
use crate::rde_flows::{backward_flow_jet, rde_solve, solve_flow, BackwardFlowField, VectorFieldPair, VectorFieldSpec};
use crate::rng;
use crate::rough_lift::{brownian_level, ito_lift, stratonovich_lift, DriverFamily, LiftKind, RoughPath};
use crate::stochastic_formulas::{run_study, ConvergenceReport, DriverSpec, MeshFamily, PassCriteria, Sample};
use crate::tensor::Tensor;

/// `F̄_t(x) = f(X̄^{t,x}_T)`: the backward flow field of `(μ, σ)` along the
/// chosen lift of the realized sample `w` (areas on the sample grid).
pub fn terminal_field_realized(
    vf: &VectorFieldPair,
    f: Arc<dyn SmoothMap>,
    w: &GridPath,
    kind: LiftKind,
) -> Result<BackwardFlowField> {
    let rz = match kind {
        LiftKind::Ito => ito_lift(w, 1, 0)?,
        LiftKind::Stratonovich => stratonovich_lift(w, 1, 0)?,
    };
    backward_flow_jet(vf, &rz, f)
}

/// Terms of the partition decomposition on one path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IagPartition {
    /// `F̄_T(Y_T) − F̄_0(Y_0)`.
    pub lhs: f64,
    /// `Σ_i (Δ̄_{i,1} − Δ̃̄_{i,1})`.
    pub s_pi: f64,
    /// `Σ_i (Δ̄_{i,2} − Δ̃̄_{i,2})`.
    pub l_pi: f64,
    /// `lhs − L^π − S^π`.
    pub defect: f64,
}

fn first(t: &Tensor) -> f64 {
    t.data()[0]
}

/// `Dφ b + ½ D²φ(β, β)` with the quadratic variation rate `Id` of `W`.
fn generator(jet: &Jet, drift: &Tensor, diffusion: &Tensor, id: &Tensor) -> Result<f64> {
    let r = jet.f.ndim();
    let hess = jet.d2f.map_axis(r, diffusion)?.map_axis(r + 1, diffusion)?;
    Ok(first(&jet.df.compose(drift)?) + 0.5 * first(&hess.contract(id, 2)?))
}

fn check_terminal(f: &dyn SmoothMap, vf: &VectorFieldPair) -> Result<()> {
    if f.in_dim() != vf.state_dim() || f.out_shape().iter().product::<usize>() != 1 {
        return shape_err(format!("terminal function must map R^{} to R", vf.state_dim()));
    }
    Ok(())
}

/// Partition sums on the grid of `rz` (an Itô lift of `W`).
///
/// `Y` is stepped from `y0` with the same scheme as the flow, using the drift
/// and diffusion pair `process = (b, β)`. On `[t_i, t_{i+1})` the sums are
/// `Δ̄_{i,1} = Σ DF̄_{t_{i+1}}(Y_r)β_r δW_r`,
/// `Δ̄_{i,2} = Σ (DF̄_{t_{i+1}}(Y_r)b_r + ½D²F̄_{t_{i+1}}(Y_r)(β_r, β_r))Δ` and
/// the same with `(σ, μ)` along `X̃ = X̄^{t_i, Y_{t_i}}`.
pub fn iag_partition_sum(
    vf: &VectorFieldPair,
    f: Arc<dyn SmoothMap>,
    process: &VectorFieldPair,
    y0: &Tensor,
    rz: &RoughPath,
    intervals: usize,
) -> Result<IagPartition> {
    check_terminal(f.as_ref(), vf)?;
    if process.state_dim() != vf.state_dim() || process.driver_dim() != vf.driver_dim() {
        return shape_err("process and flow fields must have the same dimensions");
    }
    let g = *rz.grid();
    let n = g.n_steps();
    if intervals == 0 || !n.is_multiple_of(intervals) {
        return Err(Error::Invalid(format!("{intervals} partition intervals do not divide {n} steps")));
    }
    let field = backward_flow_jet(vf, rz, f)?;
    let y = rde_solve(process, rz, 0, y0)?;
    let id = Tensor::identity(vf.driver_dim());
    let dt = g.dt();
    let block = n / intervals;
    let (mut s_pi, mut l_pi) = (0.0, 0.0);
    for i in 0..intervals {
        let (a, b) = (i * block, (i + 1) * block);
        let tilde = solve_flow(vf, rz, a, b, y.value(a), 0)?;
        for k in a..b {
            let dw = rz.step(k);
            let (yk, xk) = (y.value(k), tilde.state(k));
            let (jy, jx) = (field.eval(b, yk)?, field.eval(b, xk)?);
            let (beta, sig) = (process.sigma(yk)?, vf.sigma(xk)?);
            let m_y = first(&jy.df.compose(&beta)?.contract(&dw, 1)?);
            let m_x = first(&jx.df.compose(&sig)?.contract(&dw, 1)?);
            s_pi += m_y - m_x;
            let l_y = generator(&jy, &process.mu(yk)?, &beta, &id)?;
            let l_x = generator(&jx, &vf.mu(xk)?, &sig, &id)?;
            l_pi += (l_y - l_x) * dt;
        }
    }
    let lhs = first(&field.eval(n, y.last())?.f) - first(&field.eval(0, y0)?.f);
    Ok(IagPartition { lhs, s_pi, l_pi, defect: lhs - l_pi - s_pi })
}

/// Itô process `dY = b dt + β dW` of an IAG scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProcessSpec {
    /// `(b, β) = (μ, σ)(Y)`: `Y` is the scheme flow itself.
    SchemeFlow,
    /// `(b, β)` given as a drift and diffusion pair evaluated along `Y`.
    Field { field: VectorFieldSpec },
}

/// IAG scenario on a dyadic mesh family driven by the Itô lift of `W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IagScenario {
    pub vf: VectorFieldSpec,
    /// Terminal function applied to the first coordinate.
    pub f: ScalarFn,
    pub process: ProcessSpec,
    pub y0: Vec<f64>,
    pub mesh: MeshFamily,
    /// Number of partition intervals; must divide every level's step count.
    pub intervals: usize,
    pub replicas: usize,
    pub seed: u64,
}

struct IagParts {
    vf: VectorFieldPair,
    f: Arc<dyn SmoothMap>,
    process: VectorFieldPair,
    y0: Tensor,
}

impl IagScenario {
    /// `μ(x) = −x`, `σ(x) = 1 + 0.1 sin x`, `f = tanh`, `Y_0 = 0.3`.
    pub fn default_1d(process: ProcessSpec, mesh: MeshFamily, replicas: usize, seed: u64) -> Self {
        Self {
            vf: default_vf(),
            f: ScalarFn::tanh(),
            process,
            y0: vec![0.3],
            mesh,
            intervals: 4,
            replicas,
            seed,
        }
    }

    fn parts(&self) -> Result<IagParts> {
        let vf = self.vf.build()?;
        let n = vf.state_dim();
        if self.y0.len() != n {
            return Err(Error::Config(format!("y0 must have {n} entries")));
        }
        let f: Arc<dyn SmoothMap> = Arc::new(RidgeMap::first_coordinate(n, self.f.clone())?);
        let process = match &self.process {
            ProcessSpec::SchemeFlow => vf.clone(),
            ProcessSpec::Field { field } => field.build()?,
        };
        Ok(IagParts { vf, f, process, y0: Tensor::vector(self.y0.clone()) })
    }

    fn family(&self, replica: usize) -> Result<DriverFamily> {
        self.mesh.validate()?;
        let d = self.vf.build()?.driver_dim();
        let seed = rng::replica_seed(self.seed, replica as u64);
        DriverFamily::brownian(self.mesh.t_end, self.mesh.base_steps, self.mesh.finest_level(), d, 1, LiftKind::Ito, seed)
    }

    /// Partition terms of one replica on every level.
    pub fn partitions(&self, replica: usize, intervals: impl Fn(usize) -> usize) -> Result<Vec<IagPartition>> {
        let p = self.parts()?;
        let fam = self.family(replica)?;
        (0..self.mesh.levels)
            .map(|l| iag_partition_sum(&p.vf, p.f.clone(), &p.process, &p.y0, &fam.level(l)?, intervals(l)))
            .collect()
    }
}

/// `μ(x) = −x`, `σ(x) = 1 + 0.1 sin x`.
pub fn default_vf() -> VectorFieldSpec {
    VectorFieldSpec::Componentwise {
        drift: vec![ScalarFn::linear(-1.0, 0.0)],
        diffusion: vec![vec![ScalarFn::Sin { amp: 0.1, freq: 1.0, phase: 0.0, offset: 1.0 }]],
    }
}

/// Refinement study of the per-path defect `|lhs − L^π − S^π|` with a fixed
/// partition.
pub fn verify_iag_partition(name: &str, sc: &IagScenario, criteria: &PassCriteria) -> Result<ConvergenceReport> {
    sc.parts()?;
    run_study(name, &sc.mesh.meshes(), sc.replicas, criteria, |r| {
        Ok(sc
            .partitions(r, |_| sc.intervals)?
            .into_iter()
            .map(|p| Sample::from(p.defect.abs()).with("abs_s_pi", p.s_pi.abs()).with("abs_l_pi", p.l_pi.abs()))
            .collect())
    })
}

/// Two-sided `3σ` test of `𝔼[S^π] = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenteringReport {
    pub level: usize,
    pub mesh: f64,
    pub replicas: usize,
    pub mean: f64,
    pub std_err: f64,
    /// `mean / std_err`.
    pub z: f64,
    pub pass: bool,
}

/// Monte Carlo mean of `S^π` on one level of the scenario.
pub fn iag_centering(sc: &IagScenario, level: usize) -> Result<CenteringReport> {
    if level >= sc.mesh.levels {
        return Err(Error::Invalid(format!("level {level} outside the mesh family")));
    }
    let p = sc.parts()?;
    let s: Vec<f64> = (0..sc.replicas)
        .into_par_iter()
        .map(|r| {
            let run = || -> Result<f64> {
                let rz = sc.family(r)?.level(level)?;
                Ok(iag_partition_sum(&p.vf, p.f.clone(), &p.process, &p.y0, &rz, sc.intervals)?.s_pi)
            };
            run().map_err(|e| Error::Replica { replica: r, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;
    let (mean, std_err) = rng::mean_and_se(&s);
    let z = if std_err > 0.0 { mean / std_err } else { 0.0 };
    Ok(CenteringReport {
        level,
        mesh: sc.mesh.meshes()[level],
        replicas: sc.replicas,
        mean,
        std_err,
        z,
        pass: mean.abs() <= 3.0 * std_err || mean == 0.0,
    })
}

/// One mesh of the weak IAG identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakRow {
    pub mesh: f64,
    pub lhs_mean: f64,
    pub lhs_se: f64,
    pub rhs_mean: f64,
    pub rhs_se: f64,
    /// Mean and standard error of the paired difference `lhs − rhs`.
    pub diff_mean: f64,
    pub diff_se: f64,
    /// `3 · diff_se + c · Δ^{1/2}`.
    pub tolerance: f64,
    pub pass: bool,
}

/// Weak identity `𝔼[F̄_T(Y_T) − F̄_0(Y_0)] = 𝔼[∫DF̄(b − μ) + ½D²F̄((β,β) − (σ,σ)) dr]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakIdentityReport {
    pub name: String,
    pub replicas: usize,
    pub c: f64,
    pub rows: Vec<WeakRow>,
    pub pass: bool,
}

impl WeakIdentityReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["mesh", "lhs_mean", "lhs_se", "rhs_mean", "rhs_se", "diff_mean", "diff_se", "tolerance", "pass"])?;
        for r in &self.rows {
            w.write_record([
                r.mesh.to_string(),
                r.lhs_mean.to_string(),
                r.lhs_se.to_string(),
                r.rhs_mean.to_string(),
                r.rhs_se.to_string(),
                r.diff_mean.to_string(),
                r.diff_se.to_string(),
                r.tolerance.to_string(),
                r.pass.to_string(),
            ])?;
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

/// Monte Carlo check of the weak identity on every level. The right-hand side
/// is `L^π` on the one-step partition, where `X̃_r = Y_r`.
pub fn verify_iag_weak(name: &str, sc: &IagScenario, c: f64) -> Result<WeakIdentityReport> {
    sc.parts()?;
    if sc.replicas < 2 {
        return Err(Error::Invalid("the weak identity needs at least two replicas".into()));
    }
    let per: Vec<Vec<IagPartition>> = (0..sc.replicas)
        .into_par_iter()
        .map(|r| sc.partitions(r, |l| sc.mesh.steps(l)).map_err(|e| Error::Replica { replica: r, source: Box::new(e) }))
        .collect::<Result<_>>()?;
    let rows: Vec<WeakRow> = sc
        .mesh
        .meshes()
        .into_iter()
        .enumerate()
        .map(|(l, mesh)| {
            let col = |f: &dyn Fn(&IagPartition) -> f64| per.iter().map(|p| f(&p[l])).collect::<Vec<f64>>();
            let (lhs_mean, lhs_se) = rng::mean_and_se(&col(&|p| p.lhs));
            let (rhs_mean, rhs_se) = rng::mean_and_se(&col(&|p| p.l_pi));
            let (diff_mean, diff_se) = rng::mean_and_se(&col(&|p| p.lhs - p.l_pi));
            let tolerance = 3.0 * diff_se + c * mesh.sqrt();
            WeakRow { mesh, lhs_mean, lhs_se, rhs_mean, rhs_se, diff_mean, diff_se, tolerance, pass: diff_mean.abs() <= tolerance }
        })
        .collect();
    let pass = rows.iter().all(|r| r.pass);
    Ok(WeakIdentityReport { name: name.to_string(), replicas: sc.replicas, c, rows, pass })
}

/// Both sides of the interpolation formula on `[s, t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationDefect {
    /// `X̂_{t←s}(x) − X_{t←s}(x)`.
    pub lhs: Tensor,
    pub rhs: Tensor,
    pub defect: f64,
}

/// `X̂_{t←s}(x) − X_{t←s}(x) = ∫D_xX_{t←u}(X̂_u)(μ̂ − μ)(X̂_u)du + ∫φ_u d𝐙_u`
/// with `φ_u = D_xX_{t←u}(X̂_u)(σ̂ − σ)(X̂_u)` and Gubinelli derivative
/// `φ′ = D²_xX_{t←u}(h, σ̂ − σ) + D_xX_{t←u}((Dh)σ̂ − (Dσ)h)`, `h = σ̂ − σ`,
/// assembled from flow Jacobians and Hessians. The driver should be geometric.
pub fn interpolation_formula(
    vf: &VectorFieldPair,
    vf_hat: &VectorFieldPair,
    rz: &RoughPath,
    x: &Tensor,
    s: usize,
    t: usize,
) -> Result<InterpolationDefect> {
    if vf.state_dim() != vf_hat.state_dim() || vf.driver_dim() != vf_hat.driver_dim() {
        return shape_err("both field pairs must have the same dimensions");
    }
    let g = *rz.grid();
    if s > t || t > g.n_steps() {
        return Err(Error::Index(format!("interval [{s}, {t}] outside the grid")));
    }
    let (n, d) = (vf.state_dim(), vf.driver_dim());
    let xhat = solve_flow(vf_hat, rz, s, t, x, 0)?;
    let lhs = xhat.state(t) - solve_flow(vf, rz, s, t, x, 0)?.state(t);
    let terms = (s..t)
        .into_par_iter()
        .map(|u| {
            let y = xhat.state(u);
            let fp = solve_flow(vf, rz, u, t, y, 2)?;
            let (jac, hes) = (fp.jacobian(t), fp.hessian(t));
            let sig = vf.sigma_derivs(y, 1)?;
            let sig_hat = vf_hat.sigma_derivs(y, 1)?;
            let h = &sig_hat[0] - &sig[0];
            let dh = &sig_hat[1] - &sig[1];
            let leb = jac.compose(&(&vf_hat.mu(y)? - &vf.mu(y)?))?;
            let phi = jac.compose(&h)?;
            let mut dphi = hes.map_axis(1, &h)?.map_axis(2, &h)?;
            dphi += &jac.compose(&dh.map_axis(2, &sig_hat[0])?)?;
            dphi -= &jac.compose(&sig[1].map_axis(2, &h)?.transpose_last2())?;
            Ok((leb, phi, dphi))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut phi = vec![Tensor::zeros(&[n, d]); g.n_nodes()];
    let mut dphi = vec![Tensor::zeros(&[n, d, d]); g.n_nodes()];
    let mut rhs = Tensor::zeros(&[n]);
    for (u, (leb, p, dp)) in (s..t).zip(terms) {
        rhs.axpy(g.dt(), &leb);
        phi[u] = p;
        dphi[u] = dp;
    }
    let cp = ControlledPath::new(GridPath::new(g, phi)?, GridPath::new(g, dphi)?)?;
    rhs += &rough_integral(&cp, rz, s, t)?;
    let defect = (&lhs - &rhs).max_abs();
    Ok(InterpolationDefect { lhs, rhs, defect })
}

/// Refinement study of the interpolation formula on `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolationScenario {
    pub vf: VectorFieldSpec,
    pub vf_hat: VectorFieldSpec,
    pub driver: DriverSpec,
    pub mesh: MeshFamily,
    pub x0: Vec<f64>,
    pub replicas: usize,
    pub seed: u64,
}

pub fn verify_interpolation(name: &str, sc: &InterpolationScenario, criteria: &PassCriteria) -> Result<ConvergenceReport> {
    let (vf, vf_hat) = (sc.vf.build()?, sc.vf_hat.build()?);
    if sc.driver.dim() != vf.driver_dim() || sc.x0.len() != vf.state_dim() {
        return Err(Error::Config("driver or initial point does not match the vector fields".into()));
    }
    let x0 = Tensor::vector(sc.x0.clone());
    run_study(name, &sc.mesh.meshes(), sc.replicas, criteria, |r| {
        let fam = sc.driver.family(&sc.mesh, sc.mesh.finest_level(), rng::replica_seed(sc.seed, r as u64))?;
        (0..sc.mesh.levels)
            .map(|l| {
                let rz = fam.level(l)?;
                let n = rz.grid().n_steps();
                Ok(Sample::from(interpolation_formula(&vf, &vf_hat, &rz, &x0, 0, n)?.defect))
            })
            .collect()
    })
}

/// Classical integrals against piecewise-linear skeletons compared with the
/// rough Stratonovich integral.
#[derive(Debug, Clone, PartialEq)]
pub struct GoodApproximation {
    pub rough: Tensor,
    pub classical: Vec<Tensor>,
    pub differences: Vec<f64>,
}

/// `w` sampled on the integrand's grid; `skeletons` are step counts of the
/// piecewise-linear interpolations, each dividing the fine step count. The
/// classical integral `∫φ Ż^m du` uses `φ` linear between fine nodes.
pub fn good_approximation_check(w: &GridPath, integrand: &ControlledPath, skeletons: &[usize]) -> Result<GoodApproximation> {
    let g = *w.grid();
    if integrand.grid() != &g {
        return shape_err("integrand and sample must share a grid");
    }
    let rx = stratonovich_lift(w, 1, 0)?;
    let n = g.n_steps();
    let rough = rough_integral(integrand, &rx, 0, n)?;
    let phi = integrand.y();
    let mut classical = Vec::with_capacity(skeletons.len());
    for &m in skeletons {
        if m == 0 || !n.is_multiple_of(m) {
            return Err(Error::Invalid(format!("skeleton of {m} steps does not divide {n}")));
        }
        let factor = n / m;
        let z = |k: usize| -> Tensor {
            let (j, r) = (k / factor, k % factor);
            if r == 0 {
                return w.value(k).clone();
            }
            let (a, b) = (w.value(j * factor), w.value((j + 1) * factor));
            let mut v = a.clone();
            v.axpy(r as f64 / factor as f64, &(b - a));
            v
        };
        let mut acc = Tensor::zeros(rough.shape());
        let mut prev = z(0);
        for k in 0..n {
            let next = z(k + 1);
            let mid = (phi.value(k) + phi.value(k + 1)).scale(0.5);
            acc += &mid.contract(&(&next - &prev), 1)?;
            prev = next;
        }
        classical.push(acc);
    }
    let differences = classical.iter().map(|c| (c - &rough).max_abs()).collect();
    Ok(GoodApproximation { rough, classical, differences })
}

/// Integrands of the good-approximation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GoodIntegrand {
    /// `φ ≡ value` with values in `R^{1×d}`.
    Constant { value: f64 },
    /// `φ^{ijk} = W^i δ_{jk}`, so that `∫φ ∘ dW` is `∫W ⊗ ∘dW`.
    Brownian,
    /// `φ = σ(X)`, `φ′ = (Dσ σ)(X)` along the Stratonovich solution.
    Rde { vf: VectorFieldSpec, x0: Vec<f64> },
}

impl GoodIntegrand {
    pub fn build(&self, w: &GridPath) -> Result<ControlledPath> {
        let g = *w.grid();
        let d = w.shape()[0];
        match self {
            Self::Constant { value } => ControlledPath::new(
                GridPath::constant(g, Tensor::from_fn(&[1, d], |_| *value)),
                GridPath::zeros(g, &[1, d, d]),
            ),
            Self::Brownian => {
                let y = w.map(|_, v| Tensor::from_fn(&[d, d, d], |ix| if ix[1] == ix[2] { v.data()[ix[0]] } else { 0.0 }))?;
                let yp = Tensor::from_fn(&[d, d, d, d], |ix| if ix[1] == ix[2] && ix[0] == ix[3] { 1.0 } else { 0.0 });
                ControlledPath::new(y, GridPath::constant(g, yp))
            }
            Self::Rde { vf, x0 } => {
                let vf = vf.build()?;
                if vf.driver_dim() != d || x0.len() != vf.state_dim() {
                    return Err(Error::Config("integrand field does not match the sample".into()));
                }
                let x = rde_solve(&vf, &stratonovich_lift(w, 1, 0)?, 0, &Tensor::vector(x0.clone()))?;
                let mut ys = Vec::with_capacity(g.n_nodes());
                let mut yps = Vec::with_capacity(g.n_nodes());
                for v in x.values() {
                    ys.push(vf.sigma(v)?);
                    yps.push(vf.gamma_sigma(v)?.transpose_last2());
                }
                ControlledPath::new(GridPath::new(g, ys)?, GridPath::new(g, yps)?)
            }
        }
    }
}

/// Good-approximation study: one fine Brownian sample per replica and
/// skeletons of `skeleton_base · 2^l` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoodApproxScenario {
    pub integrand: GoodIntegrand,
    pub dim: usize,
    pub t_end: f64,
    pub fine_steps: usize,
    pub skeleton_base: usize,
    pub levels: usize,
    pub replicas: usize,
    pub seed: u64,
}

impl GoodApproxScenario {
    pub fn skeletons(&self) -> Vec<usize> {
        (0..self.levels).map(|l| self.skeleton_base << l).collect()
    }
}

pub fn verify_good_approximation(name: &str, sc: &GoodApproxScenario, criteria: &PassCriteria) -> Result<ConvergenceReport> {
    let skeletons = sc.skeletons();
    if sc.levels == 0 || skeletons.iter().any(|m| *m == 0 || !sc.fine_steps.is_multiple_of(*m)) {
        return Err(Error::Config("every skeleton must divide the fine step count".into()));
    }
    let meshes: Vec<f64> = skeletons.iter().map(|m| sc.t_end / *m as f64).collect();
    run_study(name, &meshes, sc.replicas, criteria, |r| {
        let w = brownian_level(sc.t_end, sc.fine_steps, 0, sc.dim, rng::replica_seed(sc.seed, r as u64))?;
        let cp = sc.integrand.build(&w)?;
        Ok(good_approximation_check(&w, &cp, &skeletons)?.differences.into_iter().map(Sample::from).collect())
    })
}

/// Drift or diffusion of the scalar system `(X, A, B, C)` formed by a flow,
/// its first and second variations and `C = D⁻_u A`.
#[derive(Debug)]
struct Augmented {
    vf: VectorFieldPair,
    sigma_x: f64,
    diffusion: bool,
}

impl SmoothMap for Augmented {
    fn in_dim(&self) -> usize {
        4
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.diffusion {
            vec![4, 1]
        } else {
            vec![4]
        }
    }

    fn derivs(&self, z: &Tensor, order: usize) -> Result<Vec<Tensor>> {
        if order > 1 {
            return Err(Error::Invalid("the augmented system carries first derivatives only".into()));
        }
        let [x, a, b, c] = [z.data()[0], z.data()[1], z.data()[2], z.data()[3]];
        let p = Tensor::vector(vec![x]);
        let ds = if self.diffusion { self.vf.sigma_derivs(&p, 3)? } else { self.vf.mu_derivs(&p, 3)? };
        let [f0, f1, f2, f3] = [first(&ds[0]), first(&ds[1]), first(&ds[2]), first(&ds[3])];
        let s = self.sigma_x;
        let value = vec![f0, f1 * a, f2 * a * a + f1 * b, s * f2 * a * a + f1 * c];
        let jac = vec![
            f1, 0.0, 0.0, 0.0, //
            f2 * a, f1, 0.0, 0.0, //
            f3 * a * a + f2 * b, 2.0 * f2 * a, f1, 0.0, //
            s * f3 * a * a + f2 * c, 2.0 * s * f2 * a, 0.0, f1,
        ];
        let shape = self.out_shape();
        let mut jshape = shape.clone();
        jshape.push(4);
        let mut out = vec![Tensor::new(shape, value)?];
        if order == 1 {
            out.push(Tensor::new(jshape, jac)?);
        }
        Ok(out)
    }
}

/// Residuals of `C = Dσ(x)A + σ(x)B` on `[u, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DminusResidual {
    /// With `A, B, C` stepped jointly by the scheme.
    pub joint: f64,
    /// With `A, B` the exact first and second derivatives of the discrete
    /// flow and `C` from the joint scheme.
    pub cross: f64,
}

impl DminusResidual {
    pub fn max(&self) -> f64 {
        self.joint.max(self.cross)
    }
}

/// Steps `A_t = D_xX^{u,x}_t`, `B_t = D²_xX^{u,x}_t` and `C_t` from
/// `(1, 0, Dσ(x))` at node `u` along `rz` (scalar state and driver).
pub fn verify_dminus_identity(vf: &VectorFieldPair, x: f64, u: usize, rz: &RoughPath) -> Result<DminusResidual> {
    if vf.state_dim() != 1 || vf.driver_dim() != 1 {
        return shape_err("the D⁻ identity is checked for scalar state and driver");
    }
    let n = rz.grid().n_steps();
    let p = Tensor::vector(vec![x]);
    let s = vf.sigma_derivs(&p, 1)?;
    let (s0, s1) = (first(&s[0]), first(&s[1]));
    let aug = VectorFieldPair::new(
        Arc::new(Augmented { vf: vf.clone(), sigma_x: s0, diffusion: false }),
        Arc::new(Augmented { vf: vf.clone(), sigma_x: s0, diffusion: true }),
    )?;
    let joint = solve_flow(&aug, rz, u, n, &Tensor::vector(vec![x, 1.0, 0.0, s1]), 0)?;
    let flow = solve_flow(vf, rz, u, n, &p, 2)?;
    let mut res = DminusResidual { joint: 0.0, cross: 0.0 };
    for k in u..=n {
        let z = joint.state(k).data();
        res.joint = res.joint.max((z[3] - s1 * z[1] - s0 * z[2]).abs());
        res.cross = res.cross.max((z[3] - s1 * first(flow.jacobian(k)) - s0 * first(flow.hessian(k))).abs());
    }
    Ok(res)
}

/// Refinement study of the D⁻ identity from the node at time `u_time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DminusScenario {
    pub vf: VectorFieldSpec,
    pub x: f64,
    pub u_time: f64,
    pub driver: DriverSpec,
    pub mesh: MeshFamily,
    pub replicas: usize,
    pub seed: u64,
}

fn node_of(g: &TimeGrid, t: f64) -> Result<usize> {
    let k = ((t - g.t0()) / g.dt()).round();
    if k < 0.0 || k as usize > g.n_steps() || (g.time(k as usize) - t).abs() > 1e-12 {
        return Err(Error::Config(format!("time {t} is not a node of every level")));
    }
    Ok(k as usize)
}

pub fn verify_dminus(name: &str, sc: &DminusScenario, criteria: &PassCriteria) -> Result<ConvergenceReport> {
    let vf = sc.vf.build()?;
    run_study(name, &sc.mesh.meshes(), sc.replicas, criteria, |r| {
        let fam = sc.driver.family(&sc.mesh, sc.mesh.finest_level(), rng::replica_seed(sc.seed, r as u64))?;
        (0..sc.mesh.levels)
            .map(|l| {
                let rz = fam.level(l)?;
                let u = node_of(rz.grid(), sc.u_time)?;
                let res = verify_dminus_identity(&vf, sc.x, u, &rz)?;
                Ok(Sample::from(res.max()).with("joint", res.joint).with("cross", res.cross))
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rough_lift::sample_brownian;

    fn scalar_vf(mu: ScalarFn, sigma: ScalarFn) -> VectorFieldPair {
        VectorFieldSpec::Componentwise { drift: vec![mu], diffusion: vec![vec![sigma]] }.build().unwrap()
    }

    fn scalar_f(phi: ScalarFn) -> Arc<dyn SmoothMap> {
        Arc::new(RidgeMap::scalar(phi))
    }

    fn x(v: f64) -> Tensor {
        Tensor::vector(vec![v])
    }

    fn mesh(base: usize, levels: usize) -> MeshFamily {
        MeshFamily::new(1.0, base, levels).unwrap()
    }

    fn process(b: ScalarFn, beta: ScalarFn) -> ProcessSpec {
        ProcessSpec::Field { field: VectorFieldSpec::Componentwise { drift: vec![b], diffusion: vec![vec![beta]] } }
    }

    #[test]
    fn terminal_field_of_pure_noise_is_a_shift() {
        let g = TimeGrid::unit(1.0, 40).unwrap();
        let w = sample_brownian(g, 1, 4).unwrap();
        let vf = scalar_vf(ScalarFn::constant(0.0), ScalarFn::constant(1.0));
        let fb = terminal_field_realized(&vf, scalar_f(ScalarFn::sin()), &w, LiftKind::Ito).unwrap();
        let wt = w.last().item();
        for k in [0, 13, 40] {
            for y in [-0.7, 0.2, 1.1] {
                let jet = fb.eval(k, &x(y)).unwrap();
                let z = y + wt - w.value(k).item();
                assert!((jet.f.item() - z.sin()).abs() < 1e-14);
                assert!((jet.df.item() - z.cos()).abs() < 1e-14);
            }
        }
        let zero = scalar_vf(ScalarFn::constant(0.0), ScalarFn::constant(0.0));
        let id = terminal_field_realized(&zero, scalar_f(ScalarFn::identity()), &w, LiftKind::Stratonovich).unwrap();
        assert_eq!(id.eval(7, &x(0.4)).unwrap().f.item(), 0.4);
        let tanh = terminal_field_realized(&default_vf().build().unwrap(), scalar_f(ScalarFn::tanh()), &w, LiftKind::Ito).unwrap();
        assert_eq!(tanh.eval(40, &x(0.4)).unwrap().f.item(), 0.4f64.tanh());
    }

    #[test]
    fn scheme_flow_is_exactly_degenerate() {
        let sc = IagScenario::default_1d(ProcessSpec::SchemeFlow, mesh(16, 3), 3, 1);
        for r in 0..3 {
            for p in sc.partitions(r, |_| 4).unwrap() {
                assert_eq!(p, IagPartition { lhs: 0.0, s_pi: 0.0, l_pi: 0.0, defect: 0.0 });
            }
        }
    }

    #[test]
    fn quadratic_terminal_matches_closed_form_sums() {
        let g = TimeGrid::unit(1.0, 64).unwrap();
        let w = sample_brownian(g, 1, 9).unwrap();
        let rz = ito_lift(&w, 1, 0).unwrap();
        let vf = scalar_vf(ScalarFn::constant(0.0), ScalarFn::constant(1.0));
        let (b, beta, y0) = (0.3, 0.7, 0.2);
        let pr = scalar_vf(ScalarFn::constant(b), ScalarFn::constant(beta));
        let f = scalar_f(ScalarFn::Poly { coeffs: vec![0.0, 0.0, 1.0] });
        let got = iag_partition_sum(&vf, f, &pr, &x(y0), &rz, 8).unwrap();

        let wv = w.scalars();
        let dt = g.dt();
        let y: Vec<f64> = (0..=64).map(|k| y0 + b * k as f64 * dt + beta * (wv[k] - wv[0])).collect();
        let (mut s, mut l) = (0.0, 0.0);
        for i in 0..8 {
            let (a, e) = (8 * i, 8 * i + 8);
            for k in a..e {
                let shift = wv[64] - wv[e];
                let tilde = y[a] + wv[k] - wv[a];
                let dw = wv[k + 1] - wv[k];
                s += 2.0 * (y[k] + shift) * beta * dw - 2.0 * (tilde + shift) * dw;
                l += (2.0 * (y[k] + shift) * b + beta * beta - 1.0) * dt;
            }
        }
        let lhs = y[64] * y[64] - (y0 + wv[64] - wv[0]).powi(2);
        assert!((got.lhs - lhs).abs() < 1e-12);
        assert!((got.s_pi - s).abs() < 1e-12);
        assert!((got.l_pi - l).abs() < 1e-12);
        let qv: f64 = (0..64).map(|k| (wv[k + 1] - wv[k]).powi(2) - dt).sum();
        let want = (beta * beta - 1.0) * qv + (0..64).map(|k| 2.0 * b * beta * dt * (wv[k + 1] - wv[k]) + b * b * dt * dt).sum::<f64>();
        assert!((got.defect - want).abs() < 1e-12, "{} vs {want}", got.defect);
    }

    fn default_mismatch() -> ProcessSpec {
        process(ScalarFn::linear(-0.5, 0.2), ScalarFn::Sin { amp: 0.2, freq: 1.0, phase: std::f64::consts::FRAC_PI_2, offset: 0.8 })
    }

    #[test]
    fn partition_defect_converges() {
        let sc = IagScenario::default_1d(default_mismatch(), mesh(16, 4), 24, 2);
        let r = verify_iag_partition("iag", &sc, &PassCriteria::min_order(0.4)).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn partition_martingale_part_is_centered() {
        let sc = IagScenario::default_1d(default_mismatch(), mesh(16, 1), 2000, 3);
        let c = iag_centering(&sc, 0).unwrap();
        assert!(c.pass && c.std_err > 0.0, "{c:?}");
    }

    fn gauss_expect(mean: f64, var: f64, f: impl Fn(f64) -> f64) -> f64 {
        let sd = var.sqrt();
        let m = 8000;
        let h = 16.0 / m as f64;
        (0..=m)
            .map(|i| {
                let z = -8.0 + i as f64 * h;
                let wgt = if i == 0 || i == m { 0.5 } else { 1.0 };
                wgt * f(mean + sd * z) * (-0.5 * z * z).exp()
            })
            .sum::<f64>()
            * h
            / (2.0 * std::f64::consts::PI).sqrt()
    }

    fn ou(f: ScalarFn, pr: ProcessSpec, replicas: usize) -> IagScenario {
        IagScenario {
            vf: VectorFieldSpec::Componentwise { drift: vec![ScalarFn::linear(-1.0, 0.0)], diffusion: vec![vec![ScalarFn::constant(1.0)]] },
            f,
            process: pr,
            y0: vec![0.3],
            mesh: mesh(16, 2),
            intervals: 4,
            replicas,
            seed: 11,
        }
    }

    #[test]
    fn weak_identity_trivial_and_drift_mismatch() {
        let triv = verify_iag_weak("trivial", &IagScenario::default_1d(ProcessSpec::SchemeFlow, mesh(8, 2), 4, 1), 1.0).unwrap();
        assert!(triv.pass && triv.rows.iter().all(|r| r.diff_mean == 0.0 && r.lhs_mean == 0.0));

        let c = 0.4;
        let sc = ou(ScalarFn::tanh(), process(ScalarFn::linear(-1.0, c), ScalarFn::constant(1.0)), 3000);
        let rep = verify_iag_weak("drift", &sc, 1.0).unwrap();
        assert!(rep.pass, "{rep:?}");
        let e = (-1.0f64).exp();
        let var = (1.0 - e * e) / 2.0;
        let exact = gauss_expect(0.3 * e + c * (1.0 - e), var, f64::tanh) - gauss_expect(0.3 * e, var, f64::tanh);
        for r in &rep.rows {
            assert!((r.lhs_mean - exact).abs() < 3.0 * r.lhs_se + 2.0 * r.mesh, "{r:?} vs {exact}");
            assert!((r.rhs_mean - exact).abs() < 3.0 * r.rhs_se + 2.0 * r.mesh, "{r:?} vs {exact}");
        }
    }

    #[test]
    fn weak_identity_diffusion_mismatch_has_the_analytic_sign() {
        let beta = 1.5;
        let sc = ou(ScalarFn::Poly { coeffs: vec![0.0, 0.0, 1.0] }, process(ScalarFn::linear(-1.0, 0.0), ScalarFn::constant(beta)), 3000);
        let rep = verify_iag_weak("diffusion", &sc, 1.0).unwrap();
        assert!(rep.pass, "{rep:?}");
        let exact = (beta * beta - 1.0) * (1.0 - (-2.0f64).exp()) / 2.0;
        for r in &rep.rows {
            assert!(r.rhs_mean > 3.0 * r.rhs_se);
            assert!((r.rhs_mean - exact).abs() < 3.0 * r.rhs_se + 2.0 * r.mesh, "{r:?} vs {exact}");
        }
    }

    fn interp(vf_hat: VectorFieldSpec, driver: DriverSpec, replicas: usize) -> InterpolationScenario {
        InterpolationScenario {
            vf: VectorFieldSpec::Componentwise {
                drift: vec![ScalarFn::Sin { amp: -0.5, freq: 1.0, phase: 0.0, offset: 0.0 }],
                diffusion: vec![vec![ScalarFn::Sin { amp: 0.3, freq: 1.0, phase: 0.0, offset: 0.8 }]],
            },
            vf_hat,
            driver,
            mesh: mesh(16, 4),
            x0: vec![0.4],
            replicas,
            seed: 5,
        }
    }

    #[test]
    fn interpolation_formula_identical_fields_vanish() {
        let sc = interp(default_vf(), DriverSpec::Smooth { dim: 1 }, 1);
        let vf = sc.vf.build().unwrap();
        let rz = sc.driver.family(&sc.mesh, 1, 0).unwrap().level(1).unwrap();
        let d = interpolation_formula(&vf, &vf, &rz, &x(0.4), 3, 20).unwrap();
        assert_eq!(d.defect, 0.0);
        assert_eq!(d.lhs.max_abs(), 0.0);
    }

    #[test]
    fn interpolation_formula_converges() {
        let shifted = VectorFieldSpec::Componentwise {
            drift: vec![ScalarFn::Sin { amp: -0.5, freq: 1.0, phase: 0.0, offset: 0.3 }],
            diffusion: vec![vec![ScalarFn::Sin { amp: 0.3, freq: 1.0, phase: 0.0, offset: 0.8 }]],
        };
        let r = verify_interpolation("drift", &interp(shifted, DriverSpec::Smooth { dim: 1 }, 1), &PassCriteria::min_order(0.8)).unwrap();
        assert!(r.pass && r.residuals[0] > 0.0, "{r:?}");
        let full = VectorFieldSpec::Componentwise {
            drift: vec![ScalarFn::tanh()],
            diffusion: vec![vec![ScalarFn::Sin { amp: 0.2, freq: 2.0, phase: 0.5, offset: 1.0 }]],
        };
        let r = verify_interpolation("smooth", &interp(full.clone(), DriverSpec::Smooth { dim: 1 }, 1), &PassCriteria::min_order(0.8)).unwrap();
        assert!(r.pass, "{r:?}");
        let driver = DriverSpec::Brownian { dim: 1, lift: LiftKind::Stratonovich, refine: 1 };
        let r = verify_interpolation("brownian", &interp(full, driver, 16), &PassCriteria::min_order(0.4)).unwrap();
        eprintln!("{:?} {:?}", r.residuals, r.fitted_order);
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn good_approximation_oracles() {
        let g = TimeGrid::unit(1.0, 256).unwrap();
        let w = sample_brownian(g, 1, 17).unwrap();
        let c = GoodIntegrand::Constant { value: 0.7 }.build(&w).unwrap();
        let rep = good_approximation_check(&w, &c, &[4, 16, 64]).unwrap();
        assert!(rep.differences.iter().all(|d| *d < 1e-13), "{rep:?}");
        let b = GoodIntegrand::Brownian.build(&w).unwrap();
        let rep = good_approximation_check(&w, &b, &[4, 256]).unwrap();
        assert!((rep.rough.data()[0] - 0.5 * w.last().item().powi(2)).abs() < 1e-12);
        assert!(rep.differences[1] < 1e-12);
        let w2 = sample_brownian(g, 2, 3).unwrap();
        let b2 = GoodIntegrand::Brownian.build(&w2).unwrap();
        let rep = good_approximation_check(&w2, &b2, &[256]).unwrap();
        let wt = w2.last().data();
        for i in 0..2 {
            for j in 0..2 {
                let sym = 0.5 * (rep.rough.at(&[i, j]) + rep.rough.at(&[j, i]));
                assert!((sym - 0.5 * wt[i] * wt[j]).abs() < 1e-12);
            }
        }
        assert!(good_approximation_check(&w, &c, &[3]).is_err());
    }

    #[test]
    fn good_approximation_study_decreases() {
        let sc = GoodApproxScenario {
            integrand: GoodIntegrand::Rde { vf: default_vf(), x0: vec![0.2] },
            dim: 1,
            t_end: 1.0,
            fine_steps: 1024,
            skeleton_base: 8,
            levels: 4,
            replicas: 200,
            seed: 8,
        };
        let r = verify_good_approximation("good", &sc, &PassCriteria::min_order(0.3)).unwrap();
        assert!(r.pass && r.residuals.windows(2).all(|p| p[1] < p[0]), "{r:?}");
        let area = GoodApproxScenario { integrand: GoodIntegrand::Brownian, dim: 2, replicas: 50, ..sc };
        let r = verify_good_approximation("area", &area, &PassCriteria::min_order(0.4)).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn dminus_identity_cases() {
        let g = TimeGrid::unit(1.0, 64).unwrap();
        let w = sample_brownian(g, 1, 6).unwrap();
        let rz = stratonovich_lift(&w, 1, 0).unwrap();
        let c = scalar_vf(ScalarFn::constant(0.0), ScalarFn::constant(0.6));
        assert_eq!(verify_dminus_identity(&c, 0.3, 10, &rz).unwrap(), DminusResidual { joint: 0.0, cross: 0.0 });
        let lin = scalar_vf(ScalarFn::constant(0.0), ScalarFn::identity());
        assert!(verify_dminus_identity(&lin, 0.3, 10, &rz).unwrap().max() < 1e-14);
        let sc = DminusScenario {
            vf: VectorFieldSpec::Componentwise { drift: vec![ScalarFn::linear(-1.0, 0.0)], diffusion: vec![vec![ScalarFn::sin()]] },
            x: 0.7,
            u_time: 0.25,
            driver: DriverSpec::Brownian { dim: 1, lift: LiftKind::Stratonovich, refine: 1 },
            mesh: mesh(16, 4),
            replicas: 8,
            seed: 4,
        };
        let r = verify_dminus("dminus", &sc, &PassCriteria::min_order(0.8)).unwrap();
        assert!(r.pass && r.residuals.iter().all(|v| *v <= 1e-12), "{r:?}");
        assert!(verify_dminus("bad", &DminusScenario { u_time: 0.3, ..sc }, &PassCriteria::default()).is_err());
    }
}

