//! RDE solutions, their first and second variations, and flow jets.
//!
//! One step on `[t_k, t_{k+1}]` is the map
//! `S_k(x) = x + μ(x)Δ + σ(x)δZ + (Γσ)(x):𝕑` with
//! `(Γσ)[a, i, j] = Σ_c ∂_c σ[a, j] σ[c, i]`, so that `Γσ:𝕑` is the Davie
//! term `(Dσ σ)𝕑`. Jacobians and Hessians are the exact first and second
//! derivatives of the composed step maps, so the discrete flow and its
//! derivatives are mutually consistent to rounding.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::controlled::{Jet, JetDims, JetField, SampleBox, StronglyControlledPath};
use crate::error::{shape_err, Error, Result};
use crate::functions::{fd_check, RidgeEntry, RidgeMap, ScalarFn, SmoothMap};
use crate::grid_paths::{GridPath, TimeGrid};
use crate::rough_lift::{bracket, RoughPath};
use crate::tensor::Tensor;

/// States whose norm exceeds this are reported as divergence.
pub const DIVERGENCE_THRESHOLD: f64 = 1e8;

/// Drift `μ: R^n → R^n` and diffusion `σ: R^n → L(R^d; R^n)`.
#[derive(Debug, Clone)]
pub struct VectorFieldPair {
    n: usize,
    d: usize,
    mu: Arc<dyn SmoothMap>,
    sigma: Arc<dyn SmoothMap>,
}

/// `σ` and its derivatives up to the requested order, plus `μ` and its
/// derivatives, at one point.
struct Local {
    mu: Vec<Tensor>,
    sig: Vec<Tensor>,
}

impl VectorFieldPair {
    pub fn new(mu: Arc<dyn SmoothMap>, sigma: Arc<dyn SmoothMap>) -> Result<Self> {
        let n = mu.in_dim();
        if mu.out_shape() != [n] || sigma.in_dim() != n {
            return shape_err(format!("drift must map R^{n} to R^{n}"));
        }
        let ss = sigma.out_shape();
        if ss.len() != 2 || ss[0] != n {
            return shape_err(format!("diffusion must take values in ({n}, d), got {ss:?}"));
        }
        Ok(Self { n, d: ss[1], mu, sigma })
    }

    pub fn from_spec(spec: &VectorFieldSpec) -> Result<Self> {
        spec.build()
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn driver_dim(&self) -> usize {
        self.d
    }

    pub fn mu(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.mu.derivs(x, 0)?.remove(0))
    }

    pub fn sigma(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.sigma.derivs(x, 0)?.remove(0))
    }

    /// `[μ, Dμ, …]` at `x` up to `order`.
    pub fn mu_derivs(&self, x: &Tensor, order: usize) -> Result<Vec<Tensor>> {
        self.mu.derivs(x, order)
    }

    /// `[σ, Dσ, …]` at `x` up to `order`; `D^kσ` has shape `(n, d, n^k)`.
    pub fn sigma_derivs(&self, x: &Tensor, order: usize) -> Result<Vec<Tensor>> {
        self.sigma.derivs(x, order)
    }

    /// `Γσ` at `x`, shape `(n, d, d)`.
    pub fn gamma_sigma(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.sigma.derivs(x, 1)?;
        gamma_sigma(&s[0], &s[1])
    }

    fn local(&self, x: &Tensor, order: usize) -> Result<Local> {
        Ok(Local { mu: self.mu.derivs(x, order.min(2))?, sig: self.sigma.derivs(x, order + 1)? })
    }

    /// Largest finite-difference deviation of the analytic derivatives over
    /// the corners and centre of `bx`.
    pub fn validate(&self, bx: &SampleBox, h: f64) -> Result<f64> {
        let mut worst = 0.0f64;
        for x in bx.lattice(3) {
            worst = worst.max(fd_check(self.mu.as_ref(), &x, h)?);
            worst = worst.max(fd_check(self.sigma.as_ref(), &x, h)?);
        }
        Ok(worst)
    }
}

fn gamma_sigma(s0: &Tensor, s1: &Tensor) -> Result<Tensor> {
    Ok(s1.contract(s0, 1)?.transpose_last2())
}

/// `D(Γσ)[a, i, j, m]`.
fn d_gamma_sigma(s: &[Tensor]) -> Result<Tensor> {
    let t1 = s[2].map_axis(2, &s[0])?;
    let t2 = s[1].contract(&s[1], 1)?;
    Ok((&t1 + &t2).permute(&[0, 2, 1, 3]))
}

/// `D²(Γσ)[a, i, j, m, l]`.
fn d2_gamma_sigma(s: &[Tensor]) -> Result<Tensor> {
    let t1 = s[3].map_axis(2, &s[0])?;
    let t2 = s[2].permute(&[0, 1, 3, 2]).contract(&s[1], 1)?.permute(&[0, 1, 3, 2, 4]);
    let t3 = t2.permute(&[0, 1, 2, 4, 3]);
    let t4 = s[1].contract(&s[2], 1)?;
    Ok((&(&(&t1 + &t2) + &t3) + &t4).permute(&[0, 2, 1, 3, 4]))
}

/// Driver increment data for one step.
struct StepData<'a> {
    dt: f64,
    dz: Tensor,
    area: &'a Tensor,
}

fn step_data(rz: &RoughPath, k: usize) -> StepData<'_> {
    StepData { dt: rz.grid().dt(), dz: rz.step(k), area: rz.area_step(k) }
}

/// `S(x)`, and optionally `DS(x)`, `D²S(x)`.
fn step_map(vf: &VectorFieldPair, x: &Tensor, sd: &StepData, order: usize) -> Result<(Tensor, Option<Tensor>, Option<Tensor>)> {
    let loc = vf.local(x, order)?;
    let s = &loc.sig;
    let gs = gamma_sigma(&s[0], &s[1])?;
    let mut y = x.clone();
    y.axpy(sd.dt, &loc.mu[0]);
    y += &s[0].contract(&sd.dz, 1)?;
    y += &gs.contract(sd.area, 2)?;
    if order == 0 {
        return Ok((y, None, None));
    }
    let mut j = Tensor::identity(vf.n);
    j.axpy(sd.dt, &loc.mu[1]);
    j += &s[1].permute(&[0, 2, 1]).contract(&sd.dz, 1)?;
    j += &d_gamma_sigma(s)?.permute(&[0, 3, 1, 2]).contract(sd.area, 2)?;
    if order == 1 {
        return Ok((y, Some(j), None));
    }
    let mut h = loc.mu[2].scale(sd.dt);
    h += &s[2].permute(&[0, 2, 3, 1]).contract(&sd.dz, 1)?;
    h += &d2_gamma_sigma(s)?.permute(&[0, 3, 4, 1, 2]).contract(sd.area, 2)?;
    Ok((y, Some(j), Some(h)))
}

fn guard(x: &Tensor, node: usize) -> Result<()> {
    let norm = x.norm();
    if !norm.is_finite() || norm > DIVERGENCE_THRESHOLD {
        return Err(Error::Divergence { node, norm });
    }
    Ok(())
}

fn check_flow_inputs(vf: &VectorFieldPair, rz: &RoughPath, s: usize, x0: &Tensor) -> Result<()> {
    if rz.dim() != vf.d {
        return shape_err(format!("driver dimension {} does not match diffusion ({})", rz.dim(), vf.d));
    }
    if x0.shape() != [vf.n] {
        return shape_err(format!("initial state must have shape ({},)", vf.n));
    }
    if s > rz.grid().n_steps() {
        return Err(Error::Index(format!("start index {s} beyond {}", rz.grid().n_steps())));
    }
    Ok(())
}

/// States, Jacobians and Hessians of the flow started at node `start`;
/// entry `k − start` belongs to node `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPath {
    pub start: usize,
    pub states: Vec<Tensor>,
    pub jacobians: Vec<Tensor>,
    pub hessians: Vec<Tensor>,
}

impl FlowPath {
    pub fn state(&self, k: usize) -> &Tensor {
        &self.states[k - self.start]
    }

    pub fn jacobian(&self, k: usize) -> &Tensor {
        &self.jacobians[k - self.start]
    }

    pub fn hessian(&self, k: usize) -> &Tensor {
        &self.hessians[k - self.start]
    }
}

/// Solves from `(start, x0)` up to node `end`, carrying derivatives up to
/// `order` (0: states, 1: Jacobians, 2: Hessians).
pub fn solve_flow(vf: &VectorFieldPair, rz: &RoughPath, start: usize, end: usize, x0: &Tensor, order: usize) -> Result<FlowPath> {
    check_flow_inputs(vf, rz, start, x0)?;
    if end < start || end > rz.grid().n_steps() {
        return Err(Error::Index(format!("flow end {end} outside [{start}, {}]", rz.grid().n_steps())));
    }
    let n = vf.n;
    let mut x = x0.clone();
    let mut a = Tensor::identity(n);
    let mut b = Tensor::zeros(&[n, n, n]);
    let cap = end - start + 1;
    let mut fp = FlowPath {
        start,
        states: Vec::with_capacity(cap),
        jacobians: Vec::with_capacity(if order >= 1 { cap } else { 0 }),
        hessians: Vec::with_capacity(if order >= 2 { cap } else { 0 }),
    };
    let push = |fp: &mut FlowPath, x: &Tensor, a: &Tensor, b: &Tensor| {
        fp.states.push(x.clone());
        if order >= 1 {
            fp.jacobians.push(a.clone());
        }
        if order >= 2 {
            fp.hessians.push(b.clone());
        }
    };
    push(&mut fp, &x, &a, &b);
    for k in start..end {
        let sd = step_data(rz, k);
        let (y, j, h) = step_map(vf, &x, &sd, order.min(2))?;
        guard(&y, k + 1)?;
        if let Some(h) = h {
            let j = j.as_ref().expect("order 2 carries the Jacobian");
            let bb = &h.map_axis(1, &a)?.map_axis(2, &a)? + &j.compose(&b)?;
            b = bb.sym_last2();
        }
        if let Some(j) = j {
            a = j.compose(&a)?;
            guard(&a, k + 1)?;
        }
        x = y;
        push(&mut fp, &x, &a, &b);
    }
    Ok(fp)
}

fn full_grid_path(g: TimeGrid, start: usize, first: &Tensor, tail: Vec<Tensor>) -> Result<GridPath> {
    let mut values = vec![first.clone(); start];
    values.extend(tail);
    GridPath::new(g, values)
}

/// `X^{s, x0}` on the full grid; nodes before `s` hold `x0`.
pub fn rde_solve(vf: &VectorFieldPair, rz: &RoughPath, s: usize, x0: &Tensor) -> Result<GridPath> {
    let fp = solve_flow(vf, rz, s, rz.grid().n_steps(), x0, 0)?;
    full_grid_path(*rz.grid(), s, x0, fp.states)
}

/// `D_x X^{s,x}_t` on the full grid; nodes before `s` hold the identity.
pub fn rde_jacobian(vf: &VectorFieldPair, rz: &RoughPath, s: usize, x0: &Tensor) -> Result<GridPath> {
    let fp = solve_flow(vf, rz, s, rz.grid().n_steps(), x0, 1)?;
    full_grid_path(*rz.grid(), s, &Tensor::identity(vf.n), fp.jacobians)
}

/// `D²_x X^{s,x}_t` (symmetric in the last two slots); zero before `s`.
pub fn rde_hessian(vf: &VectorFieldPair, rz: &RoughPath, s: usize, x0: &Tensor) -> Result<GridPath> {
    let fp = solve_flow(vf, rz, s, rz.grid().n_steps(), x0, 2)?;
    full_grid_path(*rz.grid(), s, &Tensor::zeros(&[vf.n, vf.n, vf.n]), fp.hessians)
}

/// Solution jet `(X, σ(X), Γσ(X), μ(X))` of the flow started at node 0.
pub fn rde_solution_jet(vf: &VectorFieldPair, rz: &RoughPath, x0: &Tensor) -> Result<StronglyControlledPath> {
    let x = rde_solve(vf, rz, 0, x0)?;
    let g = *rz.grid();
    let mut cols: [Vec<Tensor>; 3] = Default::default();
    for v in x.values() {
        let s = vf.sigma.derivs(v, 1)?;
        cols[1].push(gamma_sigma(&s[0], &s[1])?);
        cols[0].push(s[0].clone());
        cols[2].push(vf.mu(v)?);
    }
    let [yp, ypp, ydot] = cols;
    StronglyControlledPath::new(x, GridPath::new(g, yp)?, GridPath::new(g, ypp)?, GridPath::new(g, ydot)?)
}

/// Flow started at `s` over a lattice of initial points.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTable {
    pub start: usize,
    pub points: Vec<Tensor>,
    pub paths: Vec<FlowPath>,
}

impl FlowTable {
    pub fn build(vf: &VectorFieldPair, rz: &RoughPath, s: usize, points: Vec<Tensor>) -> Result<Self> {
        use rayon::prelude::*;
        let paths = points
            .par_iter()
            .map(|x| solve_flow(vf, rz, s, rz.grid().n_steps(), x, 2))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { start: s, points, paths })
    }
}

/// Bounded memo table safe for concurrent use.
struct Memo<V> {
    map: Mutex<HashMap<Vec<u64>, Arc<V>>>,
    cap: usize,
}

impl<V> Memo<V> {
    fn new(cap: usize) -> Self {
        Self { map: Mutex::new(HashMap::new()), cap }
    }

    fn get_or_try(&self, key: Vec<u64>, f: impl FnOnce() -> Result<V>) -> Result<Arc<V>> {
        if let Some(v) = self.map.lock().expect("memo lock").get(&key) {
            return Ok(v.clone());
        }
        let v = Arc::new(f()?);
        let mut m = self.map.lock().expect("memo lock");
        if m.len() >= self.cap {
            m.clear();
        }
        m.insert(key, v.clone());
        Ok(v)
    }
}

fn key(k: Option<usize>, x: &Tensor) -> Vec<u64> {
    let mut v: Vec<u64> = x.data().iter().map(|c| c.to_bits()).collect();
    if let Some(k) = k {
        v.push(k as u64);
    }
    v
}

const MEMO_CAP: usize = 1 << 14;

/// Forward flow field `Φ_t(x) = φ(s, t; x)` with jet
/// `(φ, σ∘φ, Dφ, (Γσ)∘φ, D(σ∘φ), D²φ, μ∘φ)`. Before `s` the field is the
/// identity.
pub struct ForwardFlowField {
    vf: VectorFieldPair,
    rz: RoughPath,
    start: usize,
    dims: JetDims,
    memo: Memo<FlowPath>,
}

pub fn forward_flow_jet(vf: &VectorFieldPair, rz: &RoughPath, s: usize) -> Result<ForwardFlowField> {
    check_flow_inputs(vf, rz, s, &Tensor::zeros(&[vf.n]))?;
    Ok(ForwardFlowField {
        vf: vf.clone(),
        rz: rz.clone(),
        start: s,
        dims: JetDims::new(vf.d, vf.n, vec![vf.n]),
        memo: Memo::new(MEMO_CAP),
    })
}

impl ForwardFlowField {
    fn path(&self, x: &Tensor) -> Result<Arc<FlowPath>> {
        self.memo.get_or_try(key(None, x), || {
            solve_flow(&self.vf, &self.rz, self.start, self.rz.grid().n_steps(), x, 2)
        })
    }

    fn jet_at(&self, fp: &FlowPath, k: usize, x: &Tensor) -> Result<Jet> {
        if k < self.start {
            let mut j = Jet::zeros(&self.dims);
            j.f = x.clone();
            j.df = Tensor::identity(self.vf.n);
            return Ok(j);
        }
        let phi = fp.state(k);
        let dphi = fp.jacobian(k);
        let loc = self.vf.local(phi, 1)?;
        let s = &loc.sig;
        Ok(Jet {
            f: phi.clone(),
            fp: s[0].clone(),
            df: dphi.clone(),
            fpp: gamma_sigma(&s[0], &s[1])?,
            dfp: s[1].map_axis(2, dphi)?.transpose_last2(),
            d2f: fp.hessian(k).clone(),
            fdot: loc.mu[0].clone(),
        })
    }
}

impl JetField for ForwardFlowField {
    fn grid(&self) -> &TimeGrid {
        self.rz.grid()
    }

    fn dims(&self) -> &JetDims {
        &self.dims
    }

    fn eval(&self, k: usize, x: &Tensor) -> Result<Jet> {
        if k > self.rz.grid().n_steps() || x.shape() != [self.vf.n] {
            return shape_err("forward flow evaluated outside its grid or dimension");
        }
        let fp = self.path(x)?;
        self.jet_at(&fp, k, x)
    }

    fn eval_path(&self, x: &Tensor) -> Result<Vec<Jet>> {
        let fp = self.path(x)?;
        (0..self.rz.grid().n_nodes()).map(|k| self.jet_at(&fp, k, x)).collect()
    }
}

/// Time-slot convention of the backward jet for drivers with a bracket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BracketCorrection {
    /// `Ḟ = −Du μ + Du(Γσ:ḃ) + ½ D²u(σ, σ):ḃ`, the drift for which the
    /// composition with forward solutions is constant.
    Consistent,
    /// `Ḟ = −Du μ − ½ D²u(σ, σ):ḃ`.
    HalfHessian,
}

/// Backward field `u_t(x) = g(φ(t, T; x))` with jet
/// `(u, −Γu, Du, (Γ²u)^⊤, −D(Γu), D²u, Ḟ)`, where `Γu = Du σ`.
pub struct BackwardFlowField {
    vf: VectorFieldPair,
    rz: RoughPath,
    g: Arc<dyn SmoothMap>,
    rate: GridPath,
    correction: BracketCorrection,
    dims: JetDims,
    memo: Memo<Jet>,
}

pub fn backward_flow_jet(vf: &VectorFieldPair, rz: &RoughPath, g: Arc<dyn SmoothMap>) -> Result<BackwardFlowField> {
    backward_flow_jet_with(vf, rz, g, BracketCorrection::Consistent)
}

pub fn backward_flow_jet_with(
    vf: &VectorFieldPair,
    rz: &RoughPath,
    g: Arc<dyn SmoothMap>,
    correction: BracketCorrection,
) -> Result<BackwardFlowField> {
    check_flow_inputs(vf, rz, 0, &Tensor::zeros(&[vf.n]))?;
    if g.in_dim() != vf.n {
        return shape_err(format!("terminal function must be defined on R^{}", vf.n));
    }
    let dims = JetDims::new(vf.d, vf.n, g.out_shape());
    Ok(BackwardFlowField {
        vf: vf.clone(),
        rz: rz.clone(),
        rate: bracket(rz).rate().clone(),
        g,
        correction,
        dims,
        memo: Memo::new(MEMO_CAP),
    })
}

impl BackwardFlowField {
    pub fn terminal(&self) -> &Arc<dyn SmoothMap> {
        &self.g
    }

    fn compute(&self, k: usize, x: &Tensor) -> Result<Jet> {
        let n_end = self.rz.grid().n_steps();
        let fp = solve_flow(&self.vf, &self.rz, k, n_end, x, 2)?;
        let (phi, dphi, d2phi) = (fp.state(n_end), fp.jacobian(n_end), fp.hessian(n_end));
        let gd = self.g.derivs(phi, 2)?;
        let r = gd[0].ndim();
        let du = gd[1].compose(dphi)?;
        let d2u = &gd[2].map_axis(r, dphi)?.map_axis(r + 1, dphi)? + &gd[1].compose(d2phi)?;
        let loc = self.vf.local(x, 1)?;
        let s = &loc.sig;
        let dgu = &d2u.map_axis(r, &s[0])? + &du.compose(&s[1])?;
        let b = self.rate.value(k);
        let hess_ss = d2u.map_axis(r, &s[0])?.map_axis(r + 1, &s[0])?;
        let mut fdot = -&du.compose(&loc.mu[0])?;
        match self.correction {
            BracketCorrection::Consistent => {
                fdot += &du.compose(&gamma_sigma(&s[0], &s[1])?.contract(b, 2)?)?;
                fdot.axpy(0.5, &hess_ss.contract(b, 2)?);
            }
            BracketCorrection::HalfHessian => fdot.axpy(-0.5, &hess_ss.contract(b, 2)?),
        }
        Ok(Jet {
            f: gd[0].clone(),
            fp: -&du.compose(&s[0])?,
            df: du,
            fpp: dgu.compose(&s[0])?,
            dfp: -&dgu.transpose_last2(),
            d2f: d2u,
            fdot,
        })
    }
}

impl JetField for BackwardFlowField {
    fn grid(&self) -> &TimeGrid {
        self.rz.grid()
    }

    fn dims(&self) -> &JetDims {
        &self.dims
    }

    fn eval(&self, k: usize, x: &Tensor) -> Result<Jet> {
        if k > self.rz.grid().n_steps() || x.shape() != [self.vf.n] {
            return shape_err("backward flow evaluated outside its grid or dimension");
        }
        Ok((*self.memo.get_or_try(key(Some(k), x), || self.compute(k, x))?).clone())
    }
}

/// Registry entry for a scalar function in trigonometric fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trig {
    pub amp: f64,
    #[serde(default = "one")]
    pub freq: f64,
    #[serde(default)]
    pub phase: f64,
    #[serde(default)]
    pub offset: f64,
}

fn one() -> f64 {
    1.0
}

/// Named vector fields with analytic derivatives. In the componentwise kinds
/// drift component `i` and diffusion entry `(i, j)` depend on `x_i` only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VectorFieldSpec {
    /// `μ(x) = B x + b`, `σ(x)[:, j] = S_j x + c_j`.
    Linear {
        drift: Vec<Vec<f64>>,
        #[serde(default)]
        drift_offset: Option<Vec<f64>>,
        diffusion: Vec<Vec<Vec<f64>>>,
        #[serde(default)]
        diffusion_offset: Option<Vec<Vec<f64>>>,
    },
    /// Polynomial coefficients (ascending powers).
    Polynomial { drift: Vec<Vec<f64>>, diffusion: Vec<Vec<Vec<f64>>> },
    /// `offset + amp sin(freq x + phase)`.
    Trigonometric { drift: Vec<Trig>, diffusion: Vec<Vec<Trig>> },
    /// Arbitrary scalar building blocks.
    Componentwise { drift: Vec<ScalarFn>, diffusion: Vec<Vec<ScalarFn>> },
    /// General ridge maps.
    Ridge { mu: RidgeMap, sigma: RidgeMap },
}

fn unit(n: usize, i: usize) -> Vec<f64> {
    (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()
}

fn componentwise(drift: Vec<ScalarFn>, diffusion: Vec<Vec<ScalarFn>>) -> Result<VectorFieldPair> {
    let n = drift.len();
    if n == 0 || diffusion.len() != n || diffusion.iter().any(|r| r.len() != diffusion[0].len()) || diffusion[0].is_empty() {
        return shape_err("componentwise field needs n drift entries and an n × d diffusion table");
    }
    let d = diffusion[0].len();
    let mu = RidgeMap::new(n, vec![n], drift.into_iter().enumerate().map(|(i, phi)| RidgeEntry { a: unit(n, i), b: 0.0, phi }).collect())?;
    let mut entries = Vec::with_capacity(n * d);
    for (i, row) in diffusion.into_iter().enumerate() {
        for phi in row {
            entries.push(RidgeEntry { a: unit(n, i), b: 0.0, phi });
        }
    }
    let sigma = RidgeMap::new(n, vec![n, d], entries)?;
    VectorFieldPair::new(Arc::new(mu), Arc::new(sigma))
}

impl VectorFieldSpec {
    pub fn build(&self) -> Result<VectorFieldPair> {
        match self {
            Self::Linear { drift, drift_offset, diffusion, diffusion_offset } => {
                let n = drift.len();
                let d = diffusion.len();
                if n == 0 || d == 0 || drift.iter().any(|r| r.len() != n) {
                    return shape_err("linear drift must be a nonempty square matrix");
                }
                if diffusion.iter().any(|m| m.len() != n || m.iter().any(|r| r.len() != n)) {
                    return shape_err("linear diffusion needs d square matrices of size n");
                }
                let b = drift_offset.clone().unwrap_or_else(|| vec![0.0; n]);
                let c = diffusion_offset.clone().unwrap_or_else(|| vec![vec![0.0; d]; n]);
                if b.len() != n || c.len() != n || c.iter().any(|r| r.len() != d) {
                    return shape_err("linear offsets have the wrong shape");
                }
                let mu = RidgeMap::new(
                    n,
                    vec![n],
                    (0..n).map(|i| RidgeEntry { a: drift[i].clone(), b: 0.0, phi: ScalarFn::linear(1.0, b[i]) }).collect(),
                )?;
                let mut entries = Vec::with_capacity(n * d);
                for i in 0..n {
                    for j in 0..d {
                        entries.push(RidgeEntry { a: diffusion[j][i].clone(), b: 0.0, phi: ScalarFn::linear(1.0, c[i][j]) });
                    }
                }
                VectorFieldPair::new(Arc::new(mu), Arc::new(RidgeMap::new(n, vec![n, d], entries)?))
            }
            Self::Polynomial { drift, diffusion } => componentwise(
                drift.iter().map(|c| ScalarFn::Poly { coeffs: c.clone() }).collect(),
                diffusion.iter().map(|r| r.iter().map(|c| ScalarFn::Poly { coeffs: c.clone() }).collect()).collect(),
            ),
            Self::Trigonometric { drift, diffusion } => {
                let f = |t: &Trig| ScalarFn::Sin { amp: t.amp, freq: t.freq, phase: t.phase, offset: t.offset };
                componentwise(drift.iter().map(f).collect(), diffusion.iter().map(|r| r.iter().map(f).collect()).collect())
            }
            Self::Componentwise { drift, diffusion } => componentwise(drift.clone(), diffusion.clone()),
            Self::Ridge { mu, sigma } => VectorFieldPair::new(Arc::new(mu.clone()), Arc::new(sigma.clone())),
        }
    }

    /// Scalar geometric Brownian motion `dX = X d𝐙` (with optional drift `a X`).
    pub fn scalar_linear(a: f64, s: f64) -> Self {
        Self::Linear { drift: vec![vec![a]], drift_offset: None, diffusion: vec![vec![vec![s]]], diffusion_offset: None }
    }
}
