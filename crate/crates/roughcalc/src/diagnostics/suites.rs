//! Oracle suites: algebraic identities of library-built objects, lift
//! statistics, closed-form RDE solutions and moment scaling.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scaling::{iterated_remainder_integral, kolmogorov_scaling_fit, ScalingFit};
use crate::controlled::ControlledPath;
use crate::error::{Error, Result};
use crate::grid_paths::{GridPath, StoredSample, TimeGrid};
use crate::integration::{rough_integral, stopped_consistency_check};
use crate::rde_flows::{rde_jacobian, rde_solve, VectorFieldSpec};
use crate::rng::{derive_seed, pairwise_sum, replica_seed};
use crate::rough_lift::{bracket, chen_defect, ibp_integral, ibp_integral_xm, ito_lift, joint_lift, sample_brownian, stratonovich_lift};
use crate::rough_lift::{LiftKind, MartingaleSample, RoughPath};
use crate::stochastic_formulas::{run_study, ConvergenceReport, DriverSpec, MeshFamily, PassCriteria, Sample};
use crate::tensor::Tensor;

/// One thresholded quantity; passes when `value ≤ threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self { name: name.to_string(), value, threshold, pass: value <= threshold }
    }
}

/// Checks as a CSV table with columns `check,value,threshold,pass`.
pub fn checks_csv(checks: &[Check]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["check", "value", "threshold", "pass"])?;
    for c in checks {
        w.write_record([c.name.clone(), c.value.to_string(), c.threshold.to_string(), c.pass.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Named list of checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub checks: Vec<Check>,
    pub pass: bool,
}

impl CheckReport {
    pub fn new(name: &str, checks: Vec<Check>) -> Self {
        let pass = checks.iter().all(|c| c.pass);
        Self { name: name.to_string(), checks, pass }
    }

    pub fn to_csv(&self) -> Result<String> {
        checks_csv(&self.checks)
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)? + "\n")?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv()?)?;
        Ok(())
    }
}

/// Random scenarios for the algebraic identities: a Brownian rough path
/// (Itô lift on even scenarios, Stratonovich on odd ones), an independent
/// Itô martingale `M = ∫(0.5 + 0.3 cos B) dB`, and controlled integrands built
/// from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgebraicSuite {
    pub scenarios: usize,
    pub steps: usize,
    pub dim: usize,
    pub refine: usize,
    pub tol: f64,
    pub seed: u64,
}

#[derive(Default, Clone, Copy)]
struct AlgebraicMax {
    ibp: f64,
    bracket_cross: f64,
    chen: f64,
    stopped: f64,
    additivity: f64,
}

fn algebraic_scenario(cfg: &AlgebraicSuite, r: usize) -> Result<AlgebraicMax> {
    let seed = replica_seed(cfg.seed, r as u64);
    let g = TimeGrid::unit(1.0, cfg.steps)?;
    let (d, n) = (cfg.dim, cfg.steps);
    let w = sample_brownian(g, d, derive_seed(seed, &[1]))?;
    let rx = if r.is_multiple_of(2) { ito_lift(&w, cfg.refine, seed)? } else { stratonovich_lift(&w, cfg.refine, seed)? };
    let b = sample_brownian(g, 1, derive_seed(seed, &[2]))?;
    let phi = b.map(|_, v| Tensor::matrix(1, 1, vec![0.5 + 0.3 * v.item().cos()]))?;
    let m = MartingaleSample::from_ito(&phi, &b)?;
    let mut out = AlgebraicMax::default();

    let pmx = ibp_integral(m.path(), rx.base())?;
    let pxm = ibp_integral_xm(rx.base(), m.path())?;
    for i in 0..n {
        for (off, (a, c)) in pmx.row(i).iter().zip(pxm.row(i)).enumerate() {
            let j = i + off + 1;
            let want = (m.path().value(j) - m.path().value(i)).outer(&(rx.base().value(j) - rx.base().value(i)));
            out.ibp = out.ibp.max((&(a + &c.transpose_last2()) - &want).max_abs());
        }
    }

    let joint = joint_lift(&rx, &m)?;
    for v in bracket(&joint).path().values() {
        out.bracket_cross = out.bracket_cross.max(v.block(0, d, d, 1).max_abs()).max(v.block(d, 0, 1, d).max_abs());
    }
    out.chen = chen_defect(&rx, n + 1)?.max(chen_defect(&joint, n + 1)?);

    let phi_d = b.map(|_, v| Tensor::from_fn(&[d, 1], |ix| 0.5 + 0.3 * (v.item() + ix[0] as f64).cos()))?;
    let md = MartingaleSample::from_ito(&phi_d, &b)?;
    let y = md.path().add(&GridPath::from_fn(g, |_, t| Tensor::from_fn(&[d], |ix| (t + ix[0] as f64).sin()))?)?;
    let dy = GridPath::from_fn(g, |_, t| Tensor::from_fn(&[d, d], |ix| (t * (1 + ix[0]) as f64 + ix[1] as f64).cos()))?;
    for tau in [0, r % (n + 1), n] {
        out.stopped = out.stopped.max(stopped_consistency_check(&y, &dy, &md, &rx, tau)?);
    }

    let x = rx.base();
    let integrand = x.map(|_, v| Tensor::from_fn(&[1, d], |ix| v.data()[ix[1]].cos()))?;
    let derivative = x.map(|_, v| Tensor::from_fn(&[1, d, d], |ix| if ix[1] == ix[2] { -v.data()[ix[1]].sin() } else { 0.0 }))?;
    let cp = ControlledPath::new(integrand, derivative)?;
    let split = 1 + r % (n - 1);
    let whole = rough_integral(&cp, &rx, 0, n)?;
    let parts = &rough_integral(&cp, &rx, 0, split)? + &rough_integral(&cp, &rx, split, n)?;
    out.additivity = (&whole - &parts).max_abs();
    Ok(out)
}

/// Largest deviation of each algebraic identity over all scenarios.
pub fn algebraic_suite(name: &str, cfg: &AlgebraicSuite) -> Result<CheckReport> {
    if cfg.scenarios == 0 || cfg.steps < 3 || cfg.dim == 0 {
        return Err(Error::Config("algebraic suite needs scenarios ≥ 1, steps ≥ 3 and dim ≥ 1".into()));
    }
    let all: Vec<AlgebraicMax> = (0..cfg.scenarios)
        .into_par_iter()
        .map(|r| algebraic_scenario(cfg, r).map_err(|e| Error::Replica { replica: r, source: Box::new(e) }))
        .collect::<Result<_>>()?;
    let worst = |f: fn(&AlgebraicMax) -> f64| all.iter().map(f).fold(0.0, f64::max);
    Ok(CheckReport::new(
        name,
        vec![
            Check::at_most("ibp_identity", worst(|a| a.ibp), cfg.tol),
            Check::at_most("joint_bracket_cross_blocks", worst(|a| a.bracket_cross), cfg.tol),
            Check::at_most("chen_defect", worst(|a| a.chen), cfg.tol),
            Check::at_most("stopped_rsi_consistency", worst(|a| a.stopped), cfg.tol),
            Check::at_most("rough_integral_additivity", worst(|a| a.additivity), cfg.tol),
        ],
    ))
}

/// Replica means of the terminal bracket `[𝐖]_T` of Itô and Stratonovich lifts
/// of one Brownian sample per replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiftStatistics {
    pub replicas: usize,
    pub t_end: f64,
    pub steps: usize,
    pub dim: usize,
    pub refine: usize,
    /// Relative tolerance in units of `T`.
    pub rel_tol: f64,
    pub seed: u64,
}

/// Itô: `max_{ij} |mean [𝐖]^{ij}_T − T δ_ij| / T`. Stratonovich: the largest
/// `|[𝐖]^{ij}_T| / T` over all replicas.
pub fn lift_statistics(name: &str, cfg: &LiftStatistics) -> Result<CheckReport> {
    if cfg.replicas == 0 || cfg.dim == 0 || cfg.t_end <= 0.0 {
        return Err(Error::Config("lift statistics need replicas ≥ 1, dim ≥ 1 and t_end > 0".into()));
    }
    let g = TimeGrid::unit(cfg.t_end, cfg.steps)?;
    let per: Vec<(Tensor, Tensor)> = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| {
            let seed = replica_seed(cfg.seed, r as u64);
            let w = sample_brownian(g, cfg.dim, derive_seed(seed, &[1]))?;
            let ito = bracket(&ito_lift(&w, cfg.refine, seed)?).path().last().clone();
            let strat = bracket(&stratonovich_lift(&w, cfg.refine, seed)?).path().last().clone();
            Ok((ito, strat))
        })
        .collect::<Result<_>>()?;
    let d = cfg.dim;
    let t = cfg.t_end;
    let mut diag = 0.0f64;
    let mut off = 0.0f64;
    for i in 0..d {
        for j in 0..d {
            let entries: Vec<f64> = per.iter().map(|(q, _)| q.at(&[i, j])).collect();
            let mean = pairwise_sum(&entries) / entries.len() as f64;
            if i == j {
                diag = diag.max((mean - t).abs() / t);
            } else {
                off = off.max(mean.abs() / t);
            }
        }
    }
    let strat = per.iter().map(|(_, s)| s.max_abs()).fold(0.0, f64::max) / t;
    Ok(CheckReport::new(
        name,
        vec![
            Check::at_most("ito_bracket_diagonal_rel", diag, cfg.rel_tol),
            Check::at_most("ito_bracket_offdiagonal_rel", off, cfg.rel_tol),
            Check::at_most("stratonovich_bracket_rel", strat, cfg.rel_tol),
        ],
    ))
}

/// `e^A` by scaling and squaring of a truncated Taylor series.
pub fn expm(a: &Tensor) -> Result<Tensor> {
    let n = a.shape()[0];
    if a.shape() != [n, n] {
        return Err(Error::Shape("expm needs a square matrix".into()));
    }
    let norm = a.norm();
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let b = a.scale(0.5f64.powi(squarings));
    let mut term = Tensor::identity(n);
    let mut sum = Tensor::identity(n);
    for k in 1..=20 {
        term = term.compose(&b)?.scale(1.0 / k as f64);
        sum += &term;
    }
    for _ in 0..squarings {
        sum = sum.compose(&sum)?;
    }
    Ok(sum)
}

/// Closed-form RDE checks: the scalar geometric equation `dX = X d𝐙` along
/// Stratonovich and Itô Brownian lifts against its pathwise solution
/// `X_0 exp(Z_t − ½[𝐙]_t)` (the bracket vanishes for the Stratonovich lift),
/// and the Jacobian of `dX = A X dt` against `e^{tA}` on the finest mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RdeOracle {
    pub mesh: MeshFamily,
    pub replicas: usize,
    /// Bridge refinement of the Itô areas.
    pub ito_refine: usize,
    pub x0: f64,
    pub min_order: f64,
    pub drift_matrix: Vec<Vec<f64>>,
    pub jacobian_tol: f64,
    pub seed: u64,
}

/// Studies of both lifts and the Jacobian check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdeOracleReport {
    pub name: String,
    pub studies: Vec<ConvergenceReport>,
    pub checks: Vec<Check>,
    pub pass: bool,
}

pub fn rde_oracle(name: &str, cfg: &RdeOracle) -> Result<RdeOracleReport> {
    cfg.mesh.validate()?;
    let vf = VectorFieldSpec::scalar_linear(0.0, 1.0).build()?;
    let x0 = Tensor::vector(vec![cfg.x0]);
    let criteria = PassCriteria::min_order(cfg.min_order);
    let mut studies = Vec::new();
    for (lift, refine, label) in [(LiftKind::Stratonovich, 1, "stratonovich"), (LiftKind::Ito, cfg.ito_refine, "ito")] {
        let driver = DriverSpec::Brownian { dim: 1, lift, refine };
        studies.push(run_study(&format!("{name}.gbm_{label}"), &cfg.mesh.meshes(), cfg.replicas, &criteria, |r| {
            let fam = driver.family(&cfg.mesh, cfg.mesh.finest_level(), replica_seed(cfg.seed, r as u64))?;
            (0..cfg.mesh.levels)
                .map(|l| {
                    let rz = fam.level(l)?;
                    let x = rde_solve(&vf, &rz, 0, &x0)?;
                    let br = bracket(&rz);
                    let g = rz.grid();
                    let mut err = 0.0f64;
                    let mut qv = 0.0f64;
                    for k in 0..=g.n_steps() {
                        let b = br.path().value(k).item();
                        err = err.max((x.value(k).item() - cfg.x0 * (rz.base().value(k).item() - 0.5 * b).exp()).abs());
                        qv = qv.max((b - if lift == LiftKind::Ito { g.time(k) } else { 0.0 }).abs());
                    }
                    Ok(Sample::from(err).with("bracket_vs_time", qv))
                })
                .collect()
        })?);
    }
    let a = &cfg.drift_matrix;
    let n = a.len();
    if n == 0 || a.iter().any(|r| r.len() != n) {
        return Err(Error::Config("drift_matrix must be a nonempty square matrix".into()));
    }
    let field = VectorFieldSpec::Linear { drift: a.clone(), drift_offset: None, diffusion: vec![vec![vec![0.0; n]; n]], diffusion_offset: None }.build()?;
    let grid = cfg.mesh.grid(cfg.mesh.finest_level())?;
    let start = Tensor::from_fn(&[n], |ix| 0.1 * (ix[0] + 1) as f64);
    let jac = rde_jacobian(&field, &RoughPath::zero(grid, 1), 0, &start)?;
    let am = Tensor::from_fn(&[n, n], |ix| a[ix[0]][ix[1]]);
    let mut jac_err = 0.0f64;
    for k in 0..=grid.n_steps() {
        jac_err = jac_err.max((jac.value(k) - &expm(&am.scale(grid.time(k)))?).max_abs());
    }
    let checks = vec![Check::at_most("linear_drift_jacobian_vs_expm", jac_err, cfg.jacobian_tol)];
    let pass = studies.iter().all(|s| s.pass) && checks.iter().all(|c| c.pass);
    Ok(RdeOracleReport { name: name.to_string(), studies, checks, pass })
}

/// Sample processes of the moment-scaling diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalingObject {
    /// Brownian paths; their increments are fitted.
    Brownian { dim: usize },
    /// `Π(R; M)` with `Y = sin X`, `Y′ = cos X`, `X` and `M` independent scalar
    /// Brownian motions; the driver is regarded as an `α`-rough path.
    Remainder,
}

/// Moment-scaling fit on freshly drawn samples with an exponent window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingStudy {
    pub object: ScalingObject,
    pub samples: usize,
    pub steps: usize,
    pub t_end: f64,
    pub level: usize,
    pub q: f64,
    #[serde(default)]
    pub min_exponent: Option<f64>,
    #[serde(default)]
    pub max_exponent: Option<f64>,
    /// Also write the samples to `<out>/<name>_samples/`.
    #[serde(default)]
    pub save_samples: bool,
    pub seed: u64,
}

impl ScalingStudy {
    pub fn draw(&self) -> Result<Vec<StoredSample>> {
        let g = TimeGrid::unit(self.t_end, self.steps)?;
        (0..self.samples)
            .into_par_iter()
            .map(|r| {
                let seed = replica_seed(self.seed, r as u64);
                match self.object {
                    ScalingObject::Brownian { dim } => Ok(StoredSample::Path(sample_brownian(g, dim, seed)?)),
                    ScalingObject::Remainder => {
                        let x = sample_brownian(g, 1, derive_seed(seed, &[1]))?;
                        let m = sample_brownian(g, 1, derive_seed(seed, &[2]))?;
                        let y = x.map(|_, v| Tensor::vector(vec![v.item().sin()]))?;
                        let yp = x.map(|_, v| Tensor::matrix(1, 1, vec![v.item().cos()]))?;
                        Ok(StoredSample::TwoParam(iterated_remainder_integral(&y, &yp, &x, &m)?))
                    }
                }
            })
            .collect()
    }
}

/// Scaling fit with its exponent window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub name: String,
    pub fit: ScalingFit,
    pub checks: Vec<Check>,
    pub pass: bool,
}

impl ScalingReport {
    pub fn new(name: &str, fit: ScalingFit, min_exponent: Option<f64>, max_exponent: Option<f64>) -> Self {
        let mut checks = Vec::new();
        if let Some(lo) = min_exponent {
            checks.push(Check { name: "min_exponent".into(), value: fit.exponent, threshold: lo, pass: fit.exponent >= lo });
        }
        if let Some(hi) = max_exponent {
            checks.push(Check::at_most("max_exponent", fit.exponent, hi));
        }
        let pass = checks.iter().all(|c| c.pass);
        Self { name: name.to_string(), fit, checks, pass }
    }

    /// Per-scale table with columns `gap_steps,scale,pairs,norm`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["gap_steps", "scale", "pairs", "norm"])?;
        for s in &self.fit.scales {
            w.write_record([s.gap_steps.to_string(), s.scale.to_string(), s.pairs.to_string(), s.norm.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

pub fn scaling_study(name: &str, cfg: &ScalingStudy, sample_dir: Option<&Path>) -> Result<ScalingReport> {
    let samples = cfg.draw()?;
    if let Some(dir) = sample_dir.filter(|_| cfg.save_samples) {
        std::fs::create_dir_all(dir)?;
        for (r, s) in samples.iter().enumerate() {
            let stem = dir.join(format!("sample_{r:05}"));
            match s {
                StoredSample::Path(p) => p.save(&stem)?,
                StoredSample::TwoParam(a) => a.save(&stem)?,
            }
        }
    }
    let fit = kolmogorov_scaling_fit(&samples, cfg.level, cfg.q)?;
    Ok(ScalingReport::new(name, fit, cfg.min_exponent, cfg.max_exponent))
}

/// Loads every `*.json` sample stem of `dir` in file-name order.
pub fn load_sample_dir(dir: &Path) -> Result<Vec<StoredSample>> {
    let mut stems: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .map(|p| p.with_extension(""))
        .collect();
    stems.sort();
    stems.iter().map(|s| crate::grid_paths::load_sample(s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm_closed_forms() {
        let r = expm(&Tensor::matrix(2, 2, vec![0.0, 3.0, -3.0, 0.0])).unwrap();
        let want = Tensor::matrix(2, 2, vec![3f64.cos(), 3f64.sin(), -3f64.sin(), 3f64.cos()]);
        assert!((&r - &want).max_abs() < 1e-13);
        let d = expm(&Tensor::matrix(2, 2, vec![-2.0, 0.0, 0.0, 0.5])).unwrap();
        assert!((d.at(&[0, 0]) - (-2f64).exp()).abs() < 1e-14 && (d.at(&[1, 1]) - 0.5f64.exp()).abs() < 1e-14);
        let n = expm(&Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 0.0])).unwrap();
        assert_eq!(n.data(), &[1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn algebraic_suite_is_exact_to_rounding() {
        let cfg = AlgebraicSuite { scenarios: 6, steps: 12, dim: 2, refine: 2, tol: 1e-12, seed: 4 };
        let r = algebraic_suite("alg", &cfg).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.checks.len(), 5);
        assert_eq!(r.checks[1].value, 0.0);
        assert!(algebraic_suite("alg", &AlgebraicSuite { steps: 2, ..cfg }).is_err());
    }

    #[test]
    fn lift_statistics_small_run() {
        let cfg = LiftStatistics { replicas: 200, t_end: 2.0, steps: 32, dim: 2, refine: 2, rel_tol: 0.05, seed: 1 };
        let r = lift_statistics("lift", &cfg).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.checks[2].value < 1e-13);
        let csv = r.to_csv().unwrap();
        assert!(csv.starts_with("check,value,threshold,pass\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn rde_oracle_small_run() {
        let cfg = RdeOracle {
            mesh: MeshFamily::new(1.0, 32, 4).unwrap(),
            replicas: 200,
            ito_refine: 8,
            x0: 1.0,
            min_order: 0.9,
            drift_matrix: vec![vec![-0.5, 1.0], vec![-1.0, -0.2]],
            jacobian_tol: 2e-3,
            seed: 3,
        };
        let r = rde_oracle("rde", &cfg).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.studies.len(), 2);
        assert!(r.studies[0].extras["bracket_vs_time"] < 1e-12);
        assert!(r.studies[1].extras["bracket_vs_time"] < 0.5);
    }

    #[test]
    fn scaling_study_saves_loadable_samples() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ScalingStudy {
            object: ScalingObject::Remainder,
            samples: 100,
            steps: 16,
            t_end: 1.0,
            level: 3,
            q: 6.0,
            min_exponent: Some(0.5),
            max_exponent: None,
            save_samples: true,
            seed: 2,
        };
        let r = scaling_study("k", &cfg, Some(dir.path())).unwrap();
        let loaded = load_sample_dir(dir.path()).unwrap();
        assert_eq!(loaded.len(), 100);
        let again = kolmogorov_scaling_fit(&loaded, 3, 6.0).unwrap();
        assert!((again.exponent - r.fit.exponent).abs() < 1e-12);
        assert!(r.to_csv().unwrap().starts_with("gap_steps,scale,pairs,norm\n"));
    }
}
