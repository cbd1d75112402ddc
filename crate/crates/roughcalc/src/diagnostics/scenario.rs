//! Strict JSON scenario configs, the scenario registry and the runner.
//!
//! A config names a registered scenario, its parameters and (for refinement
//! studies) the pass criteria:
//!
//! ```json
//! { "name": "transport_trivial",
//!   "scenario": { "kind": "transport", "params": { ... } },
//!   "criteria": { "min_order": 0.8 } }
//! ```
//!
//! Unknown keys anywhere are errors. Every scenario carries its own master
//! seed; replica `r` draws from the stream derived from `(seed, r)`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::suites::{
    algebraic_suite, checks_csv, lift_statistics, rde_oracle, scaling_study, AlgebraicSuite, CheckReport, LiftStatistics,
    RdeOracle, RdeOracleReport, ScalingReport, ScalingStudy,
};
use crate::controlled::{IdentityField, JetField, SampleBox, SpatialField};
use crate::error::{Error, Result};
use crate::functions::{RidgeMap, ScalarFn, SmoothMap};
use crate::iag::{
    iag_centering, verify_dminus, verify_good_approximation, verify_iag_partition, verify_iag_weak, verify_interpolation,
    CenteringReport, DminusScenario, GoodApproxScenario, IagScenario, InterpolationScenario, WeakIdentityReport,
};
use crate::rde_flows::{backward_flow_jet, rde_solution_jet, VectorFieldSpec};
use crate::stochastic_formulas::{
    verify_rag, verify_riw, verify_rsiw_study, verify_transport, ConvergenceReport, DriverSpec, MeshFamily, PassCriteria,
    RagInputs, RiwInputs, RsiwKind, RsiwScenario, RsiwTerms, RsiwVariant, TransportScenario,
};
use crate::tensor::Tensor;

/// `git describe` of the build, recorded in every report.
pub const BUILD: &str = env!("ROUGHCALC_GIT_DESCRIBE");

/// Evenly spaced lattice in the cube `[lo, hi]^n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lattice {
    pub lo: f64,
    pub hi: f64,
    /// Points per axis.
    pub resolution: usize,
}

/// Rough transport: `u(t, x) = g(φ(t, T; x)_0)` with `g` applied to the first
/// coordinate of the backward flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportConfig {
    pub vf: VectorFieldSpec,
    pub g: ScalarFn,
    pub driver: DriverSpec,
    pub mesh: MeshFamily,
    pub reference_levels: usize,
    pub lattice: Lattice,
    pub jet_points: usize,
    pub replicas: usize,
    pub seed: u64,
}

/// Field of a rough Itô–Wentzell study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RiwField {
    Identity,
    /// `F(t, x) = f(x_0)`.
    Spatial { f: ScalarFn },
    /// `F(t, x) = g(φ(t, T; x)_0)` for the backward flow of `vf`.
    Backward { vf: VectorFieldSpec, g: ScalarFn },
}

/// Rough Itô–Wentzell study of `F` along the solution of `path_vf` from `x0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiwConfig {
    pub field: RiwField,
    pub path_vf: VectorFieldSpec,
    pub x0: Vec<f64>,
    pub driver: DriverSpec,
    pub mesh: MeshFamily,
    pub seed: u64,
}

/// Rough Alekseev–Gröbner study: `F` is the backward flow of `vf` with
/// terminal `f(x_0)`, evaluated along the solution of `path_vf` from `x0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RagConfig {
    pub vf: VectorFieldSpec,
    pub path_vf: VectorFieldSpec,
    pub f: ScalarFn,
    pub x0: Vec<f64>,
    pub driver: DriverSpec,
    pub mesh: MeshFamily,
    pub seed: u64,
}

/// Rough stochastic Itô–Wentzell study; `terms` defaults to all terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RsiwConfig {
    pub kind: RsiwKind,
    pub variant: RsiwVariant,
    #[serde(default)]
    pub terms: RsiwTerms,
    pub mesh: MeshFamily,
    pub replicas: usize,
    pub seed: u64,
}

/// `3σ` centering test of `S^π` on one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CenteringConfig {
    pub scenario: IagScenario,
    pub level: usize,
}

/// Weak IAG identity with tolerance `3·SE + c·Δ^{1/2}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakConfig {
    pub scenario: IagScenario,
    pub c: f64,
}

/// Registered scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scenario {
    Algebraic(AlgebraicSuite),
    LiftStatistics(LiftStatistics),
    RdeOracle(RdeOracle),
    Transport(TransportConfig),
    Riw(RiwConfig),
    Rag(RagConfig),
    Rsiw(RsiwConfig),
    IagPartition(IagScenario),
    IagCentering(CenteringConfig),
    IagWeak(WeakConfig),
    Interpolation(InterpolationScenario),
    GoodApproximation(GoodApproxScenario),
    Dminus(DminusScenario),
    Kolmogorov(ScalingStudy),
}

/// Names and one-line descriptions of the registered scenarios.
pub const SCENARIOS: &[(&str, &str)] = &[
    ("algebraic", "IBP identity, joint-lift brackets, Chen defects, stopped RSI, additivity on random scenarios"),
    ("lift_statistics", "mean terminal bracket of Itô and Stratonovich Brownian lifts"),
    ("rde_oracle", "geometric RDE against its pathwise exponential; linear-drift Jacobian against expm"),
    ("transport", "constancy of u(t, φ(0,t;x)) for the backward flow jet along a finer reference flow"),
    ("riw", "rough Itô–Wentzell defect of a field along an RDE solution"),
    ("rag", "rough Alekseev–Gröbner defect of a backward flow along another RDE solution"),
    ("rsiw", "rough stochastic Itô–Wentzell defect (field, martingale or total), with optional dropped terms"),
    ("iag_partition", "per-path IAG partition defect lhs − L^π − S^π"),
    ("iag_centering", "3σ test of the mean of S^π"),
    ("iag_weak", "weak IAG identity E[lhs] = E[L^π] across meshes"),
    ("interpolation", "interpolation formula between two RDE flows"),
    ("good_approximation", "rough integral against classical integrals along piecewise-linear skeletons"),
    ("dminus", "D⁻ identity of the flow derivative along the augmented system"),
    ("kolmogorov", "empirical moment-scaling exponent of Brownian increments or the iterated remainder"),
];

impl Scenario {
    pub fn kind(&self) -> &'static str {
        let i = match self {
            Self::Algebraic(_) => 0,
            Self::LiftStatistics(_) => 1,
            Self::RdeOracle(_) => 2,
            Self::Transport(_) => 3,
            Self::Riw(_) => 4,
            Self::Rag(_) => 5,
            Self::Rsiw(_) => 6,
            Self::IagPartition(_) => 7,
            Self::IagCentering(_) => 8,
            Self::IagWeak(_) => 9,
            Self::Interpolation(_) => 10,
            Self::GoodApproximation(_) => 11,
            Self::Dminus(_) => 12,
            Self::Kolmogorov(_) => 13,
        };
        SCENARIOS[i].0
    }

    /// Whether the scenario is a refinement study judged by [`PassCriteria`].
    pub fn is_study(&self) -> bool {
        matches!(
            self,
            Self::Transport(_)
                | Self::Riw(_)
                | Self::Rag(_)
                | Self::Rsiw(_)
                | Self::IagPartition(_)
                | Self::Interpolation(_)
                | Self::GoodApproximation(_)
                | Self::Dminus(_)
        )
    }

    pub fn seed(&self) -> u64 {
        match self {
            Self::Algebraic(c) => c.seed,
            Self::LiftStatistics(c) => c.seed,
            Self::RdeOracle(c) => c.seed,
            Self::Transport(c) => c.seed,
            Self::Riw(c) => c.seed,
            Self::Rag(c) => c.seed,
            Self::Rsiw(c) => c.seed,
            Self::IagPartition(c) => c.seed,
            Self::IagCentering(c) => c.scenario.seed,
            Self::IagWeak(c) => c.scenario.seed,
            Self::Interpolation(c) => c.seed,
            Self::GoodApproximation(c) => c.seed,
            Self::Dminus(c) => c.seed,
            Self::Kolmogorov(c) => c.seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        let s = match self {
            Self::Algebraic(c) => &mut c.seed,
            Self::LiftStatistics(c) => &mut c.seed,
            Self::RdeOracle(c) => &mut c.seed,
            Self::Transport(c) => &mut c.seed,
            Self::Riw(c) => &mut c.seed,
            Self::Rag(c) => &mut c.seed,
            Self::Rsiw(c) => &mut c.seed,
            Self::IagPartition(c) => &mut c.seed,
            Self::IagCentering(c) => &mut c.scenario.seed,
            Self::IagWeak(c) => &mut c.scenario.seed,
            Self::Interpolation(c) => &mut c.seed,
            Self::GoodApproximation(c) => &mut c.seed,
            Self::Dminus(c) => &mut c.seed,
            Self::Kolmogorov(c) => &mut c.seed,
        };
        *s = seed;
    }
}

/// A scenario config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Report file stem.
    pub name: String,
    pub scenario: Scenario,
    /// Required for refinement studies, rejected otherwise (the other
    /// scenarios carry their thresholds in `params`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criteria: Option<PassCriteria>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(Error::Config(format!("name {:?} is not a valid file stem", self.name)));
        }
        match (self.scenario.is_study(), &self.criteria) {
            (true, None) => Err(Error::Config(format!("scenario {} needs `criteria`", self.scenario.kind()))),
            (false, Some(_)) => {
                Err(Error::Config(format!("scenario {} takes its thresholds in `params`, not `criteria`", self.scenario.kind())))
            }
            _ => Ok(()),
        }
    }
}

/// Result of a scenario run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Report {
    Study(ConvergenceReport),
    Checks(CheckReport),
    Rde(RdeOracleReport),
    Centering(CenteringReport),
    Weak(WeakIdentityReport),
    Scaling(ScalingReport),
}

impl Report {
    pub fn pass(&self) -> bool {
        match self {
            Self::Study(r) => r.pass,
            Self::Checks(r) => r.pass,
            Self::Rde(r) => r.pass,
            Self::Centering(r) => r.pass,
            Self::Weak(r) => r.pass,
            Self::Scaling(r) => r.pass,
        }
    }

    /// CSV tables: the main table (empty suffix) and any additional ones.
    pub fn tables(&self) -> Result<Vec<(String, String)>> {
        Ok(match self {
            Self::Study(r) => vec![(String::new(), r.to_csv()?)],
            Self::Checks(r) => vec![(String::new(), r.to_csv()?)],
            Self::Rde(r) => {
                let mut t = vec![(String::new(), checks_csv(&r.checks)?)];
                for s in &r.studies {
                    let suffix = s.name.rsplit('.').next().unwrap_or(&s.name).to_string();
                    t.push((suffix, s.to_csv()?));
                }
                t
            }
            Self::Centering(r) => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.serialize(r)?;
                let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
                vec![(String::new(), String::from_utf8(bytes).expect("csv output is UTF-8"))]
            }
            Self::Weak(r) => vec![(String::new(), r.to_csv()?)],
            Self::Scaling(r) => vec![(String::new(), r.to_csv()?)],
        })
    }
}

/// JSON report: config echo, build and the scenario's report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub name: String,
    pub scenario: String,
    pub build: String,
    pub seed: u64,
    pub pass: bool,
    pub config: RunConfig,
    pub report: Report,
}

fn first_coordinate(n: usize, phi: &ScalarFn) -> Result<Arc<dyn SmoothMap>> {
    Ok(Arc::new(RidgeMap::first_coordinate(n, phi.clone())?))
}

fn run_transport(name: &str, c: &TransportConfig, criteria: &PassCriteria) -> Result<ConvergenceReport> {
    let vf = c.vf.build()?;
    let n = vf.state_dim();
    if c.driver.dim() != vf.driver_dim() {
        return Err(Error::Config("driver dimension does not match the vector fields".into()));
    }
    let sc = TransportScenario {
        g: first_coordinate(n, &c.g)?,
        vf,
        driver: c.driver.clone(),
        mesh: c.mesh,
        reference_levels: c.reference_levels,
        points: SampleBox::cube(n, c.lattice.lo, c.lattice.hi).lattice(c.lattice.resolution),
        jet_points: c.jet_points,
        replicas: c.replicas,
        seed: c.seed,
    };
    verify_transport(name, &sc, criteria)
}

fn check_dims(vf_dim: (usize, usize), x0: &[f64], driver: &DriverSpec) -> Result<()> {
    if x0.len() != vf_dim.0 || driver.dim() != vf_dim.1 {
        return Err(Error::Config("x0 and driver dimensions must match the vector fields".into()));
    }
    Ok(())
}

fn run_riw(name: &str, c: &RiwConfig, criteria: &PassCriteria) -> Result<ConvergenceReport> {
    c.mesh.validate()?;
    let path_vf = c.path_vf.build()?;
    let (n, d) = (path_vf.state_dim(), path_vf.driver_dim());
    check_dims((n, d), &c.x0, &c.driver)?;
    let fam = c.driver.family(&c.mesh, c.mesh.finest_level(), c.seed)?;
    let x0 = Tensor::vector(c.x0.clone());
    verify_riw(name, &c.mesh, criteria, |l| {
        let rx = fam.level(l)?;
        let g = *rx.grid();
        let field: Arc<dyn JetField> = match &c.field {
            RiwField::Identity => Arc::new(IdentityField::new(g, n, d)),
            RiwField::Spatial { f } => Arc::new(SpatialField::new(g, d, first_coordinate(n, f)?)),
            RiwField::Backward { vf, g: phi } => {
                let vf = vf.build()?;
                if vf.state_dim() != n || vf.driver_dim() != d {
                    return Err(Error::Config("field and path vector fields differ in dimension".into()));
                }
                Arc::new(backward_flow_jet(&vf, &rx, first_coordinate(n, phi)?)?)
            }
        };
        Ok(RiwInputs { field, path: rde_solution_jet(&path_vf, &rx, &x0)?, rx })
    })
}

fn run_rag(name: &str, c: &RagConfig, criteria: &PassCriteria) -> Result<ConvergenceReport> {
    c.mesh.validate()?;
    let vf = c.vf.build()?;
    let path_vf = c.path_vf.build()?;
    let (n, d) = (vf.state_dim(), vf.driver_dim());
    if path_vf.state_dim() != n || path_vf.driver_dim() != d {
        return Err(Error::Config("vf and path_vf differ in dimension".into()));
    }
    check_dims((n, d), &c.x0, &c.driver)?;
    let fam = c.driver.family(&c.mesh, c.mesh.finest_level(), c.seed)?;
    let x0 = Tensor::vector(c.x0.clone());
    let f = first_coordinate(n, &c.f)?;
    verify_rag(name, &c.mesh, criteria, |l| {
        let rz = fam.level(l)?;
        Ok(RagInputs { vf: vf.clone(), path: rde_solution_jet(&path_vf, &rz, &x0)?, f: f.clone(), rz })
    })
}

/// Runs a parsed config (seed overrides already applied).
pub fn execute(cfg: &RunConfig, out: &Path) -> Result<Report> {
    cfg.validate()?;
    let name = cfg.name.as_str();
    let criteria = cfg.criteria.clone().unwrap_or_default();
    Ok(match &cfg.scenario {
        Scenario::Algebraic(c) => Report::Checks(algebraic_suite(name, c)?),
        Scenario::LiftStatistics(c) => Report::Checks(lift_statistics(name, c)?),
        Scenario::RdeOracle(c) => Report::Rde(rde_oracle(name, c)?),
        Scenario::Transport(c) => Report::Study(run_transport(name, c, &criteria)?),
        Scenario::Riw(c) => Report::Study(run_riw(name, c, &criteria)?),
        Scenario::Rag(c) => Report::Study(run_rag(name, c, &criteria)?),
        Scenario::Rsiw(c) => {
            let sc = RsiwScenario { kind: c.kind, mesh: c.mesh, replicas: c.replicas, seed: c.seed };
            Report::Study(verify_rsiw_study(name, &sc, c.variant, c.terms, &criteria)?)
        }
        Scenario::IagPartition(c) => Report::Study(verify_iag_partition(name, c, &criteria)?),
        Scenario::IagCentering(c) => Report::Centering(iag_centering(&c.scenario, c.level)?),
        Scenario::IagWeak(c) => Report::Weak(verify_iag_weak(name, &c.scenario, c.c)?),
        Scenario::Interpolation(c) => Report::Study(verify_interpolation(name, c, &criteria)?),
        Scenario::GoodApproximation(c) => Report::Study(verify_good_approximation(name, c, &criteria)?),
        Scenario::Dminus(c) => Report::Study(verify_dminus(name, c, &criteria)?),
        Scenario::Kolmogorov(c) => Report::Scaling(scaling_study(name, c, Some(&out.join(format!("{name}_samples"))))?),
    })
}

/// Overrides applied on top of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: PathBuf,
}

/// Files written by a run and its verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub pass: bool,
    pub files: Vec<PathBuf>,
    pub envelope: Envelope,
}

/// Loads, runs and writes `<out>/<name>.json`, `<out>/<name>.csv` and
/// `<out>/<name>.<table>.csv` for additional tables.
pub fn run_scenario(config: &Path, opts: &RunOptions) -> Result<RunSummary> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = opts.seed {
        cfg.scenario.set_seed(seed);
    }
    std::fs::create_dir_all(&opts.out)?;
    let report = execute(&cfg, &opts.out)?;
    let envelope = Envelope {
        name: cfg.name.clone(),
        scenario: cfg.scenario.kind().to_string(),
        build: BUILD.to_string(),
        seed: cfg.scenario.seed(),
        pass: report.pass(),
        config: cfg.clone(),
        report,
    };
    let mut files = Vec::new();
    let json = opts.out.join(format!("{}.json", cfg.name));
    std::fs::write(&json, serde_json::to_string_pretty(&envelope)? + "\n")?;
    files.push(json);
    for (suffix, table) in envelope.report.tables()? {
        let file = if suffix.is_empty() { format!("{}.csv", cfg.name) } else { format!("{}.{suffix}.csv", cfg.name) };
        let path = opts.out.join(file);
        std::fs::write(&path, table)?;
        files.push(path);
    }
    Ok(RunSummary { name: cfg.name, pass: envelope.pass, files, envelope })
}

/// Process exit code: 0 pass, 1 failed criteria, 2 configuration error,
/// 3 numerical divergence.
pub fn exit_code(result: &Result<RunSummary>) -> i32 {
    match result {
        Ok(s) if s.pass => 0,
        Ok(_) => 1,
        Err(e) if e.is_divergence() => 3,
        Err(_) => 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    const TRIVIAL: &str = r#"{
        "name": "trivial",
        "scenario": { "kind": "transport", "params": {
            "vf": { "kind": "componentwise",
                    "drift": [ { "kind": "poly", "coeffs": [0.0] } ],
                    "diffusion": [ [ { "kind": "poly", "coeffs": [0.0] } ] ] },
            "g": { "kind": "tanh", "amp": 1.0, "scale": 1.0 },
            "driver": { "kind": "brownian", "dim": 1, "lift": "stratonovich" },
            "mesh": { "t_end": 1.0, "base_steps": 8, "levels": 3 },
            "reference_levels": 1,
            "lattice": { "lo": -1.0, "hi": 1.0, "resolution": 5 },
            "jet_points": 1,
            "replicas": 3,
            "seed": 1 } },
        "criteria": { "min_order": 0.8 }
    }"#;

    #[test]
    fn trivial_transport_passes_with_zero_residuals() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write(dir.path(), "t.json", TRIVIAL);
        let opts = RunOptions { seed: None, out: dir.path().join("out") };
        let res = run_scenario(&cfg, &opts);
        assert_eq!(exit_code(&res), 0);
        let s = res.unwrap();
        match &s.envelope.report {
            Report::Study(r) => assert!(r.residuals.iter().all(|&x| x == 0.0)),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.files.len(), 2);
        let json = std::fs::read_to_string(&s.files[0]).unwrap();
        assert!(json.contains("\"build\"") && json.contains("\"config\""));
        let back: Envelope = serde_json::from_str(&json).unwrap();
        assert_eq!(back.config, s.envelope.config);
    }

    #[test]
    fn reports_are_deterministic_and_seed_overrides_apply() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write(dir.path(), "t.json", &TRIVIAL.replace("\"coeffs\": [0.0] } ] ]", "\"coeffs\": [0.3, 0.2] } ] ]"));
        let run = |sub: &str, seed: Option<u64>| {
            let s = run_scenario(&cfg, &RunOptions { seed, out: dir.path().join(sub) }).unwrap();
            s.files.iter().map(|f| std::fs::read(f).unwrap()).collect::<Vec<_>>()
        };
        let a = run("a", None);
        assert_eq!(a, run("b", None));
        let c = run("c", Some(99));
        assert_ne!(a, c);
        assert!(String::from_utf8(c[0].clone()).unwrap().contains("\"seed\": 99"));
    }

    #[test]
    fn unknown_keys_and_scenarios_are_configuration_errors() {
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions { seed: None, out: dir.path().join("out") };
        let bad_key = write(dir.path(), "k.json", &TRIVIAL.replace("\"jet_points\"", "\"jet_pionts\""));
        let res = run_scenario(&bad_key, &opts);
        assert_eq!(exit_code(&res), 2);
        assert!(res.unwrap_err().to_string().contains("jet_pionts"));
        let nested = write(dir.path(), "n.json", &TRIVIAL.replace("\"scale\": 1.0", "\"scale\": 1.0, \"slope\": 2.0"));
        assert!(run_scenario(&nested, &opts).unwrap_err().to_string().contains("slope"));
        let top = write(dir.path(), "top.json", &TRIVIAL.replace("\"criteria\"", "\"extra\": 1, \"criteria\""));
        assert!(run_scenario(&top, &opts).unwrap_err().to_string().contains("extra"));
        let unknown = write(dir.path(), "u.json", &TRIVIAL.replace("\"kind\": \"transport\"", "\"kind\": \"teleport\""));
        let err = run_scenario(&unknown, &opts).unwrap_err().to_string();
        assert!(err.contains("teleport"), "{err}");
        let missing = write(dir.path(), "m.json", &TRIVIAL.replace(",\n        \"criteria\": { \"min_order\": 0.8 }", ""));
        assert!(run_scenario(&missing, &opts).unwrap_err().to_string().contains("criteria"));
        assert_eq!(exit_code(&run_scenario(&dir.path().join("absent.json"), &opts)), 2);
    }

    #[test]
    fn divergence_maps_to_exit_code_three() {
        let dir = tempfile::tempdir().unwrap();
        let blowup = TRIVIAL
            .replace("\"drift\": [ { \"kind\": \"poly\", \"coeffs\": [0.0] } ]", "\"drift\": [ { \"kind\": \"poly\", \"coeffs\": [0.0, 0.0, 0.0, 50.0] } ]")
            .replace("\"lo\": -1.0, \"hi\": 1.0", "\"lo\": 2.0, \"hi\": 3.0");
        let cfg = write(dir.path(), "d.json", &blowup);
        let res = run_scenario(&cfg, &RunOptions { seed: None, out: dir.path().to_path_buf() });
        let err = res.as_ref().unwrap_err();
        assert!(err.is_divergence(), "{err}");
        assert!(err.to_string().contains("replica 0"));
        assert_eq!(exit_code(&res), 3);
    }

    #[test]
    fn registry_is_consistent() {
        let names: Vec<&str> = SCENARIOS.iter().map(|s| s.0).collect();
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        let cfg = RunConfig::parse(TRIVIAL).unwrap();
        assert_eq!(cfg.scenario.kind(), "transport");
        assert!(cfg.scenario.is_study());
        let mut s = cfg.scenario.clone();
        s.set_seed(5);
        assert_eq!(s.seed(), 5);
    }
}
