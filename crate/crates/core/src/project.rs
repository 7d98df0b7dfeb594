//! Project files and the end-to-end workflow built on them.
//!
//! A project file is one JSON document holding the network, the per-mode
//! certificates of every subsystem and the settings of each step. Maps keyed
//! by subsystem id accept `"*"` as a fallback entry.
//!
//! Subsystems whose description, noise and certificates coincide (up to their
//! id and wiring) are checked once; the result is shared with the others.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bound::{safety_bound, BoundError, SafetyBound};
use crate::cegis::{CegisError, SynthesisConfig};
use crate::certify::{
    check_apbc, check_cbc, ApbcCertificate, ApbcDesc, CbcCertificate, CbcDesc, CertConstants, CertStatus,
    CertifyError, CheckReport, UnsafeSemantics,
};
use crate::compose::{compose_abc, ComposeError, Composition, SmallGainReport};
use crate::dwell::{
    common_barrier_apbc, estimate_mu, lift_to_apbc, Derivation, DwellError, DwellParams, MuEstimate,
    DEFAULT_RATIO_FLOOR,
};
use crate::fixtures::{Fixture, FixtureError, FixtureKind};
use crate::grid::{GridConfig, Resolution};
use crate::model::{ModelError, Network, NetworkDesc, Violation};
use crate::sim::{run_monte_carlo, SimConfig, SimError, SimReport};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProjectError {
    #[error("{message} (line {line}, column {column})")]
    Syntax { line: usize, column: usize, message: String },
    #[error("unsupported schema_version {0}, expected {SCHEMA_VERSION}")]
    Version(u32),
    #[error("{0}")]
    Schema(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Certify(#[from] CertifyError),
    #[error(transparent)]
    Dwell(#[from] DwellError),
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Cegis(#[from] CegisError),
    #[error(transparent)]
    Fixture(#[from] FixtureError),
}

impl ProjectError {
    /// Errors that report a mathematical failure rather than bad input.
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            ProjectError::Compose(ComposeError::SmallGain(_) | ComposeError::Infeasible { .. })
                | ProjectError::Dwell(DwellError::DwellTooShort { .. } | DwellError::NegativeBarrier { .. })
                | ProjectError::Bound(BoundError::OutOfRange(_))
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionSettings {
    /// Fixed scalings; searched for when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scalings: Option<Vec<f64>>,
    #[serde(default)]
    pub semantics: UnsafeSemantics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSettings {
    pub horizon: u64,
}

impl Default for BoundSettings {
    fn default() -> Self {
        Self { horizon: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectFile {
    pub schema_version: u32,
    pub system: NetworkDesc,
    /// Per-mode certificates by subsystem id.
    #[serde(default)]
    pub certificates: BTreeMap<String, Vec<CbcDesc>>,
    /// Dwell parameters by subsystem id; subsystems without an entry need a
    /// barrier shared by all modes.
    #[serde(default)]
    pub dwell: BTreeMap<String, DwellParams>,
    #[serde(default)]
    pub composition: CompositionSettings,
    #[serde(default)]
    pub bound: BoundSettings,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub simulation: SimConfig,
}

impl ProjectFile {
    pub fn from_json(text: &str) -> Result<Self, ProjectError> {
        serde_json::from_str(text).map_err(|e| ProjectError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("project files serialize")
    }

    /// Project reproducing a worked example, with its published certificates.
    pub fn from_fixture(f: &Fixture) -> Self {
        let step = match f.kind {
            FixtureKind::RoomTemp => 0.05,
            FixtureKind::TwoMode => 0.1,
        };
        Self {
            schema_version: SCHEMA_VERSION,
            system: f.network.clone(),
            certificates: [("*".to_string(), f.certificates.clone())].into(),
            dwell: f.dwell.iter().map(|d| ("*".to_string(), *d)).collect(),
            composition: CompositionSettings::default(),
            bound: BoundSettings { horizon: f.claim.horizon },
            synthesis: SynthesisConfig::default(),
            grid: GridConfig::with_step(step),
            simulation: SimConfig {
                trajectories: 10_000,
                horizon: f.claim.horizon as usize,
                seed: 42,
                retain: 10,
                initial_mode: 0,
                allow_unverified: true,
            },
        }
    }
}

fn keyed<'a, T>(map: &'a BTreeMap<String, T>, id: &str) -> Option<&'a T> {
    map.get(id).or_else(|| map.get("*"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeCheck {
    pub mode: usize,
    pub status: CertStatus,
    pub reports: Vec<CheckReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsystemCheck {
    pub id: String,
    /// Subsystem whose check result is reused.
    pub representative: String,
    pub modes: Vec<ModeCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub schema_version: u32,
    pub classes: usize,
    pub verified: bool,
    pub subsystems: Vec<SubsystemCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsystemLift {
    pub id: String,
    pub representative: String,
    pub certificate: ApbcDesc,
    pub required_dwell: u32,
    pub derivation: Vec<Derivation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<MuEstimate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reports: Vec<CheckReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftOutcome {
    pub schema_version: u32,
    pub verified: bool,
    pub subsystems: Vec<SubsystemLift>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposeOutcome {
    pub schema_version: u32,
    pub small_gain: SmallGainReport,
    pub scalings: Vec<f64>,
    pub semantics: UnsafeSemantics,
    pub constants: CertConstants,
    pub status: CertStatus,
}

impl ComposeOutcome {
    fn new(c: &Composition) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            small_gain: c.small_gain.clone(),
            scalings: c.scalings.clone(),
            semantics: c.certificate.semantics,
            constants: c.certificate.constants.clone(),
            status: c.certificate.status.clone(),
        }
    }
}

/// A validated project.
#[derive(Debug, Clone)]
pub struct Project {
    pub file: ProjectFile,
    pub network: Network,
    pub warnings: Vec<Violation>,
}

impl Project {
    pub fn new(file: ProjectFile) -> Result<Self, ProjectError> {
        if file.schema_version != SCHEMA_VERSION {
            return Err(ProjectError::Version(file.schema_version));
        }
        let network = Network::from_desc(&file.system)?;
        let warnings = network.ensure_valid()?;
        for (what, keys) in [
            ("certificates", file.certificates.keys().collect::<Vec<_>>()),
            ("dwell", file.dwell.keys().collect()),
        ] {
            if let Some(k) = keys.into_iter().find(|k| *k != "*" && network.index_of(k).is_none()) {
                return Err(ProjectError::Schema(format!("{what}: unknown subsystem `{k}`")));
            }
        }
        if let Some(s) = &file.composition.scalings {
            if s.len() != network.len() {
                return Err(ProjectError::Schema(format!(
                    "composition.scalings has {} entries for {} subsystems",
                    s.len(),
                    network.len()
                )));
            }
        }
        Ok(Self { file, network, warnings })
    }

    pub fn from_json(text: &str) -> Result<Self, ProjectError> {
        Self::new(ProjectFile::from_json(text)?)
    }

    pub fn from_fixture(f: &Fixture) -> Result<Self, ProjectError> {
        Self::new(ProjectFile::from_fixture(f))
    }

    fn id(&self, i: usize) -> &str {
        &self.network.subsystems[i].id
    }

    pub fn certificates_for(&self, i: usize) -> Result<Vec<CbcCertificate>, ProjectError> {
        let sys = &self.network.subsystems[i];
        let descs = keyed(&self.file.certificates, &sys.id)
            .ok_or_else(|| ProjectError::Schema(format!("certificates: nothing given for `{}`", sys.id)))?;
        Ok(descs.iter().map(|d| CbcCertificate::from_desc(sys, d)).collect::<Result<Vec<_>, _>>()?)
    }

    /// Index of the representative of each subsystem's symmetry class.
    pub fn symmetry_classes(&self) -> Vec<usize> {
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        (0..self.network.len())
            .map(|i| {
                let s = &self.network.subsystems[i];
                let mut d = s.to_desc();
                d.id.clear();
                d.outputs.clear();
                let key = serde_json::json!({
                    "sys": d,
                    "noise": format!("{:?}", s.noise),
                    "certs": keyed(&self.file.certificates, &s.id),
                    "dwell": keyed(&self.file.dwell, &s.id),
                })
                .to_string();
                *seen.entry(key).or_insert(i)
            })
            .collect()
    }

    fn class_count(reps: &[usize]) -> usize {
        reps.iter().enumerate().filter(|(i, r)| i == *r).count()
    }

    /// Grid check of every per-mode certificate.
    pub fn check(&self) -> Result<CheckOutcome, ProjectError> {
        let reps = self.symmetry_classes();
        let mut done: BTreeMap<usize, Vec<ModeCheck>> = BTreeMap::new();
        let mut subsystems = Vec::with_capacity(reps.len());
        for (i, &r) in reps.iter().enumerate() {
            if !done.contains_key(&r) {
                let sys = &self.network.subsystems[r];
                let mut modes = Vec::new();
                for c in self.certificates_for(r)? {
                    let reports = check_cbc(sys, &c, &self.file.grid)?;
                    modes.push(ModeCheck { mode: c.mode, status: CertStatus::from_reports(&reports), reports });
                }
                done.insert(r, modes);
            }
            subsystems.push(SubsystemCheck {
                id: self.id(i).to_string(),
                representative: self.id(r).to_string(),
                modes: done[&r].clone(),
            });
        }
        let verified = subsystems.iter().all(|s| s.modes.iter().all(|m| m.status.is_verified()));
        Ok(CheckOutcome { schema_version: SCHEMA_VERSION, classes: Self::class_count(&reps), verified, subsystems })
    }

    /// Augmented certificates of every subsystem. With `verify`, each is
    /// grid-checked and carries the resulting status.
    pub fn lift(&self, verify: bool) -> Result<(Vec<ApbcCertificate>, LiftOutcome), ProjectError> {
        let reps = self.symmetry_classes();
        let mut done: BTreeMap<usize, SubsystemLift> = BTreeMap::new();
        let mut certs: BTreeMap<usize, ApbcCertificate> = BTreeMap::new();
        let mut warnings = Vec::new();
        for &r in &reps {
            if done.contains_key(&r) {
                continue;
            }
            let sys = &self.network.subsystems[r];
            let cbcs = self.certificates_for(r)?;
            let (lifted, mu) = match keyed(&self.file.dwell, &sys.id) {
                Some(params) => {
                    let compiled: Vec<_> = cbcs.iter().map(|c| c.barrier.compile()).collect();
                    let mu = estimate_mu(&compiled, &sys.state_set, &self.file.grid, DEFAULT_RATIO_FLOOR)?;
                    if mu.raw > params.mu {
                        warnings.push(format!(
                            "`{}`: barrier ratio reaches {:.4} on the grid, above the declared mu = {}",
                            sys.id, mu.raw, params.mu
                        ));
                    }
                    (lift_to_apbc(&cbcs, params)?, Some(mu))
                }
                None => {
                    if cbcs.iter().any(|c| c.barrier != cbcs[0].barrier) {
                        return Err(ProjectError::Schema(format!(
                            "`{}`: modes have different barriers, so dwell parameters are required",
                            sys.id
                        )));
                    }
                    (common_barrier_apbc(&cbcs)?, None)
                }
            };
            let mut cert = lifted.certificate;
            let reports = if verify {
                let reports = check_apbc(sys, &cert, &self.file.grid)?;
                cert.status = CertStatus::from_reports(&reports);
                reports
            } else {
                Vec::new()
            };
            done.insert(
                r,
                SubsystemLift {
                    id: String::new(),
                    representative: sys.id.clone(),
                    certificate: cert.to_desc(),
                    required_dwell: lifted.required_dwell,
                    derivation: lifted.derivation,
                    mu,
                    reports,
                },
            );
            certs.insert(r, cert);
        }
        let subsystems: Vec<SubsystemLift> = reps
            .iter()
            .enumerate()
            .map(|(i, r)| SubsystemLift { id: self.id(i).to_string(), ..done[r].clone() })
            .collect();
        let apbcs: Vec<ApbcCertificate> = reps.iter().map(|r| certs[r].clone()).collect();
        let verified = apbcs.iter().all(|c| c.status.is_verified());
        Ok((apbcs, LiftOutcome { schema_version: SCHEMA_VERSION, verified, subsystems, warnings }))
    }

    /// Network certificate from the augmented ones. It is marked verified
    /// when every component is.
    pub fn compose(&self, apbcs: &[ApbcCertificate]) -> Result<(Composition, ComposeOutcome), ProjectError> {
        let s = &self.file.composition;
        let mut c = compose_abc(&self.network, apbcs, s.scalings.clone(), s.semantics)?;
        if apbcs.iter().all(|a| a.status.is_verified()) {
            let res = apbcs
                .iter()
                .map(|a| match a.status {
                    CertStatus::Verified { resolution } => resolution,
                    _ => None,
                })
                .try_fold(0.0f64, |acc, r| r.map(|h| acc.max(h)));
            c.certificate.status = CertStatus::Verified { resolution: res };
        }
        let out = ComposeOutcome::new(&c);
        Ok((c, out))
    }

    pub fn bound(&self, k: &CertConstants) -> Result<SafetyBound, ProjectError> {
        Ok(safety_bound(k.gamma, k.lambda, k.kappa, k.psi, self.file.bound.horizon)?)
    }

    pub fn simulate(&self, c: &Composition) -> Result<SimReport, ProjectError> {
        Ok(run_monte_carlo(&self.network, &c.certificate, &self.file.simulation)?)
    }
}

/// Settings of a worked-example run.
#[derive(Debug, Clone)]
pub struct DemoConfig {
    pub kind: FixtureKind,
    pub size: usize,
    pub trajectories: usize,
    pub seed: u64,
    pub retain: usize,
    /// Overrides the fixture's default checking grid.
    pub grid: Option<GridConfig>,
}

impl DemoConfig {
    pub fn new(kind: FixtureKind, size: usize) -> Self {
        Self { kind, size, trajectories: 10_000, seed: 42, retain: 10, grid: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: usize,
    pub verified: bool,
    /// Refuted condition and its violation, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub schema_version: u32,
    pub fixture: FixtureKind,
    pub size: usize,
    pub grid_resolution: Option<f64>,
    pub symmetry_classes: usize,
    pub checks: Vec<ModeSummary>,
    pub lift: SubsystemLift,
    pub composition: ComposeOutcome,
    pub bound: SafetyBound,
    pub claimed_safe_probability: f64,
    pub formula_safe_probability: f64,
    pub simulation: SimReport,
    pub notes: Vec<String>,
}

impl DemoReport {
    /// All published certificates passed their grid checks.
    pub fn certificates_verified(&self) -> bool {
        self.checks.iter().all(|c| c.verified) && self.lift.certificate.status.is_verified()
    }
}

/// Everything a worked example produces, including intermediate artifacts.
pub struct DemoRun {
    pub project: Project,
    pub check: CheckOutcome,
    pub lift: LiftOutcome,
    pub report: DemoReport,
}

/// Check, lift, compose, bound and simulate one of the worked examples.
/// Simulation goes ahead when a published certificate fails its check, and
/// the report says so.
pub fn run_demo(cfg: &DemoConfig) -> Result<DemoRun, ProjectError> {
    let fixture = Fixture::build(cfg.kind, cfg.size)?;
    let mut file = ProjectFile::from_fixture(&fixture);
    if let Some(g) = &cfg.grid {
        file.grid = g.clone();
    }
    file.simulation.trajectories = cfg.trajectories;
    file.simulation.seed = cfg.seed;
    file.simulation.retain = cfg.retain;
    let project = Project::new(file)?;
    let check = project.check()?;
    let (apbcs, lift) = project.lift(true)?;
    let (composition, compose_out) = project.compose(&apbcs)?;
    let bound = project.bound(&composition.certificate.constants)?;
    let simulation = project.simulate(&composition)?;

    let mut notes = lift.warnings.clone();
    let checks: Vec<ModeSummary> = check.subsystems[0]
        .modes
        .iter()
        .map(|m| ModeSummary {
            mode: m.mode,
            verified: m.status.is_verified(),
            failure: match &m.status {
                CertStatus::Refuted { condition, counterexample } => Some(format!(
                    "{condition:?} violated by {:.4e} at x = {:?}",
                    counterexample.violation, counterexample.x
                )),
                _ => None,
            },
        })
        .collect();
    if checks.iter().any(|c| !c.verified) {
        notes.push("a published per-mode certificate fails its grid check".into());
    }
    if !lift.verified {
        notes.push("the augmented certificate fails its grid check".into());
    }
    let formula = bound.safe_probability();
    let claim = fixture.claim.safe_probability;
    if (formula - claim).abs() >= 0.005 {
        notes.push(format!("the bound formula gives {formula:.4}, the published claim is {claim:.2}"));
    }
    notes.extend(simulation.warnings.iter().cloned());
    let report = DemoReport {
        schema_version: SCHEMA_VERSION,
        fixture: cfg.kind,
        size: cfg.size,
        grid_resolution: match project.file.grid.resolution {
            Resolution::Step(h) => Some(h),
            Resolution::PointsPerDim(_) => None,
        },
        symmetry_classes: check.classes,
        checks,
        lift: lift.subsystems[0].clone(),
        composition: compose_out,
        bound,
        claimed_safe_probability: claim,
        formula_safe_probability: formula,
        simulation,
        notes,
    };
    Ok(DemoRun { project, check, lift, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::two_mode;

    #[test]
    fn fixture_project_round_trips() {
        let f = two_mode(3).unwrap();
        let file = ProjectFile::from_fixture(&f);
        let back = ProjectFile::from_json(&file.to_json()).unwrap();
        assert_eq!(back, file);
        let p = Project::new(back).unwrap();
        assert_eq!(p.symmetry_classes(), vec![0, 0, 0]);
    }

    #[test]
    fn unknown_keys_report_position() {
        let f = two_mode(2).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&ProjectFile::from_fixture(&f).to_json()).unwrap();
        v["bound"]["horizn"] = 5.into();
        let text = serde_json::to_string_pretty(&v).unwrap();
        match ProjectFile::from_json(&text) {
            Err(ProjectError::Syntax { line, column, message }) => {
                assert!(line > 1 && column > 0);
                assert!(message.contains("horizn"));
            }
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_subsystem_key_is_rejected() {
        let f = two_mode(2).unwrap();
        let mut file = ProjectFile::from_fixture(&f);
        file.dwell.insert("nope".into(), file.dwell["*"]);
        assert!(matches!(Project::new(file), Err(ProjectError::Schema(_))));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut file = ProjectFile::from_fixture(&two_mode(2).unwrap());
        file.schema_version = 7;
        assert!(matches!(Project::new(file), Err(ProjectError::Version(7))));
    }

    #[test]
    fn lift_reproduces_published_constants() {
        let p = Project::from_fixture(&two_mode(2).unwrap()).unwrap();
        let (apbcs, out) = p.lift(false).unwrap();
        let k = &apbcs[1].constants;
        assert_eq!(apbcs[1].k_d, 3);
        assert!((k.kappa - 0.706).abs() / 0.706 < 0.01);
        assert_eq!(out.subsystems[1].id, "sub2");
        assert_eq!(out.subsystems[1].representative, "sub1");
        let (c, _) = p.compose(&apbcs).unwrap();
        assert_eq!(c.scalings, vec![1.0, 1.0]);
        let b = p.bound(&c.certificate.constants).unwrap();
        assert!((b.safe_probability() - 0.86).abs() < 0.005);
    }
}
