//! Barrier certificates and falsification-based checkers.
//!
//! Three certificate shapes are supported: a per-mode certificate ([`CbcCertificate`]),
//! its augmented counterpart over `(x, p, l)` ([`ApbcCertificate`]), and the
//! max-composed network certificate ([`AbcCertificate`]). Each check scans a
//! grid, refines the worst points by coordinate search, and reports either a
//! counterexample or "no violation found at this resolution".

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{admissible_modes, next_counter};
use crate::grid::{
    map_points, refine_max, refine_steps, set_grid_count, split_budget, top_k, GridConfig, PointCloud,
};
use crate::model::{BoxSet, Cuboid, InputSource, ModelError, Network, Subsystem};
use crate::poly::{CompiledPoly, PolyError, Polynomial, Role};

/// A violation must exceed this to count as a refutation.
pub const MARGIN_TOL: f64 = 1e-9;

/// Cap on randomly sampled joint points in network checks.
const JOINT_SAMPLE_CAP: usize = 200_000;

#[derive(Debug, Error)]
pub enum CertifyError {
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid certificate constants: {0}")]
    Constants(String),
    #[error("invalid certificate: {0}")]
    Invalid(String),
    #[error("unsupported: {0}")]
    Capability(String),
}

/// `s -> coef * s^exp`, or the zero function when `coef == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerLaw {
    pub coef: f64,
    pub exp: f64,
}

impl PowerLaw {
    pub const ZERO: PowerLaw = PowerLaw { coef: 0.0, exp: 1.0 };

    pub fn new(coef: f64, exp: f64) -> Self {
        Self { coef, exp }
    }

    pub fn is_zero(&self) -> bool {
        self.coef == 0.0
    }

    pub fn eval(&self, s: f64) -> f64 {
        if self.is_zero() {
            0.0
        } else {
            self.coef * s.max(0.0).powf(self.exp)
        }
    }

    /// Inverse of a class-K-infinity power law.
    pub fn inverse(&self, s: f64) -> Option<f64> {
        (!self.is_zero()).then(|| (s.max(0.0) / self.coef).powf(1.0 / self.exp))
    }

    fn check(&self, name: &str, allow_zero: bool) -> Result<(), CertifyError> {
        let ok = self.coef.is_finite()
            && self.exp.is_finite()
            && self.exp > 0.0
            && (self.coef > 0.0 || (allow_zero && self.coef == 0.0));
        if ok {
            Ok(())
        } else {
            Err(CertifyError::Constants(format!(
                "{name} must be c*s^e with c > 0{} and e > 0, got {self:?}",
                if allow_zero { " (or c = 0)" } else { "" }
            )))
        }
    }
}

fn zero_power_law() -> PowerLaw {
    PowerLaw::ZERO
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertConstants {
    pub kappa: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub psi: f64,
    pub alpha: PowerLaw,
    #[serde(default = "zero_power_law")]
    pub rho: PowerLaw,
}

impl CertConstants {
    /// Checks the ranges every certificate needs; `strict_levels` additionally
    /// demands `gamma < lambda`.
    pub fn validate(&self, strict_levels: bool) -> Result<(), CertifyError> {
        let bad = |m: String| Err(CertifyError::Constants(m));
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return bad(format!("kappa must lie in (0,1), got {}", self.kappa));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if !(self.psi >= 0.0 && self.psi.is_finite()) {
            return bad(format!("psi must be non-negative, got {}", self.psi));
        }
        if strict_levels && self.gamma >= self.lambda {
            return bad(format!("gamma ({}) must be below lambda ({})", self.gamma, self.lambda));
        }
        self.alpha.check("alpha", false)?;
        self.rho.check("rho", true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    /// Lower bound by the class-K function of the output.
    C1,
    /// Upper bound on the initial set.
    C2,
    /// Lower bound on the unsafe set.
    C3,
    /// Expected decrease.
    C4,
}

impl Condition {
    pub fn describe(&self) -> &'static str {
        match self {
            Condition::C1 => "B >= alpha(|h(x)|) on X",
            Condition::C2 => "B <= gamma on X0",
            Condition::C3 => "B >= lambda on X1",
            Condition::C4 => "E[B'] <= max{kappa B, rho(|w|), psi}",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckStatus {
    Verified,
    Refuted,
    /// The condition's domain is empty.
    Vacuous,
}

/// A next-mode choice and the input at which it fails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub next_mode: Vec<usize>,
    pub w: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
}

/// A point where `lhs <= rhs` fails by `violation = lhs - rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub x: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub w: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mode: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub counter: Vec<u32>,
    pub lhs: f64,
    pub rhs: f64,
    pub violation: f64,
    /// For conditions with a choice of next mode: one failing input per choice.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub witnesses: Vec<Witness>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub condition: Condition,
    pub status: CheckStatus,
    /// Largest grid spacing, `None` when the domain was randomly sampled.
    pub resolution: Option<f64>,
    pub points: u64,
    /// Largest `lhs - rhs` seen; negative means slack.
    pub worst_margin: Option<f64>,
    pub counterexample: Option<Counterexample>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.status != CheckStatus::Refuted
    }
}

/// Overall status attached to a certificate after checking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum CertStatus {
    #[default]
    Unchecked,
    Verified { resolution: Option<f64> },
    Refuted { condition: Condition, counterexample: Counterexample },
}

impl CertStatus {
    pub fn from_reports(reports: &[CheckReport]) -> Self {
        if let Some(r) = reports.iter().find(|r| r.status == CheckStatus::Refuted) {
            return CertStatus::Refuted {
                condition: r.condition,
                counterexample: r.counterexample.clone().expect("refuted reports carry a point"),
            };
        }
        let resolution = reports
            .iter()
            .filter(|r| r.status == CheckStatus::Verified)
            .map(|r| r.resolution)
            .try_fold(0.0f64, |acc, r| r.map(|h| acc.max(h)));
        CertStatus::Verified { resolution }
    }

    pub fn is_verified(&self) -> bool {
        matches!(self, CertStatus::Verified { .. })
    }
}

/// True when every report passed.
pub fn all_passed(reports: &[CheckReport]) -> bool {
    reports.iter().all(CheckReport::passed)
}

/// Certificate for a single mode of a subsystem.
#[derive(Debug, Clone, PartialEq)]
pub struct CbcCertificate {
    pub mode: usize,
    pub barrier: Polynomial,
    pub constants: CertConstants,
    pub status: CertStatus,
}

/// Augmented certificate `B(x,p,l) = kappa_p^(-l/eps) B_p(x)`. Without `epsilon`
/// the counter scaling is dropped, which is the common-barrier form.
#[derive(Debug, Clone, PartialEq)]
pub struct ApbcCertificate {
    pub barriers: Vec<Polynomial>,
    pub mode_kappas: Vec<f64>,
    pub epsilon: Option<f64>,
    pub k_d: u32,
    pub constants: CertConstants,
    pub status: CertStatus,
}

impl ApbcCertificate {
    /// The factor `kappa_p^(-l/eps)`, or 1 without counter scaling.
    pub fn factor(&self, mode: usize, counter: u32) -> f64 {
        match self.epsilon {
            Some(eps) => self.mode_kappas[mode].powf(-(counter as f64) / eps),
            None => 1.0,
        }
    }

    pub fn mode_count(&self) -> usize {
        self.barriers.len()
    }
}

/// Which joint states count as unsafe for a network certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UnsafeSemantics {
    /// All subsystems unsafe at once.
    Product,
    /// Any subsystem unsafe.
    #[default]
    Union,
}

/// Network certificate `B = max_i B_i / s_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AbcCertificate {
    pub components: Vec<ApbcCertificate>,
    pub scalings: Vec<f64>,
    pub constants: CertConstants,
    pub semantics: UnsafeSemantics,
    pub status: CertStatus,
}

/// Serializable certificate forms; barriers are written in human syntax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CbcDesc {
    pub mode: usize,
    pub barrier: String,
    pub constants: CertConstants,
    #[serde(default)]
    pub status: CertStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApbcDesc {
    pub barriers: Vec<String>,
    pub mode_kappas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub k_d: u32,
    pub constants: CertConstants,
    #[serde(default)]
    pub status: CertStatus,
}

impl CbcCertificate {
    pub fn new(sys: &Subsystem, mode: usize, barrier: &str, constants: CertConstants) -> Result<Self, CertifyError> {
        Ok(Self { mode, barrier: parse_barrier(sys, barrier)?, constants, status: CertStatus::Unchecked })
    }

    pub fn from_desc(sys: &Subsystem, d: &CbcDesc) -> Result<Self, CertifyError> {
        let mut c = Self::new(sys, d.mode, &d.barrier, d.constants.clone())?;
        c.status = d.status.clone();
        Ok(c)
    }

    pub fn to_desc(&self) -> CbcDesc {
        CbcDesc {
            mode: self.mode,
            barrier: self.barrier.to_string(),
            constants: self.constants.clone(),
            status: self.status.clone(),
        }
    }
}

impl ApbcCertificate {
    pub fn from_desc(sys: &Subsystem, d: &ApbcDesc) -> Result<Self, CertifyError> {
        let barriers = d.barriers.iter().map(|b| parse_barrier(sys, b)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            barriers,
            mode_kappas: d.mode_kappas.clone(),
            epsilon: d.epsilon,
            k_d: d.k_d,
            constants: d.constants.clone(),
            status: d.status.clone(),
        })
    }

    pub fn to_desc(&self) -> ApbcDesc {
        ApbcDesc {
            barriers: self.barriers.iter().map(|b| b.to_string()).collect(),
            mode_kappas: self.mode_kappas.clone(),
            epsilon: self.epsilon,
            k_d: self.k_d,
            constants: self.constants.clone(),
            status: self.status.clone(),
        }
    }
}

/// Parses a barrier over the subsystem's variables; it may only use states.
pub fn parse_barrier(sys: &Subsystem, src: &str) -> Result<Polynomial, CertifyError> {
    let p = Polynomial::parse(sys.space(), src)?;
    ensure_state_only(&p)?;
    Ok(p)
}

fn ensure_state_only(p: &Polynomial) -> Result<(), CertifyError> {
    if p.depends_on_role(Role::InternalInput) || p.depends_on_role(Role::Noise) {
        return Err(CertifyError::Invalid("barrier may only depend on state variables".into()));
    }
    Ok(())
}

fn same_space(sys: &Subsystem, p: &Polynomial) -> Result<(), CertifyError> {
    if p.space() != sys.space() {
        return Err(CertifyError::Invalid(format!(
            "barrier is not expressed over the variables of subsystem `{}`",
            sys.id
        )));
    }
    ensure_state_only(p)
}

/// `E[barrier(f_mode(x, w, noise))]` as a polynomial in `(x, w)`.
pub fn expected_next(sys: &Subsystem, barrier: &Polynomial, mode: usize) -> Result<Polynomial, CertifyError> {
    let names = sys.state_names();
    let subs: BTreeMap<String, Polynomial> = names
        .into_iter()
        .zip(sys.modes[mode].dynamics.iter().cloned())
        .collect();
    let composed = barrier.compose(&subs)?;
    Ok(composed.expectation_over_noise(&sys.noise)?)
}

fn inf_norm(v: impl Iterator<Item = f64>) -> f64 {
    v.fold(0.0, |m, x| m.max(x.abs()))
}

/// Compiled barriers and expectations of an augmented certificate, shared by
/// the checkers and the simulator.
#[derive(Debug, Clone)]
pub struct ApbcEval {
    pub barriers: Vec<CompiledPoly>,
    /// `next[p][q] = E[B_q(f_p(x, w, noise))]`.
    pub next: Vec<Vec<CompiledPoly>>,
    /// `factors[p][l]`.
    pub factors: Vec<Vec<f64>>,
    pub k_d: u32,
}

impl ApbcEval {
    pub fn new(sys: &Subsystem, cert: &ApbcCertificate) -> Result<Self, CertifyError> {
        let m = sys.mode_count();
        if cert.barriers.len() != m || cert.mode_kappas.len() != m {
            return Err(CertifyError::Invalid(format!(
                "certificate covers {} modes, subsystem `{}` has {m}",
                cert.barriers.len(),
                sys.id
            )));
        }
        if cert.k_d == 0 {
            return Err(CertifyError::Invalid("dwell time must be at least 1".into()));
        }
        for b in &cert.barriers {
            same_space(sys, b)?;
        }
        let mut next = Vec::with_capacity(m);
        for p in 0..m {
            let row = cert
                .barriers
                .iter()
                .map(|b| expected_next(sys, b, p).map(|e| e.compile()))
                .collect::<Result<Vec<_>, _>>()?;
            next.push(row);
        }
        Ok(Self {
            barriers: cert.barriers.iter().map(Polynomial::compile).collect(),
            next,
            factors: (0..m).map(|p| (0..cert.k_d).map(|l| cert.factor(p, l)).collect()).collect(),
            k_d: cert.k_d,
        })
    }

    pub fn mode_count(&self) -> usize {
        self.barriers.len()
    }

    /// `B(x, p, l)`.
    pub fn value(&self, x: &[f64], mode: usize, counter: u32) -> f64 {
        self.factors[mode][counter as usize] * self.barriers[mode].eval(x)
    }

    /// `E[B(x', q, l')]` after one step from `(x, p, l)` with input `w`
    /// (`xw` is `[x, w]`), requesting `q`.
    pub fn expected(&self, xw: &[f64], mode: usize, counter: u32, next_mode: usize) -> f64 {
        let l2 = next_counter(mode, counter, next_mode, self.k_d).expect("admissible request");
        self.factors[next_mode][l2 as usize] * self.next[mode][next_mode].eval(xw)
    }
}

struct ScanOutcome {
    points: u64,
    resolution: Option<f64>,
    worst: f64,
    at: Vec<f64>,
    owner: Cuboid,
}

/// Grid maximum of `f`, followed by coordinate refinement of the worst starts.
fn scan_max<F>(cloud: &PointCloud, grid: &GridConfig, refine: bool, f: F) -> Option<ScanOutcome>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    if cloud.is_empty() {
        return None;
    }
    let values = map_points(cloud, &f);
    let starts = top_k(&values, grid.refine_starts.max(1));
    let mut best_i = starts[0];
    let mut worst = values[best_i];
    let mut at = cloud.point(best_i).to_vec();
    if refine {
        for &i in &starts {
            let b = cloud.bounds_of(i);
            let steps = refine_steps(b, grid.resolution);
            let (x, v) = refine_max(&f, cloud.point(i), b, &steps, grid.refine_sweeps);
            if v > worst {
                worst = v;
                at = x;
                best_i = i;
            }
        }
    }
    Some(ScanOutcome {
        points: cloud.len() as u64,
        resolution: cloud.step,
        worst,
        at,
        owner: cloud.bounds_of(best_i).clone(),
    })
}

fn report_from(
    condition: Condition,
    outcome: Option<ScanOutcome>,
    cex: impl FnOnce(&ScanOutcome) -> Counterexample,
) -> CheckReport {
    match outcome {
        None => CheckReport {
            condition,
            status: CheckStatus::Vacuous,
            resolution: None,
            points: 0,
            worst_margin: None,
            counterexample: None,
        },
        Some(o) => {
            let refuted = o.worst > MARGIN_TOL;
            let counterexample = refuted.then(|| cex(&o));
            CheckReport {
                condition,
                status: if refuted { CheckStatus::Refuted } else { CheckStatus::Verified },
                resolution: o.resolution,
                points: o.points,
                worst_margin: Some(o.worst),
                counterexample,
            }
        }
    }
}

fn simple_cex(at: &[f64], split: usize, lhs: f64, rhs: f64, mode: Vec<usize>, counter: Vec<u32>) -> Counterexample {
    Counterexample {
        x: at[..split].to_vec(),
        w: at[split..].to_vec(),
        mode,
        counter,
        lhs,
        rhs,
        violation: lhs - rhs,
        witnesses: Vec::new(),
    }
}

fn x_and_w_clouds(sys: &Subsystem, grid: &GridConfig) -> (PointCloud, PointCloud) {
    let nx = set_grid_count(&sys.state_set, grid.resolution);
    let nw = set_grid_count(&sys.input_set, grid.resolution);
    let (bx, bw) = split_budget(grid.max_points, nx, nw);
    (
        PointCloud::over(&sys.state_set, grid.resolution, bx, grid.seed),
        PointCloud::over(&sys.input_set, grid.resolution, bw, grid.seed.wrapping_add(1)),
    )
}

fn output_norm(h: &[CompiledPoly], x: &[f64]) -> f64 {
    inf_norm(h.iter().map(|p| p.eval(x)))
}

/// Checks the four per-mode conditions on grids over the subsystem's sets.
pub fn check_cbc(sys: &Subsystem, cert: &CbcCertificate, grid: &GridConfig) -> Result<Vec<CheckReport>, CertifyError> {
    cert.constants.validate(false)?;
    if cert.mode >= sys.mode_count() {
        return Err(CertifyError::Invalid(format!("mode {} out of range", cert.mode)));
    }
    same_space(sys, &cert.barrier)?;
    let c = &cert.constants;
    let n = sys.state_dim();
    let b = cert.barrier.compile();
    let e = expected_next(sys, &cert.barrier, cert.mode)?.compile();
    let h = sys.compiled_output();
    let mode = vec![cert.mode];

    let cap = grid.max_points;
    let xs = PointCloud::over(&sys.state_set, grid.resolution, cap, grid.seed);
    let x0 = PointCloud::over(&sys.init_set, grid.resolution, cap, grid.seed);
    let x1 = PointCloud::over(&sys.unsafe_set, grid.resolution, cap, grid.seed);

    let c1 = |x: &[f64]| (c.alpha.eval(output_norm(h, x)), b.eval(x));
    let c2 = |x: &[f64]| (b.eval(x), c.gamma);
    let c3 = |x: &[f64]| (c.lambda, b.eval(x));
    let c4 = |p: &[f64]| {
        let rhs = (c.kappa * b.eval(p)).max(c.rho.eval(inf_norm(p[n..].iter().copied()))).max(c.psi);
        (e.eval(p), rhs)
    };

    let mut reports = Vec::with_capacity(4);
    let mk = |cond, cloud: &PointCloud, f: &(dyn Fn(&[f64]) -> (f64, f64) + Sync)| {
        let margin = |x: &[f64]| {
            let (l, r) = f(x);
            l - r
        };
        report_from(cond, scan_max(cloud, grid, true, margin), |o| {
            let (l, r) = f(&o.at);
            simple_cex(&o.at, n, l, r, mode.clone(), Vec::new())
        })
    };
    reports.push(mk(Condition::C1, &xs, &c1));
    reports.push(mk(Condition::C2, &x0, &c2));
    reports.push(mk(Condition::C3, &x1, &c3));
    let (xc, wc) = x_and_w_clouds(sys, grid);
    let joint = PointCloud::product(&xc, &wc);
    reports.push(mk(Condition::C4, &joint, &c4));
    Ok(reports)
}

/// Checks the augmented conditions over `X x P x {0..k_d-1}`. The next mode in
/// the decrease condition ranges over what the dwell counter admits.
pub fn check_apbc(sys: &Subsystem, cert: &ApbcCertificate, grid: &GridConfig) -> Result<Vec<CheckReport>, CertifyError> {
    cert.constants.validate(false)?;
    if let Some(eps) = cert.epsilon {
        if !(eps > 1.0) {
            return Err(CertifyError::Constants(format!("epsilon must exceed 1, got {eps}")));
        }
    }
    let ev = ApbcEval::new(sys, cert)?;
    let c = &cert.constants;
    let n = sys.state_dim();
    let m = ev.mode_count();
    let kd = cert.k_d;
    let h = sys.compiled_output();
    let cap = grid.max_points;

    let xs = PointCloud::over(&sys.state_set, grid.resolution, cap, grid.seed);
    let x0 = PointCloud::over(&sys.init_set, grid.resolution, cap, grid.seed);
    let x1 = PointCloud::over(&sys.unsafe_set, grid.resolution, cap, grid.seed);

    // worst (p, l) for a state-only condition; lhs - rhs maximized
    let worst_pl = |x: &[f64], ls: u32, f: &dyn Fn(f64) -> (f64, f64)| -> (f64, f64, usize, u32) {
        let mut best = (f64::NEG_INFINITY, 0.0, 0, 0);
        for p in 0..m {
            let bp = ev.barriers[p].eval(x);
            for l in 0..ls {
                let (lhs, rhs) = f(ev.factors[p][l as usize] * bp);
                if lhs - rhs > best.0 - best.1 || best.0 == f64::NEG_INFINITY {
                    best = (lhs, rhs, p, l);
                }
            }
        }
        best
    };
    let mut reports = Vec::with_capacity(4);
    type Side<'a> = Box<dyn Fn(&[f64], f64) -> (f64, f64) + Sync + 'a>;
    let specs: [(Condition, &PointCloud, u32, Side); 3] = [
        (Condition::C1, &xs, kd, Box::new(|x: &[f64], bv: f64| (c.alpha.eval(output_norm(h, x)), bv))),
        (Condition::C2, &x0, 1, Box::new(|_: &[f64], bv: f64| (bv, c.gamma))),
        (Condition::C3, &x1, kd, Box::new(|_: &[f64], bv: f64| (c.lambda, bv))),
    ];
    for (cond, cloud, ls, side) in specs.iter() {
        let eval = |x: &[f64]| {
            let (l, r, _, _) = worst_pl(x, *ls, &|bv| side(x, bv));
            l - r
        };
        reports.push(report_from(*cond, scan_max(cloud, grid, true, eval), |o| {
            let (l, r, p, lc) = worst_pl(&o.at, *ls, &|bv| side(&o.at, bv));
            simple_cex(&o.at, n, l, r, vec![p], vec![lc])
        }));
    }

    // decrease condition: max over (p,l) of min over admissible q of max over w
    let (xc, wc) = x_and_w_clouds(sys, grid);
    let wpts: Vec<Vec<f64>> = wc.iter().map(<[f64]>::to_vec).collect();
    let rho_w: Vec<f64> = wpts.iter().map(|w| c.rho.eval(inf_norm(w.iter().copied()))).collect();
    let viol_at = |xw: &[f64], p: usize, l: u32, q: usize| -> (f64, f64) {
        let lhs = ev.expected(xw, p, l, q);
        let bx = ev.value(&xw[..n], p, l);
        let rhs = (c.kappa * bx).max(c.rho.eval(inf_norm(xw[n..].iter().copied()))).max(c.psi);
        (lhs, rhs)
    };
    // returns (value, p, l, per-q best w index)
    let grid_eval = |x: &[f64]| -> (f64, usize, u32, Vec<(usize, usize)>) {
        let mut xw = x.to_vec();
        xw.resize(n + sys.input_dim(), 0.0);
        let bvals: Vec<f64> = (0..m).map(|p| ev.barriers[p].eval(x)).collect();
        let mut best = (f64::NEG_INFINITY, 0, 0, Vec::new());
        let mut evals = vec![0.0; wpts.len()];
        // next-mode maxima per (p, l, q)
        let mut table = vec![vec![vec![(f64::NEG_INFINITY, 0usize); m]; kd as usize]; m];
        for p in 0..m {
            for q in 0..m {
                for (j, w) in wpts.iter().enumerate() {
                    xw[n..].copy_from_slice(w);
                    evals[j] = ev.next[p][q].eval(&xw);
                }
                for l in 0..kd {
                    if !admissible_modes(p, l, kd, m).contains(&q) {
                        continue;
                    }
                    let l2 = next_counter(p, l, q, kd).expect("admissible");
                    let fq = ev.factors[q][l2 as usize];
                    let r0 = (c.kappa * ev.factors[p][l as usize] * bvals[p]).max(c.psi);
                    let mut mx = (f64::NEG_INFINITY, 0);
                    for j in 0..wpts.len() {
                        let v = fq * evals[j] - r0.max(rho_w[j]);
                        if v > mx.0 {
                            mx = (v, j);
                        }
                    }
                    table[p][l as usize][q] = mx;
                }
            }
        }
        for p in 0..m {
            for l in 0..kd {
                let adm = admissible_modes(p, l, kd, m);
                let mut mn = (f64::INFINITY, 0usize);
                for q in adm.clone() {
                    if table[p][l as usize][q].0 < mn.0 {
                        mn = (table[p][l as usize][q].0, q);
                    }
                }
                if mn.0 > best.0 {
                    best = (mn.0, p, l, adm.map(|q| (q, table[p][l as usize][q].1)).collect());
                }
            }
        }
        best
    };
    let outcome = scan_max(&xc, grid, false, |x| grid_eval(x).0);
    let report = match outcome {
        None => report_from(Condition::C4, None, |_| unreachable!()),
        Some(mut o) => {
            // refine: witnesses per next mode at fixed x, then x with witnesses fixed
            let (_, p, l, picks) = grid_eval(&o.at);
            let wbox = |j: usize| wc.bounds_of(j).clone();
            let mut witnesses: Vec<(usize, Vec<f64>, Cuboid)> =
                picks.iter().map(|&(q, j)| (q, wpts[j].clone(), wbox(j))).collect();
            let refine_w = |x: &[f64], ws: &mut Vec<(usize, Vec<f64>, Cuboid)>| {
                for (q, w, bx) in ws.iter_mut() {
                    if w.is_empty() {
                        continue;
                    }
                    let f = |wv: &[f64]| {
                        let mut xw = x.to_vec();
                        xw.extend_from_slice(wv);
                        let (a, b) = viol_at(&xw, p, l, *q);
                        a - b
                    };
                    let (wn, _) = refine_max(f, w, bx, &refine_steps(bx, grid.resolution), grid.refine_sweeps);
                    *w = wn;
                }
            };
            let min_over = |x: &[f64], ws: &[(usize, Vec<f64>, Cuboid)]| {
                ws.iter()
                    .map(|(q, w, _)| {
                        let mut xw = x.to_vec();
                        xw.extend_from_slice(w);
                        let (a, b) = viol_at(&xw, p, l, *q);
                        a - b
                    })
                    .fold(f64::INFINITY, f64::min)
            };
            refine_w(&o.at, &mut witnesses);
            let (xn, _) = refine_max(
                |x: &[f64]| min_over(x, &witnesses),
                &o.at,
                &o.owner,
                &refine_steps(&o.owner, grid.resolution),
                grid.refine_sweeps,
            );
            refine_w(&xn, &mut witnesses);
            let refined = min_over(&xn, &witnesses);
            if refined > o.worst {
                o.worst = refined;
                o.at = xn;
            } else {
                // keep grid point but with its refined witnesses
                refine_w(&o.at.clone(), &mut witnesses);
            }
            let x_final = o.at.clone();
            let ws = witnesses.clone();
            report_from(Condition::C4, Some(o), move |_| {
                let wit: Vec<Witness> = ws
                    .iter()
                    .map(|(q, w, _)| {
                        let mut xw = x_final.clone();
                        xw.extend_from_slice(w);
                        let (lhs, rhs) = viol_at(&xw, p, l, *q);
                        Witness { next_mode: vec![*q], w: w.clone(), lhs, rhs }
                    })
                    .collect();
                let weakest = wit
                    .iter()
                    .min_by(|a, b| (a.lhs - a.rhs).total_cmp(&(b.lhs - b.rhs)))
                    .expect("at least one admissible mode");
                Counterexample {
                    x: x_final.clone(),
                    w: weakest.w.clone(),
                    mode: vec![p],
                    counter: vec![l],
                    lhs: weakest.lhs,
                    rhs: weakest.rhs,
                    violation: weakest.lhs - weakest.rhs,
                    witnesses: wit.clone(),
                }
            })
        }
    };
    reports.push(report);
    Ok(reports)
}

/// Evaluation of the network certificate with per-subsystem compiled parts.
pub struct AbcEval<'a> {
    net: &'a Network,
    wiring: Vec<Vec<InputSource>>,
    comps: Vec<ApbcEval>,
    scalings: Vec<f64>,
    offsets: Vec<usize>,
}

impl<'a> AbcEval<'a> {
    pub fn new(net: &'a Network, cert: &AbcCertificate) -> Result<Self, CertifyError> {
        if cert.components.len() != net.len() || cert.scalings.len() != net.len() {
            return Err(CertifyError::Invalid(format!(
                "certificate has {} components and {} scalings for {} subsystems",
                cert.components.len(),
                cert.scalings.len(),
                net.len()
            )));
        }
        if cert.scalings.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(CertifyError::Constants("scalings must be positive".into()));
        }
        let wiring = net.wiring()?;
        let comps = net
            .subsystems
            .iter()
            .zip(&cert.components)
            .map(|(s, c)| ApbcEval::new(s, c))
            .collect::<Result<Vec<_>, _>>()?;
        let mut offsets = vec![0];
        for s in &net.subsystems {
            offsets.push(offsets.last().unwrap() + s.state_dim());
        }
        Ok(Self { net, wiring, comps, scalings: cert.scalings.clone(), offsets })
    }

    pub fn component(&self, i: usize) -> &ApbcEval {
        &self.comps[i]
    }

    pub fn joint_dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn slice<'x>(&self, x: &'x [f64], i: usize) -> &'x [f64] {
        &x[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn local_input_dim(&self, i: usize) -> usize {
        self.wiring[i].len()
    }

    /// `[x_i, w_i]` with `w_i` wired from the joint state.
    pub fn local_xw(&self, x: &[f64], i: usize) -> Vec<f64> {
        let mut xw = self.slice(x, i).to_vec();
        let target = &self.net.subsystems[i].id;
        for src in &self.wiring[i] {
            let s = &self.net.subsystems[src.from];
            let hp = s.compiled_output_to(target).expect("validated wiring");
            xw.push(hp[src.component].eval(self.slice(x, src.from)));
        }
        xw
    }

    /// `B(x, p, l) = max_i B_i / s_i`.
    pub fn value(&self, x: &[f64], modes: &[usize], counters: &[u32]) -> f64 {
        (0..self.comps.len())
            .map(|i| self.comps[i].value(self.slice(x, i), modes[i], counters[i]) / self.scalings[i])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Smallest scaled component value over all `(p, l)`, and its argmin.
    fn min_component(&self, x: &[f64], i: usize) -> (f64, usize, u32) {
        let ev = &self.comps[i];
        let xi = self.slice(x, i);
        let mut best = (f64::INFINITY, 0, 0);
        for p in 0..ev.mode_count() {
            let bp = ev.barriers[p].eval(xi);
            for l in 0..ev.k_d {
                let v = ev.factors[p][l as usize] * bp / self.scalings[i];
                if v < best.0 {
                    best = (v, p, l);
                }
            }
        }
        best
    }

    fn max_component_init(&self, x: &[f64], i: usize) -> (f64, usize) {
        let ev = &self.comps[i];
        let xi = self.slice(x, i);
        (0..ev.mode_count())
            .map(|p| (ev.factors[p][0] * ev.barriers[p].eval(xi) / self.scalings[i], p))
            .fold((f64::NEG_INFINITY, 0), |a, b| if b.0 > a.0 { b } else { a })
    }
}

fn joint_cloud(sets: &[&BoxSet], grid: &GridConfig, seed: u64) -> PointCloud {
    let counts: Vec<usize> = sets.iter().map(|s| set_grid_count(s, grid.resolution)).collect();
    let total = counts.iter().fold(1usize, |a, &c| a.saturating_mul(c));
    if sets.iter().any(|s| s.is_empty()) {
        return PointCloud::empty(0);
    }
    if total <= grid.max_points {
        let mut cloud = PointCloud::over(&BoxSet::unit(), grid.resolution, 1, seed);
        for s in sets {
            let part = PointCloud::over(s, grid.resolution, usize::MAX, seed);
            cloud = PointCloud::product(&cloud, &part);
        }
        return cloud;
    }
    let n = grid.max_points.min(JOINT_SAMPLE_CAP);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim: usize = sets.iter().map(|s| s.dim().unwrap_or(0)).sum();
    let mut cloud = PointCloud::empty(dim);
    cloud.step = None;
    for k in 0..n {
        let mut bounds = Vec::with_capacity(dim);
        for s in sets {
            let bi = if s.boxes.len() == 1 { 0 } else { rng.random_range(0..s.boxes.len()) };
            let b = &s.boxes[bi];
            cloud.coords.extend(b.sample(&mut rng));
            bounds.extend_from_slice(&b.bounds);
        }
        cloud.boxes.push(Cuboid::new(bounds));
        cloud.owner.push(k as u32);
    }
    cloud
}

/// Checks the network conditions on joint samples. The discrete part `(p, l)`
/// is handled exactly; the expected value of the max-composed barrier is
/// bounded through the per-subsystem expectations `max_i E[B_i'] / s_i`.
pub fn check_abc(net: &Network, cert: &AbcCertificate, grid: &GridConfig) -> Result<Vec<CheckReport>, CertifyError> {
    cert.constants.validate(true)?;
    let ev = AbcEval::new(net, cert)?;
    let c = &cert.constants;
    let nsub = net.len();
    let dim = ev.joint_dim();
    let mut reports = Vec::with_capacity(3);

    // C2: max over tuples of max_i is separable
    let init_sets: Vec<&BoxSet> = net.subsystems.iter().map(|s| &s.init_set).collect();
    let x0 = joint_cloud(&init_sets, grid, grid.seed);
    let c2 = |x: &[f64]| -> (f64, Vec<usize>) {
        let mut best = f64::NEG_INFINITY;
        let mut modes = vec![0; nsub];
        for (i, m) in modes.iter_mut().enumerate() {
            let (v, p) = ev.max_component_init(x, i);
            *m = p;
            best = best.max(v);
        }
        (best, modes)
    };
    reports.push(report_from(
        Condition::C2,
        scan_max(&x0, grid, true, |x| c2(x).0 - c.gamma),
        |o| {
            let (v, modes) = c2(&o.at);
            simple_cex(&o.at, dim, v, c.gamma, modes, vec![0; nsub])
        },
    ));

    // C3: B minimized over tuples is max_i of per-subsystem minima
    let c3 = |x: &[f64]| -> (f64, Vec<usize>, Vec<u32>) {
        let mut best = f64::NEG_INFINITY;
        let (mut modes, mut counters) = (vec![0; nsub], vec![0; nsub]);
        for i in 0..nsub {
            let (v, p, l) = ev.min_component(x, i);
            modes[i] = p;
            counters[i] = l;
            best = best.max(v);
        }
        (best, modes, counters)
    };
    let unsafe_clouds: Vec<PointCloud> = match cert.semantics {
        UnsafeSemantics::Product => {
            let sets: Vec<&BoxSet> = net.subsystems.iter().map(|s| &s.unsafe_set).collect();
            vec![joint_cloud(&sets, grid, grid.seed.wrapping_add(2))]
        }
        UnsafeSemantics::Union => (0..nsub)
            .map(|k| {
                let sets: Vec<&BoxSet> = net
                    .subsystems
                    .iter()
                    .enumerate()
                    .map(|(j, s)| if j == k { &s.unsafe_set } else { &s.state_set })
                    .collect();
                let sub = GridConfig { max_points: (grid.max_points / nsub).max(1), ..grid.clone() };
                joint_cloud(&sets, &sub, grid.seed.wrapping_add(3 + k as u64))
            })
            .collect(),
    };
    let mut c3_report: Option<CheckReport> = None;
    for cloud in &unsafe_clouds {
        let r = report_from(Condition::C3, scan_max(cloud, grid, true, |x| c.lambda - c3(x).0), |o| {
            let (v, modes, counters) = c3(&o.at);
            simple_cex(&o.at, dim, c.lambda, v, modes, counters)
        });
        c3_report = Some(match c3_report {
            None => r,
            Some(prev) => merge_reports(prev, r),
        });
    }
    reports.push(c3_report.expect("at least one subsystem"));

    // C4: exact over the discrete tuple, see AbcEval docs
    let c4 = |x: &[f64]| -> (f64, f64, Vec<usize>, Vec<u32>, Vec<usize>) {
        let mins: Vec<(f64, usize, u32)> = (0..nsub).map(|i| ev.min_component(x, i)).collect();
        // largest and second-largest minima give max_{j != i} quickly
        let (mut top1, mut top2, mut arg1) = (f64::NEG_INFINITY, f64::NEG_INFINITY, usize::MAX);
        for (i, m) in mins.iter().enumerate() {
            if m.0 > top1 {
                top2 = top1;
                top1 = m.0;
                arg1 = i;
            } else if m.0 > top2 {
                top2 = m.0;
            }
        }
        let mut best = (f64::NEG_INFINITY, 0.0, 0usize, 0usize, 0u32, 0usize);
        for i in 0..nsub {
            let comp = &ev.comps[i];
            let s = ev.scalings[i];
            let xw = ev.local_xw(x, i);
            let others = if i == arg1 { top2 } else { top1 };
            for p in 0..comp.mode_count() {
                let bp = comp.barriers[p].eval(&xw[..net.subsystems[i].state_dim()]);
                for l in 0..comp.k_d {
                    let mut lhs = (f64::INFINITY, 0usize);
                    for q in admissible_modes(p, l, comp.k_d, comp.mode_count()) {
                        let v = comp.expected(&xw, p, l, q) / s;
                        if v < lhs.0 {
                            lhs = (v, q);
                        }
                    }
                    let own = comp.factors[p][l as usize] * bp / s;
                    let rhs = (c.kappa * own.max(others)).max(c.psi);
                    if lhs.0 - rhs > best.0 - best.1 || best.0 == f64::NEG_INFINITY {
                        best = (lhs.0, rhs, i, p, l, lhs.1);
                    }
                }
            }
        }
        let (lhs, rhs, i, p, l, q) = best;
        let mut modes: Vec<usize> = mins.iter().map(|m| m.1).collect();
        let mut counters: Vec<u32> = mins.iter().map(|m| m.2).collect();
        modes[i] = p;
        counters[i] = l;
        let mut next = modes.clone();
        next[i] = q;
        (lhs, rhs, modes, counters, next)
    };
    let state_sets: Vec<&BoxSet> = net.subsystems.iter().map(|s| &s.state_set).collect();
    let xs = joint_cloud(&state_sets, grid, grid.seed.wrapping_add(1));
    reports.push(report_from(
        Condition::C4,
        scan_max(&xs, grid, true, |x| {
            let (l, r, ..) = c4(x);
            l - r
        }),
        |o| {
            let (lhs, rhs, modes, counters, next) = c4(&o.at);
            let mut cex = simple_cex(&o.at, dim, lhs, rhs, modes, counters);
            cex.witnesses = vec![Witness { next_mode: next, w: Vec::new(), lhs, rhs }];
            cex
        },
    ));
    Ok(reports)
}

fn merge_reports(a: CheckReport, b: CheckReport) -> CheckReport {
    let (worse, other) = match (a.worst_margin, b.worst_margin) {
        (Some(x), Some(y)) if y > x => (b, a),
        (None, Some(_)) => (b, a),
        _ => (a, b),
    };
    let status = if worse.status == CheckStatus::Refuted || other.status == CheckStatus::Refuted {
        CheckStatus::Refuted
    } else if worse.status == CheckStatus::Vacuous && other.status == CheckStatus::Vacuous {
        CheckStatus::Vacuous
    } else {
        CheckStatus::Verified
    };
    let resolution = match (worse.resolution, other.resolution) {
        (Some(x), Some(y)) => Some(x.max(y)),
        (x, None) if other.status == CheckStatus::Vacuous => x,
        (None, y) if worse.status == CheckStatus::Vacuous => y,
        _ => None,
    };
    CheckReport {
        condition: worse.condition,
        status,
        resolution,
        points: worse.points + other.points,
        worst_margin: worse.worst_margin.or(other.worst_margin),
        counterexample: worse.counterexample,
    }
}

/// Re-evaluates a per-mode counterexample from scratch. Returns the violation.
pub fn recheck_cbc(sys: &Subsystem, cert: &CbcCertificate, cond: Condition, cex: &Counterexample) -> Result<f64, CertifyError> {
    let c = &cert.constants;
    let mut pt = cex.x.clone();
    pt.extend_from_slice(&cex.w);
    pt.resize(sys.space().len(), 0.0);
    let b = cert.barrier.eval(&pt)?;
    let v = match cond {
        Condition::C1 => {
            let out = sys.eval_output(&cex.x);
            c.alpha.eval(inf_norm(out.into_iter())) - b
        }
        Condition::C2 => b - c.gamma,
        Condition::C3 => c.lambda - b,
        Condition::C4 => {
            let e = expected_next(sys, &cert.barrier, cert.mode)?;
            let mut xw = cex.x.clone();
            xw.extend_from_slice(&cex.w);
            let lhs = e.eval(&xw)?;
            lhs - (c.kappa * b).max(c.rho.eval(inf_norm(cex.w.iter().copied()))).max(c.psi)
        }
    };
    Ok(v)
}

/// Shared handle used by callers that keep certificates alongside subsystems.
pub type SharedSubsystem = Arc<Subsystem>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Resolution;
    use crate::model::{ModeDesc, NoiseTable, SubsystemDesc};
    use crate::poly::NoiseSpec;
    use rand::Rng;

    pub(crate) fn contraction() -> Subsystem {
        let d = SubsystemDesc {
            id: "c".into(),
            states: vec!["x".into()],
            inputs: vec![],
            noise: vec!["n".into()],
            modes: vec![ModeDesc { label: None, dynamics: vec!["0.5*x + 0.1*n".into()] }],
            output: None,
            outputs: Default::default(),
            state_set: BoxSet::single(vec![[-1.0, 1.0]]),
            init_set: BoxSet::single(vec![[-0.1, 0.1]]),
            unsafe_set: BoxSet::union(vec![vec![[-1.0, -0.8]], vec![[0.8, 1.0]]]),
            input_set: None,
        };
        Subsystem::from_desc(&d, &NoiseTable::default()).unwrap()
    }

    fn square_cert(sys: &Subsystem, lambda: f64) -> CbcCertificate {
        // x^2: E[(0.5x+0.1n)^2] = 0.25x^2 + 0.01 <= max{0.5 x^2, 0.01}... needs psi >= 0.02
        CbcCertificate::new(
            sys,
            0,
            "x^2",
            CertConstants {
                kappa: 0.5,
                gamma: 0.01,
                lambda,
                psi: 0.02,
                alpha: PowerLaw::new(0.5, 2.0),
                rho: PowerLaw::ZERO,
            },
        )
        .unwrap()
    }

    #[test]
    fn square_barrier_verifies() {
        let sys = contraction();
        let reports = check_cbc(&sys, &square_cert(&sys, 0.64), &GridConfig::with_step(0.01)).unwrap();
        for r in &reports {
            assert_eq!(r.status, CheckStatus::Verified, "{r:?}");
            assert_eq!(r.resolution, Some(0.01));
        }
    }

    #[test]
    fn inflated_lambda_is_refuted_in_unsafe_set() {
        let sys = contraction();
        let cert = square_cert(&sys, 5.0);
        let reports = check_cbc(&sys, &cert, &GridConfig::with_step(0.01)).unwrap();
        let c3 = &reports[2];
        assert_eq!(c3.status, CheckStatus::Refuted);
        let cex = c3.counterexample.as_ref().unwrap();
        assert!(sys.unsafe_set.contains(&cex.x));
        let again = recheck_cbc(&sys, &cert, Condition::C3, cex).unwrap();
        assert!(again > MARGIN_TOL);
        assert_eq!(again, cex.violation);
    }

    #[test]
    fn constant_barrier_boundary_case() {
        let mut sys = contraction();
        sys.init_set = BoxSet::default();
        let cert = CbcCertificate::new(
            &sys,
            0,
            "1.5",
            CertConstants {
                kappa: 0.3,
                gamma: 1.5,
                lambda: 1.5,
                psi: 1.5,
                alpha: PowerLaw::new(1.0, 2.0),
                rho: PowerLaw::ZERO,
            },
        )
        .unwrap();
        let r = check_cbc(&sys, &cert, &GridConfig::with_step(0.05)).unwrap();
        assert_eq!(r[1].status, CheckStatus::Vacuous);
        assert_eq!(r[2].status, CheckStatus::Verified);
        assert_eq!(r[3].status, CheckStatus::Verified);
    }

    #[test]
    fn decrease_violation_found_by_refinement() {
        let sys = contraction();
        let mut cert = square_cert(&sys, 0.64);
        // psi below the noise floor 0.01 fails near the origin
        cert.constants.psi = 0.005;
        let r = check_cbc(&sys, &cert, &GridConfig::with_step(0.1)).unwrap();
        assert_eq!(r[3].status, CheckStatus::Refuted);
        let cex = r[3].counterexample.as_ref().unwrap();
        assert!(recheck_cbc(&sys, &cert, Condition::C4, cex).unwrap() > MARGIN_TOL);
    }

    #[test]
    fn invalid_constants_rejected() {
        let sys = contraction();
        let mut cert = square_cert(&sys, 0.64);
        cert.constants.kappa = 1.0;
        assert!(matches!(check_cbc(&sys, &cert, &GridConfig::default()), Err(CertifyError::Constants(_))));
    }

    #[test]
    fn closed_form_expectation_matches_monte_carlo() {
        let sys = contraction();
        let b = parse_barrier(&sys, "x^4 - 0.3*x^3 + x^2 + 0.1").unwrap();
        let e = expected_next(&sys, &b, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let noise = NoiseSpec::default();
        for _ in 0..20 {
            let x = rng.random_range(-1.0..1.0);
            let closed = e.eval(&[x]).unwrap();
            let n = 100_000;
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let nx = sys.step(0, &[x], &[], &[noise.sample(&mut rng)]);
                let v = b.eval(&[nx[0], 0.0]).unwrap();
                s += v;
                s2 += v * v;
            }
            let mean = s / n as f64;
            let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
            assert!((mean - closed).abs() <= 3.0 * se + 1e-12, "x={x} mc={mean} closed={closed} se={se}");
        }
    }

    #[test]
    fn coarser_grid_still_verifies() {
        let sys = contraction();
        let cert = square_cert(&sys, 0.64);
        for h in [0.01, 0.02, 0.04] {
            let r = check_cbc(&sys, &cert, &GridConfig::with_step(h)).unwrap();
            assert!(all_passed(&r));
        }
    }

    fn two_mode_sys() -> Subsystem {
        let d = SubsystemDesc {
            id: "t".into(),
            states: vec!["x".into()],
            inputs: vec![],
            noise: vec!["n".into()],
            modes: vec![
                ModeDesc { label: None, dynamics: vec!["0.5*x + 0.1*n".into()] },
                ModeDesc { label: None, dynamics: vec!["1.5*x + 0.1*n".into()] },
            ],
            output: None,
            outputs: Default::default(),
            state_set: BoxSet::single(vec![[-1.0, 1.0]]),
            init_set: BoxSet::single(vec![[-0.1, 0.1]]),
            unsafe_set: BoxSet::union(vec![vec![[-1.0, -0.8]], vec![[0.8, 1.0]]]),
            input_set: None,
        };
        Subsystem::from_desc(&d, &NoiseTable::default()).unwrap()
    }

    fn constants() -> CertConstants {
        CertConstants {
            kappa: 0.5,
            gamma: 0.01,
            lambda: 0.64,
            psi: 0.02,
            alpha: PowerLaw::new(0.5, 2.0),
            rho: PowerLaw::ZERO,
        }
    }

    #[test]
    fn existential_respects_dwell_counter() {
        // mode 1 expands; from (p=1, l=0) only p'=1 is admissible with k_d=2,
        // so the decrease condition fails even though p'=0 would be fine
        let sys = two_mode_sys();
        let cert = ApbcCertificate {
            barriers: vec![parse_barrier(&sys, "x^2").unwrap(); 2],
            mode_kappas: vec![0.5, 0.5],
            epsilon: None,
            k_d: 2,
            constants: constants(),
            status: CertStatus::Unchecked,
        };
        let r = check_apbc(&sys, &cert, &GridConfig::with_step(0.05)).unwrap();
        assert_eq!(r[3].status, CheckStatus::Refuted);
        let cex = r[3].counterexample.as_ref().unwrap();
        assert_eq!(cex.mode, vec![1]);
        assert_eq!(cex.counter, vec![0]);
        assert_eq!(cex.witnesses.len(), 1);
        assert!(cex.violation > MARGIN_TOL);
    }

    #[test]
    fn common_barrier_apbc_matches_cbc() {
        let sys = contraction();
        let cert = ApbcCertificate {
            barriers: vec![parse_barrier(&sys, "x^2").unwrap()],
            mode_kappas: vec![0.5],
            epsilon: None,
            k_d: 1,
            constants: constants(),
            status: CertStatus::Unchecked,
        };
        let grid = GridConfig::with_step(0.01);
        let a = check_apbc(&sys, &cert, &grid).unwrap();
        let b = check_cbc(&sys, &square_cert(&sys, 0.64), &grid).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.status, y.status);
            assert!((x.worst_margin.unwrap() - y.worst_margin.unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn factor_grows_with_counter() {
        let sys = contraction();
        let cert = ApbcCertificate {
            barriers: vec![parse_barrier(&sys, "x^2").unwrap()],
            mode_kappas: vec![0.6],
            epsilon: Some(2.0),
            k_d: 5,
            constants: constants(),
            status: CertStatus::Unchecked,
        };
        let f: Vec<f64> = (0..5).map(|l| cert.factor(0, l)).collect();
        assert_eq!(f[0], 1.0);
        assert!(f.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn abc_levels_rejected_before_grid_work() {
        let sys = contraction();
        let net = Network { subsystems: vec![sys.clone()], edges: vec![] };
        let mut k = constants();
        k.gamma = 1.0;
        let comp = ApbcCertificate {
            barriers: vec![parse_barrier(&sys, "x^2").unwrap()],
            mode_kappas: vec![0.5],
            epsilon: None,
            k_d: 1,
            constants: constants(),
            status: CertStatus::Unchecked,
        };
        let cert = AbcCertificate {
            components: vec![comp],
            scalings: vec![1.0],
            constants: k,
            semantics: UnsafeSemantics::Union,
            status: CertStatus::Unchecked,
        };
        assert!(matches!(check_abc(&net, &cert, &GridConfig::default()), Err(CertifyError::Constants(_))));
    }

    #[test]
    fn single_subsystem_abc_coincides_with_apbc() {
        let sys = contraction();
        let net = Network { subsystems: vec![sys.clone()], edges: vec![] };
        let comp = ApbcCertificate {
            barriers: vec![parse_barrier(&sys, "x^2").unwrap()],
            mode_kappas: vec![0.5],
            epsilon: None,
            k_d: 1,
            constants: constants(),
            status: CertStatus::Unchecked,
        };
        let grid = GridConfig { resolution: Resolution::Step(0.01), ..GridConfig::default() };
        let a = check_apbc(&sys, &comp, &grid).unwrap();
        for psi in [0.02, 0.005] {
            let mut comp = comp.clone();
            comp.constants.psi = psi;
            let mut k = comp.constants.clone();
            k.psi = psi;
            let cert = AbcCertificate {
                components: vec![comp.clone()],
                scalings: vec![1.0],
                constants: k,
                semantics: UnsafeSemantics::Union,
                status: CertStatus::Unchecked,
            };
            let n = check_abc(&net, &cert, &grid).unwrap();
            let a = if psi == 0.02 { a.clone() } else { check_apbc(&sys, &comp, &grid).unwrap() };
            for r in &n {
                let twin = a.iter().find(|x| x.condition == r.condition).unwrap();
                assert_eq!(r.status, twin.status, "{:?}", r.condition);
            }
        }
    }
}
