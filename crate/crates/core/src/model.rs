//! Switched subsystems, their interconnection, and the flattened monolithic view.
//!
//! A [`Subsystem`] owns its polynomial dynamics over `(states, inputs, noise)`,
//! in that variable order, so a single evaluation buffer `[x, w, noise]` serves
//! every compiled polynomial of the subsystem. A [`Network`] wires outputs of
//! one subsystem into internal inputs of another.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{CompiledPoly, NoiseSpec, PolyError, Polynomial, Role, Variable, VariableSpace};

/// Absolute tolerance used for set containment tests.
pub const SET_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("subsystem `{id}`: {source}")]
    Poly {
        id: String,
        #[source]
        source: PolyError,
    },
    #[error("subsystem `{id}`: {msg}")]
    Invalid { id: String, msg: String },
    #[error("network is not valid: {0}")]
    Violations(String),
    #[error("unknown subsystem `{0}`")]
    UnknownSubsystem(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// An axis-aligned box, one closed interval per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Cuboid {
    pub bounds: Vec<[f64; 2]>,
}

impl Cuboid {
    pub fn new(bounds: Vec<[f64; 2]>) -> Self {
        Self { bounds }
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn lo(&self, d: usize) -> f64 {
        self.bounds[d][0]
    }

    pub fn hi(&self, d: usize) -> f64 {
        self.bounds[d][1]
    }

    pub fn is_valid(&self) -> bool {
        self.bounds.iter().all(|[lo, hi]| lo.is_finite() && hi.is_finite() && lo <= hi)
    }

    pub fn volume(&self) -> f64 {
        self.bounds.iter().map(|[lo, hi]| hi - lo).product()
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.dim()
            && self
                .bounds
                .iter()
                .zip(point)
                .all(|([lo, hi], &x)| x >= lo - SET_TOL && x <= hi + SET_TOL)
    }

    pub fn contains_box(&self, other: &Cuboid) -> bool {
        other.dim() == self.dim()
            && self
                .bounds
                .iter()
                .zip(&other.bounds)
                .all(|(a, b)| b[0] >= a[0] - SET_TOL && b[1] <= a[1] + SET_TOL)
    }

    /// Clamps a point into the box, coordinate by coordinate.
    pub fn clamp(&self, point: &mut [f64]) {
        for (x, [lo, hi]) in point.iter_mut().zip(&self.bounds) {
            *x = x.clamp(*lo, *hi);
        }
    }

    pub fn product(&self, other: &Cuboid) -> Cuboid {
        let mut bounds = self.bounds.clone();
        bounds.extend_from_slice(&other.bounds);
        Cuboid { bounds }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.bounds
            .iter()
            .map(|&[lo, hi]| if hi > lo { rng.random_range(lo..=hi) } else { lo })
            .collect()
    }
}

/// Finite union of boxes of a common dimension.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoxSet {
    pub boxes: Vec<Cuboid>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BoxSetRepr {
    Many(Vec<Vec<[f64; 2]>>),
    Single(Vec<[f64; 2]>),
}

impl<'de> Deserialize<'de> for BoxSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let boxes = match BoxSetRepr::deserialize(d)? {
            BoxSetRepr::Many(v) => v.into_iter().map(Cuboid::new).collect(),
            BoxSetRepr::Single(b) => vec![Cuboid::new(b)],
        };
        let set = BoxSet { boxes };
        if let Some(msg) = set.shape_error() {
            return Err(serde::de::Error::custom(msg));
        }
        Ok(set)
    }
}

impl Serialize for BoxSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<&Vec<[f64; 2]>> = self.boxes.iter().map(|b| &b.bounds).collect();
        v.serialize(s)
    }
}

impl BoxSet {
    pub fn single(bounds: Vec<[f64; 2]>) -> Self {
        Self { boxes: vec![Cuboid::new(bounds)] }
    }

    pub fn union(boxes: Vec<Vec<[f64; 2]>>) -> Self {
        Self { boxes: boxes.into_iter().map(Cuboid::new).collect() }
    }

    /// The set containing the single point of the zero-dimensional space.
    pub fn unit() -> Self {
        Self { boxes: vec![Cuboid::new(Vec::new())] }
    }

    fn shape_error(&self) -> Option<String> {
        if let Some(b) = self.boxes.iter().find(|b| !b.is_valid()) {
            return Some(format!("box {:?} needs finite bounds with lo <= hi", b.bounds));
        }
        let d = self.boxes.first().map(Cuboid::dim)?;
        if self.boxes.iter().any(|b| b.dim() != d) {
            return Some("boxes in a union must share one dimension".into());
        }
        None
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.boxes.first().map(Cuboid::dim)
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        self.boxes.iter().any(|b| b.contains(point))
    }

    /// True when every box of `other` sits inside a single box of `self`.
    pub fn contains_set(&self, other: &BoxSet) -> bool {
        other.boxes.iter().all(|b| self.boxes.iter().any(|a| a.contains_box(b)))
    }

    pub fn volume(&self) -> f64 {
        self.boxes.iter().map(Cuboid::volume).sum()
    }

    /// Smallest box containing the union.
    pub fn hull(&self) -> Option<Cuboid> {
        let first = self.boxes.first()?;
        let mut bounds = first.bounds.clone();
        for b in &self.boxes[1..] {
            for (acc, iv) in bounds.iter_mut().zip(&b.bounds) {
                acc[0] = acc[0].min(iv[0]);
                acc[1] = acc[1].max(iv[1]);
            }
        }
        Some(Cuboid::new(bounds))
    }

    /// Projection onto the given coordinates.
    pub fn project(&self, dims: &[usize]) -> BoxSet {
        BoxSet {
            boxes: self
                .boxes
                .iter()
                .map(|b| Cuboid::new(dims.iter().map(|&d| b.bounds[d]).collect()))
                .collect(),
        }
    }

    /// Cartesian product of two unions.
    pub fn product(&self, other: &BoxSet) -> BoxSet {
        let mut boxes = Vec::with_capacity(self.boxes.len() * other.boxes.len());
        for a in &self.boxes {
            for b in &other.boxes {
                boxes.push(a.product(b));
            }
        }
        BoxSet { boxes }
    }

    /// Uniform sample: a box is picked with probability proportional to its
    /// volume (uniformly when all volumes vanish), then a point inside it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Vec<f64>> {
        if self.boxes.is_empty() {
            return None;
        }
        let vols: Vec<f64> = self.boxes.iter().map(Cuboid::volume).collect();
        let total: f64 = vols.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = vols.len() - 1;
            for (i, v) in vols.iter().enumerate() {
                if u < *v {
                    pick = i;
                    break;
                }
                u -= v;
            }
            pick
        } else {
            rng.random_range(0..self.boxes.len())
        };
        Some(self.boxes[idx].sample(rng))
    }
}

/// Interval enclosure of a polynomial over a box, by termwise interval arithmetic.
pub fn interval_range(p: &Polynomial, vars: &[[f64; 2]]) -> [f64; 2] {
    let mut acc = [0.0, 0.0];
    for (exp, c) in p.terms() {
        let mut term = [c, c];
        for (&e, iv) in exp.iter().zip(vars) {
            if e > 0 {
                term = interval_mul(term, interval_pow(*iv, e));
            }
        }
        acc = [acc[0] + term[0], acc[1] + term[1]];
    }
    acc
}

fn interval_mul(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let c = [a[0] * b[0], a[0] * b[1], a[1] * b[0], a[1] * b[1]];
    [
        c.iter().copied().fold(f64::INFINITY, f64::min),
        c.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    ]
}

fn interval_pow(iv: [f64; 2], e: u32) -> [f64; 2] {
    let [lo, hi] = iv;
    let (a, b) = (lo.powi(e as i32), hi.powi(e as i32));
    if e % 2 == 1 {
        [a, b]
    } else if lo <= 0.0 && hi >= 0.0 {
        [0.0, a.max(b)]
    } else {
        [a.min(b), a.max(b)]
    }
}

/// One operating mode: the vector field applied while the mode is active.
#[derive(Debug, Clone, PartialEq)]
pub struct Mode {
    pub label: String,
    pub dynamics: Vec<Polynomial>,
}

/// A switched subsystem with polynomial dynamics.
#[derive(Debug, Clone)]
pub struct Subsystem {
    pub id: String,
    space: Arc<VariableSpace>,
    pub modes: Vec<Mode>,
    /// External output used in the class-K lower bound condition.
    pub output: Vec<Polynomial>,
    /// Outputs sent to other subsystems, keyed by receiver id.
    pub outputs: BTreeMap<String, Vec<Polynomial>>,
    pub state_set: BoxSet,
    pub init_set: BoxSet,
    pub unsafe_set: BoxSet,
    pub input_set: BoxSet,
    pub noise: Vec<NoiseSpec>,
    /// Noise variables for which no distribution was supplied.
    pub defaulted_noise: Vec<String>,
    compiled: Arc<CompiledSubsystem>,
}

impl PartialEq for Subsystem {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.space == other.space
            && self.modes == other.modes
            && self.output == other.output
            && self.outputs == other.outputs
            && self.state_set == other.state_set
            && self.init_set == other.init_set
            && self.unsafe_set == other.unsafe_set
            && self.input_set == other.input_set
            && self.noise == other.noise
    }
}

#[derive(Debug)]
struct CompiledSubsystem {
    dynamics: Vec<Vec<CompiledPoly>>,
    output: Vec<CompiledPoly>,
    outputs: BTreeMap<String, Vec<CompiledPoly>>,
}

/// Plain-data description of a subsystem, with polynomials in human syntax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsystemDesc {
    pub id: String,
    pub states: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub noise: Vec<String>,
    pub modes: Vec<ModeDesc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub outputs: BTreeMap<String, Vec<String>>,
    pub state_set: BoxSet,
    pub init_set: BoxSet,
    pub unsafe_set: BoxSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_set: Option<BoxSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeDesc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub dynamics: Vec<String>,
}

impl Subsystem {
    /// Builds a subsystem from its description. `noise` maps noise variable
    /// names to distributions; see [`NoiseTable::lookup`].
    pub fn from_desc(desc: &SubsystemDesc, noise: &NoiseTable) -> Result<Self, ModelError> {
        let id = desc.id.clone();
        let invalid = |msg: String| ModelError::Invalid { id: id.clone(), msg };
        let poly_err = |source| ModelError::Poly { id: id.clone(), source };
        if desc.states.is_empty() {
            return Err(invalid("at least one state variable is required".into()));
        }
        if desc.modes.is_empty() {
            return Err(invalid("at least one mode is required".into()));
        }
        let vars = desc
            .states
            .iter()
            .map(|n| (n.clone(), Role::State))
            .chain(desc.inputs.iter().map(|n| (n.clone(), Role::InternalInput)))
            .chain(desc.noise.iter().map(|n| (n.clone(), Role::Noise)));
        let space = Arc::new(VariableSpace::from_names(vars).map_err(poly_err)?);
        let n = desc.states.len();

        let parse_vec = |srcs: &[String], what: &str, state_only: bool| {
            let polys = srcs
                .iter()
                .map(|s| Polynomial::parse(&space, s))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ModelError::Poly { id: id.clone(), source: e })?;
            if state_only
                && polys
                    .iter()
                    .any(|p| p.depends_on_role(Role::InternalInput) || p.depends_on_role(Role::Noise))
            {
                return Err(ModelError::Invalid {
                    id: id.clone(),
                    msg: format!("{what} may only depend on state variables"),
                });
            }
            Ok(polys)
        };

        let mut modes = Vec::with_capacity(desc.modes.len());
        for (k, m) in desc.modes.iter().enumerate() {
            if m.dynamics.len() != n {
                return Err(invalid(format!(
                    "mode {k} has {} dynamics components, expected {n}",
                    m.dynamics.len()
                )));
            }
            modes.push(Mode {
                label: m.label.clone().unwrap_or_else(|| format!("mode{k}")),
                dynamics: parse_vec(&m.dynamics, "dynamics", false)?,
            });
        }
        let output = match &desc.output {
            Some(o) => parse_vec(o, "output", true)?,
            None => (0..n).map(|i| Polynomial::var_at(&space, i)).collect(),
        };
        let mut outputs = BTreeMap::new();
        for (target, srcs) in &desc.outputs {
            outputs.insert(target.clone(), parse_vec(srcs, "outputs", true)?);
        }

        for (name, set, empty_ok) in [
            ("state_set", &desc.state_set, false),
            ("init_set", &desc.init_set, true),
            ("unsafe_set", &desc.unsafe_set, true),
        ] {
            if set.is_empty() && !empty_ok {
                return Err(invalid(format!("{name} must not be empty")));
            }
            if let Some(d) = set.dim() {
                if d != n {
                    return Err(invalid(format!("{name} has dimension {d}, expected {n}")));
                }
            }
        }
        let input_set = match &desc.input_set {
            Some(w) => w.clone(),
            None if desc.inputs.is_empty() => BoxSet::unit(),
            None => return Err(invalid("input_set is required when inputs are declared".into())),
        };
        if input_set.is_empty() {
            return Err(invalid("input_set must not be empty".into()));
        }
        if input_set.dim() != Some(desc.inputs.len()) {
            return Err(invalid(format!(
                "input_set has dimension {:?}, expected {}",
                input_set.dim(),
                desc.inputs.len()
            )));
        }

        let mut noise_specs = Vec::with_capacity(desc.noise.len());
        let mut defaulted = Vec::new();
        for name in &desc.noise {
            match noise.lookup(&id, name) {
                Some(spec) => {
                    spec.validate().map_err(poly_err)?;
                    noise_specs.push(spec);
                }
                None => {
                    noise_specs.push(NoiseSpec::default());
                    defaulted.push(name.clone());
                }
            }
        }

        let compiled = Arc::new(CompiledSubsystem {
            dynamics: modes
                .iter()
                .map(|m| m.dynamics.iter().map(Polynomial::compile).collect())
                .collect(),
            output: output.iter().map(Polynomial::compile).collect(),
            outputs: outputs
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(Polynomial::compile).collect()))
                .collect(),
        });
        Ok(Self {
            id,
            space,
            modes,
            output,
            outputs,
            state_set: desc.state_set.clone(),
            init_set: desc.init_set.clone(),
            unsafe_set: desc.unsafe_set.clone(),
            input_set,
            noise: noise_specs,
            defaulted_noise: defaulted,
            compiled,
        })
    }

    pub fn to_desc(&self) -> SubsystemDesc {
        let names = |role| -> Vec<String> {
            self.space
                .vars()
                .iter()
                .filter(|v| v.role == role)
                .map(|v| v.name.clone())
                .collect()
        };
        let show = |ps: &[Polynomial]| ps.iter().map(|p| p.to_string()).collect::<Vec<_>>();
        let identity: Vec<Polynomial> =
            (0..self.state_dim()).map(|i| Polynomial::var_at(&self.space, i)).collect();
        SubsystemDesc {
            id: self.id.clone(),
            states: names(Role::State),
            inputs: names(Role::InternalInput),
            noise: names(Role::Noise),
            modes: self
                .modes
                .iter()
                .map(|m| ModeDesc { label: Some(m.label.clone()), dynamics: show(&m.dynamics) })
                .collect(),
            output: (self.output != identity).then(|| show(&self.output)),
            outputs: self.outputs.iter().map(|(k, v)| (k.clone(), show(v))).collect(),
            state_set: self.state_set.clone(),
            init_set: self.init_set.clone(),
            unsafe_set: self.unsafe_set.clone(),
            input_set: (self.input_dim() > 0).then(|| self.input_set.clone()),
        }
    }

    pub fn space(&self) -> &Arc<VariableSpace> {
        &self.space
    }

    pub fn state_dim(&self) -> usize {
        self.space.count(Role::State)
    }

    pub fn input_dim(&self) -> usize {
        self.space.count(Role::InternalInput)
    }

    pub fn noise_dim(&self) -> usize {
        self.space.count(Role::Noise)
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    pub fn state_names(&self) -> Vec<String> {
        self.space.vars()[..self.state_dim()].iter().map(|v| v.name.clone()).collect()
    }

    pub fn input_names(&self) -> Vec<String> {
        let n = self.state_dim();
        self.space.vars()[n..n + self.input_dim()].iter().map(|v| v.name.clone()).collect()
    }

    /// Writes `[x, w, noise]` into `buf`, resizing it to the space length.
    pub fn fill_point(&self, buf: &mut Vec<f64>, x: &[f64], w: &[f64], noise: &[f64]) {
        buf.clear();
        buf.extend_from_slice(x);
        buf.extend_from_slice(w);
        buf.extend_from_slice(noise);
        buf.resize(self.space.len(), 0.0);
    }

    /// One step of mode `mode`'s vector field.
    pub fn step_into(&self, mode: usize, x: &[f64], w: &[f64], noise: &[f64], out: &mut Vec<f64>) {
        let mut buf = Vec::with_capacity(self.space.len());
        self.fill_point(&mut buf, x, w, noise);
        out.clear();
        out.extend(self.compiled.dynamics[mode].iter().map(|p| p.eval(&buf)));
    }

    pub fn step(&self, mode: usize, x: &[f64], w: &[f64], noise: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        self.step_into(mode, x, w, noise, &mut out);
        out
    }

    /// External output at state `x`.
    pub fn eval_output(&self, x: &[f64]) -> Vec<f64> {
        let mut buf = Vec::new();
        self.fill_point(&mut buf, x, &[], &[]);
        self.compiled.output.iter().map(|p| p.eval(&buf)).collect()
    }

    /// Output sent to subsystem `target`, if wired.
    pub fn eval_output_to(&self, target: &str, x: &[f64]) -> Option<Vec<f64>> {
        let ps = self.compiled.outputs.get(target)?;
        let mut buf = Vec::new();
        self.fill_point(&mut buf, x, &[], &[]);
        Some(ps.iter().map(|p| p.eval(&buf)).collect())
    }

    pub(crate) fn compiled_output_to(&self, target: &str) -> Option<&[CompiledPoly]> {
        self.compiled.outputs.get(target).map(Vec::as_slice)
    }

    pub(crate) fn compiled_output(&self) -> &[CompiledPoly] {
        &self.compiled.output
    }
}

/// Noise distributions keyed by `"<subsystem>.<var>"`, `"<var>"` or `"*"`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NoiseTable(pub BTreeMap<String, NoiseSpec>);

impl NoiseTable {
    /// Most specific entry wins; `None` means the caller falls back to the
    /// standard Gaussian.
    pub fn lookup(&self, subsystem: &str, var: &str) -> Option<NoiseSpec> {
        self.0
            .get(&format!("{subsystem}.{var}"))
            .or_else(|| self.0.get(var))
            .or_else(|| self.0.get("*"))
            .copied()
    }
}

/// `to`'s internal inputs named in `inputs` receive `from`'s output for `to`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub inputs: Vec<String>,
}

/// Plain-data description of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDesc {
    pub subsystems: Vec<SubsystemDesc>,
    #[serde(default)]
    pub edges: Vec<Edge>,
    #[serde(default)]
    pub noise: NoiseTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    DuplicateId,
    UnknownSubsystem,
    UnknownInput,
    DimensionMismatch,
    MissingOutput,
    UnwiredOutput,
    InputNotCovered,
    InputCoveredTwice,
    SetNotContained,
    RangeExceedsInputSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub severity: Severity,
    pub kind: ViolationKind,
    pub subsystem: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edge: Option<(String, String)>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{sev} [{}]", self.subsystem)?;
        if let Some((a, b)) = &self.edge {
            write!(f, " edge {a}->{b}")?;
        }
        write!(f, ": {}", self.message)
    }
}

/// Where each internal input of a subsystem comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputSource {
    pub from: usize,
    pub component: usize,
}

/// A validated-on-demand interconnection of subsystems.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub subsystems: Vec<Subsystem>,
    pub edges: Vec<Edge>,
}

impl Network {
    pub fn from_desc(desc: &NetworkDesc) -> Result<Self, ModelError> {
        let subsystems = desc
            .subsystems
            .iter()
            .map(|s| Subsystem::from_desc(s, &desc.noise))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { subsystems, edges: desc.edges.clone() })
    }

    pub fn to_desc(&self) -> NetworkDesc {
        let mut noise = BTreeMap::new();
        for s in &self.subsystems {
            let names: Vec<String> = s
                .space()
                .vars()
                .iter()
                .filter(|v| v.role == Role::Noise)
                .map(|v| v.name.clone())
                .collect();
            for (name, spec) in names.iter().zip(&s.noise) {
                noise.insert(format!("{}.{name}", s.id), *spec);
            }
        }
        NetworkDesc {
            subsystems: self.subsystems.iter().map(Subsystem::to_desc).collect(),
            edges: self.edges.clone(),
            noise: NoiseTable(noise),
        }
    }

    pub fn len(&self) -> usize {
        self.subsystems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsystems.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.subsystems.iter().position(|s| s.id == id)
    }

    /// Checks wiring, dimensions, set containment and output ranges.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |severity, kind, subsystem: &str, edge: Option<&Edge>, message: String| {
            out.push(Violation {
                severity,
                kind,
                subsystem: subsystem.to_string(),
                edge: edge.map(|e| (e.from.clone(), e.to.clone())),
                message,
            })
        };
        let mut seen = BTreeSet::new();
        for s in &self.subsystems {
            if !seen.insert(s.id.as_str()) {
                push(Severity::Error, ViolationKind::DuplicateId, &s.id, None, "duplicate subsystem id".into());
            }
            for (name, set) in [("init_set", &s.init_set), ("unsafe_set", &s.unsafe_set)] {
                if !s.state_set.contains_set(set) {
                    push(
                        Severity::Error,
                        ViolationKind::SetNotContained,
                        &s.id,
                        None,
                        format!("{name} is not contained in state_set"),
                    );
                }
            }
        }

        let mut covered: Vec<Vec<usize>> = self.subsystems.iter().map(|s| vec![0; s.input_dim()]).collect();
        let mut wired: BTreeSet<(String, String)> = BTreeSet::new();
        for e in &self.edges {
            let (Some(j), Some(i)) = (self.index_of(&e.from), self.index_of(&e.to)) else {
                let missing = if self.index_of(&e.from).is_none() { &e.from } else { &e.to };
                push(
                    Severity::Error,
                    ViolationKind::UnknownSubsystem,
                    missing,
                    Some(e),
                    format!("edge references unknown subsystem `{missing}`"),
                );
                continue;
            };
            wired.insert((e.from.clone(), e.to.clone()));
            let (src, dst) = (&self.subsystems[j], &self.subsystems[i]);
            let input_names = dst.input_names();
            let mut slice = Vec::new();
            for name in &e.inputs {
                match input_names.iter().position(|n| n == name) {
                    Some(k) => {
                        covered[i][k] += 1;
                        slice.push(k);
                    }
                    None => push(
                        Severity::Error,
                        ViolationKind::UnknownInput,
                        &dst.id,
                        Some(e),
                        format!("`{name}` is not an internal input of `{}`", dst.id),
                    ),
                }
            }
            let Some(h) = src.outputs.get(&dst.id) else {
                push(
                    Severity::Error,
                    ViolationKind::MissingOutput,
                    &src.id,
                    Some(e),
                    format!("`{}` declares no output for `{}`", src.id, dst.id),
                );
                continue;
            };
            if h.len() != e.inputs.len() {
                push(
                    Severity::Error,
                    ViolationKind::DimensionMismatch,
                    &dst.id,
                    Some(e),
                    format!("output has dimension {}, input slice has {}", h.len(), e.inputs.len()),
                );
                continue;
            }
            if slice.len() != h.len() {
                continue;
            }
            // range over-approximation against the input set, per component
            let w_proj = dst.input_set.project(&slice);
            let mut ranges: Vec<[f64; 2]> = vec![[f64::INFINITY, f64::NEG_INFINITY]; h.len()];
            for b in &src.state_set.boxes {
                let mut vars = b.bounds.clone();
                vars.resize(src.space().len(), [0.0, 0.0]);
                for (r, p) in ranges.iter_mut().zip(h) {
                    let [lo, hi] = interval_range(p, &vars);
                    r[0] = r[0].min(lo);
                    r[1] = r[1].max(hi);
                }
            }
            let range_box = BoxSet::single(ranges.clone());
            if !w_proj.contains_set(&range_box) {
                push(
                    Severity::Warning,
                    ViolationKind::RangeExceedsInputSet,
                    &dst.id,
                    Some(e),
                    format!("interval range {ranges:?} of the output is not inside the input set"),
                );
            }
        }
        for (i, s) in self.subsystems.iter().enumerate() {
            for (k, &c) in covered[i].iter().enumerate() {
                let name = &s.input_names()[k];
                if c == 0 {
                    push(
                        Severity::Error,
                        ViolationKind::InputNotCovered,
                        &s.id,
                        None,
                        format!("internal input `{name}` is not wired"),
                    );
                } else if c > 1 {
                    push(
                        Severity::Error,
                        ViolationKind::InputCoveredTwice,
                        &s.id,
                        None,
                        format!("internal input `{name}` is wired {c} times"),
                    );
                }
            }
            for target in s.outputs.keys() {
                if !wired.contains(&(s.id.clone(), target.clone())) {
                    push(
                        Severity::Error,
                        ViolationKind::UnwiredOutput,
                        &s.id,
                        None,
                        format!("output for `{target}` has no matching edge"),
                    );
                }
            }
        }
        out
    }

    /// Fails when validation reports any error-severity violation.
    pub fn ensure_valid(&self) -> Result<Vec<Violation>, ModelError> {
        let v = self.validate();
        let errors: Vec<String> = v
            .iter()
            .filter(|x| x.severity == Severity::Error)
            .map(|x| x.to_string())
            .collect();
        if errors.is_empty() {
            Ok(v)
        } else {
            Err(ModelError::Violations(errors.join("; ")))
        }
    }

    /// Source of every internal input, per subsystem. Requires a valid network.
    pub fn wiring(&self) -> Result<Vec<Vec<InputSource>>, ModelError> {
        self.ensure_valid()?;
        let mut wiring: Vec<Vec<Option<InputSource>>> =
            self.subsystems.iter().map(|s| vec![None; s.input_dim()]).collect();
        for e in &self.edges {
            let j = self.index_of(&e.from).expect("validated");
            let i = self.index_of(&e.to).expect("validated");
            let names = self.subsystems[i].input_names();
            for (c, name) in e.inputs.iter().enumerate() {
                let k = names.iter().position(|n| n == name).expect("validated");
                wiring[i][k] = Some(InputSource { from: j, component: c });
            }
        }
        Ok(wiring
            .into_iter()
            .map(|v| v.into_iter().map(|s| s.expect("validated")).collect())
            .collect())
    }

    /// Internal input of subsystem `i` given all pre-step states.
    pub fn inputs_for(&self, wiring: &[Vec<InputSource>], i: usize, states: &[Vec<f64>]) -> Vec<f64> {
        let target = &self.subsystems[i].id;
        wiring[i]
            .iter()
            .map(|src| {
                let s = &self.subsystems[src.from];
                let h = s.compiled_output_to(target).expect("validated wiring");
                let mut buf = Vec::new();
                s.fill_point(&mut buf, &states[src.from], &[], &[]);
                h[src.component].eval(&buf)
            })
            .collect()
    }

    /// One synchronous step of the interconnected switched system.
    pub fn step(
        &self,
        wiring: &[Vec<InputSource>],
        states: &[Vec<f64>],
        modes: &[usize],
        noise: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|i| {
                let w = self.inputs_for(wiring, i, states);
                self.subsystems[i].step(modes[i], &states[i], &w, &noise[i])
            })
            .collect()
    }

    /// Monolithic view with all internal inputs substituted.
    pub fn flatten(&self) -> Result<FlatSystem, ModelError> {
        let wiring = self.wiring()?;
        let mut vars = Vec::new();
        for s in &self.subsystems {
            for name in s.state_names() {
                vars.push(Variable { name: format!("{}.{name}", s.id), role: Role::State });
            }
        }
        for s in &self.subsystems {
            for v in s.space().vars().iter().filter(|v| v.role == Role::Noise) {
                vars.push(Variable { name: format!("{}.{}", s.id, v.name), role: Role::Noise });
            }
        }
        let space = Arc::new(
            VariableSpace::new(vars).map_err(|e| ModelError::Poly { id: "<flat>".into(), source: e })?,
        );
        let flat_err = |e| ModelError::Poly { id: "<flat>".into(), source: e };
        let renamed = |s: &Subsystem, name: &str| format!("{}.{name}", s.id);

        let mut dynamics = Vec::with_capacity(self.len());
        for (i, s) in self.subsystems.iter().enumerate() {
            let mut subs: BTreeMap<String, Polynomial> = BTreeMap::new();
            for v in s.space().vars() {
                if v.role != Role::InternalInput {
                    subs.insert(v.name.clone(), Polynomial::var(&space, &renamed(s, &v.name)).map_err(flat_err)?);
                }
            }
            for (k, name) in s.input_names().iter().enumerate() {
                let src = &wiring[i][k];
                let from = &self.subsystems[src.from];
                let h = &from.outputs[&s.id][src.component];
                let mut inner = BTreeMap::new();
                for v in from.space().vars() {
                    if v.role == Role::State {
                        inner.insert(
                            v.name.clone(),
                            Polynomial::var(&space, &renamed(from, &v.name)).map_err(flat_err)?,
                        );
                    }
                }
                subs.insert(name.clone(), h.compose(&inner).map_err(flat_err)?);
            }
            let per_mode = s
                .modes
                .iter()
                .map(|m| {
                    m.dynamics
                        .iter()
                        .map(|p| p.compose(&subs))
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<Vec<_>, _>>()
                .map_err(flat_err)?;
            dynamics.push(per_mode);
        }
        let mut state_offsets = vec![0];
        let mut noise_offsets = vec![0];
        for s in &self.subsystems {
            state_offsets.push(state_offsets.last().unwrap() + s.state_dim());
            noise_offsets.push(noise_offsets.last().unwrap() + s.noise_dim());
        }
        let compiled = dynamics
            .iter()
            .map(|modes| modes.iter().map(|m| m.iter().map(Polynomial::compile).collect()).collect())
            .collect();
        Ok(FlatSystem {
            space,
            mode_counts: self.subsystems.iter().map(Subsystem::mode_count).collect(),
            dynamics,
            compiled,
            state_offsets,
            noise_offsets,
        })
    }
}

/// Monolithic switched system obtained by substituting all wiring. Joint modes
/// are tuples of per-subsystem modes and are never enumerated.
#[derive(Debug, Clone)]
pub struct FlatSystem {
    pub space: Arc<VariableSpace>,
    pub mode_counts: Vec<usize>,
    /// `dynamics[i][p]` is subsystem `i`'s vector field in its mode `p`.
    pub dynamics: Vec<Vec<Vec<Polynomial>>>,
    compiled: Vec<Vec<Vec<CompiledPoly>>>,
    state_offsets: Vec<usize>,
    noise_offsets: Vec<usize>,
}

impl FlatSystem {
    pub fn state_dim(&self) -> usize {
        *self.state_offsets.last().unwrap()
    }

    pub fn noise_dim(&self) -> usize {
        *self.noise_offsets.last().unwrap()
    }

    /// Number of joint modes, `None` on overflow.
    pub fn mode_count(&self) -> Option<u128> {
        self.mode_counts.iter().try_fold(1u128, |acc, &m| acc.checked_mul(m as u128))
    }

    /// One step under the joint mode tuple `modes`.
    pub fn step(&self, x: &[f64], modes: &[usize], noise: &[f64]) -> Result<Vec<f64>, ModelError> {
        if x.len() != self.state_dim() || noise.len() != self.noise_dim() || modes.len() != self.mode_counts.len() {
            return Err(ModelError::Dimension("flat step input sizes".into()));
        }
        if let Some(i) = modes.iter().zip(&self.mode_counts).position(|(p, m)| p >= m) {
            return Err(ModelError::Dimension(format!("mode {} out of range for subsystem {i}", modes[i])));
        }
        let mut point = Vec::with_capacity(self.space.len());
        point.extend_from_slice(x);
        point.extend_from_slice(noise);
        let mut out = Vec::with_capacity(x.len());
        for (i, &p) in modes.iter().enumerate() {
            out.extend(self.compiled[i][p].iter().map(|c| c.eval(&point)));
        }
        Ok(out)
    }

    /// Splits a flat vector into per-subsystem state slices.
    pub fn split_states(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.state_offsets.windows(2).map(|w| x[w[0]..w[1]].to_vec()).collect()
    }

    pub fn split_noise(&self, v: &[f64]) -> Vec<Vec<f64>> {
        self.noise_offsets.windows(2).map(|w| v[w[0]..w[1]].to_vec()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(id: &str, other: &str, a: f64) -> SubsystemDesc {
        SubsystemDesc {
            id: id.into(),
            states: vec![format!("x{id}")],
            inputs: vec![format!("w{id}")],
            noise: vec![format!("s{id}")],
            modes: vec![
                ModeDesc { label: None, dynamics: vec![format!("{a}*x{id} + 0.1*w{id} + 0.2*s{id}")] },
                ModeDesc { label: None, dynamics: vec![format!("0.3*x{id}^2 - w{id}*x{id} + s{id}")] },
            ],
            output: None,
            outputs: [(other.to_string(), vec![format!("x{id}")])].into(),
            state_set: BoxSet::single(vec![[-1.0, 1.0]]),
            init_set: BoxSet::single(vec![[-0.1, 0.1]]),
            unsafe_set: BoxSet::union(vec![vec![[-1.0, -0.8]], vec![[0.8, 1.0]]]),
            input_set: Some(BoxSet::single(vec![[-1.0, 1.0]])),
        }
    }

    fn loop2() -> Network {
        Network::from_desc(&NetworkDesc {
            subsystems: vec![scalar("a", "b", 0.5), scalar("b", "a", -0.4)],
            edges: vec![
                Edge { from: "a".into(), to: "b".into(), inputs: vec!["wb".into()] },
                Edge { from: "b".into(), to: "a".into(), inputs: vec!["wa".into()] },
            ],
            noise: NoiseTable::default(),
        })
        .unwrap()
    }

    #[test]
    fn loop_validates_clean() {
        assert!(loop2().validate().is_empty());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut desc = loop2().to_desc();
        desc.subsystems[0].outputs.insert("b".into(), vec!["xa".into(), "xa^2".into()]);
        let v = Network::from_desc(&desc).unwrap().validate();
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].kind, ViolationKind::DimensionMismatch);
        assert_eq!(v[0].edge, Some(("a".into(), "b".into())));
    }

    #[test]
    fn range_warning_is_not_an_error() {
        let mut desc = loop2().to_desc();
        desc.subsystems[0].outputs.insert("b".into(), vec!["3*xa".into()]);
        let net = Network::from_desc(&desc).unwrap();
        let v = net.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].severity, Severity::Warning);
        assert_eq!(v[0].kind, ViolationKind::RangeExceedsInputSet);
        assert!(net.ensure_valid().is_ok());
    }

    #[test]
    fn unwired_input_and_dangling_output() {
        let mut desc = loop2().to_desc();
        desc.edges.pop();
        let kinds: Vec<_> = Network::from_desc(&desc).unwrap().validate().iter().map(|v| v.kind).collect();
        assert!(kinds.contains(&ViolationKind::InputNotCovered));
        assert!(kinds.contains(&ViolationKind::UnwiredOutput));
    }

    #[test]
    fn init_outside_state_set() {
        let mut desc = loop2().to_desc();
        desc.subsystems[0].init_set = BoxSet::single(vec![[0.5, 1.5]]);
        let v = Network::from_desc(&desc).unwrap().validate();
        assert_eq!(v[0].kind, ViolationKind::SetNotContained);
    }

    #[test]
    fn bad_dynamics_length_rejected() {
        let mut d = scalar("a", "b", 0.5);
        d.modes[0].dynamics.push("xa".into());
        assert!(Subsystem::from_desc(&d, &NoiseTable::default()).is_err());
    }

    #[test]
    fn output_must_be_state_only() {
        let mut d = scalar("a", "b", 0.5);
        d.outputs.insert("b".into(), vec!["wa".into()]);
        assert!(matches!(
            Subsystem::from_desc(&d, &NoiseTable::default()),
            Err(ModelError::Invalid { .. })
        ));
    }

    #[test]
    fn boxset_json_forms() {
        let single: BoxSet = serde_json::from_str("[[1, 50]]").unwrap();
        assert_eq!(single, BoxSet::single(vec![[1.0, 50.0]]));
        let union: BoxSet = serde_json::from_str("[[[1,17]],[[23,50]]]").unwrap();
        assert_eq!(union.boxes.len(), 2);
        let empty: BoxSet = serde_json::from_str("[]").unwrap();
        assert!(empty.is_empty());
        assert!(serde_json::from_str::<BoxSet>("[[2, 1]]").is_err());
        assert!(serde_json::from_str::<BoxSet>("[[[0,1]],[[0,1],[0,1]]]").is_err());
    }

    #[test]
    fn interval_range_encloses_samples() {
        let s = Arc::new(VariableSpace::from_names([("x", Role::State), ("y", Role::State)]).unwrap());
        let p = Polynomial::parse(&s, "x^2 - 3*x*y + y^3 - 1").unwrap();
        let bx = [[-1.0, 2.0], [-0.5, 1.5]];
        let [lo, hi] = interval_range(&p, &bx);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let pt = [rng.random_range(-1.0..2.0), rng.random_range(-0.5..1.5)];
            let v = p.eval(&pt).unwrap();
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn flatten_single_subsystem_drops_inputs() {
        let mut d = scalar("a", "b", 0.5);
        d.inputs.clear();
        d.outputs.clear();
        d.input_set = None;
        d.modes[0].dynamics = vec!["0.5*xa + 0.2*sa".into()];
        d.modes[1].dynamics = vec!["0.3*xa^2 + sa".into()];
        let net = Network::from_desc(&NetworkDesc { subsystems: vec![d], edges: vec![], noise: NoiseTable::default() })
            .unwrap();
        let flat = net.flatten().unwrap();
        assert_eq!(flat.state_dim(), 1);
        assert_eq!(flat.mode_count(), Some(2));
        let sub = &net.subsystems[0];
        for p in 0..2 {
            let a = flat.step(&[0.3], &[p], &[0.7]).unwrap();
            let b = sub.step(p, &[0.3], &[], &[0.7]);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn flatten_commutes_with_network_step() {
        let net = loop2();
        let flat = net.flatten().unwrap();
        let wiring = net.wiring().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let modes: Vec<usize> = (0..2).map(|_| rng.random_range(0..2)).collect();
            let noise: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let flat_next = flat.step(&x, &modes, &noise).unwrap();
            let net_next = net.step(&wiring, &flat.split_states(&x), &modes, &flat.split_noise(&noise));
            for (a, b) in flat_next.iter().zip(net_next.concat()) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn desc_round_trip() {
        let net = loop2();
        let text = serde_json::to_string_pretty(&net.to_desc()).unwrap();
        let back = Network::from_desc(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn noise_lookup_precedence() {
        let mut t = BTreeMap::new();
        t.insert("*".to_string(), NoiseSpec::Uniform { lo: 0.0, hi: 1.0 });
        t.insert("s".to_string(), NoiseSpec::Gaussian { mean: 0.0, std: 2.0 });
        t.insert("a.s".to_string(), NoiseSpec::Gaussian { mean: 1.0, std: 2.0 });
        let t = NoiseTable(t);
        assert_eq!(t.lookup("a", "s"), Some(NoiseSpec::Gaussian { mean: 1.0, std: 2.0 }));
        assert_eq!(t.lookup("b", "s"), Some(NoiseSpec::Gaussian { mean: 0.0, std: 2.0 }));
        assert_eq!(t.lookup("b", "q"), Some(NoiseSpec::Uniform { lo: 0.0, hi: 1.0 }));
        assert_eq!(NoiseTable::default().lookup("b", "q"), None);
    }
}
