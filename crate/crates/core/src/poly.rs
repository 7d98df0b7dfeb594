//! Sparse multivariate polynomials over role-tagged variables.
//!
//! Every dynamics map, output map and barrier in this crate is a [`Polynomial`]
//! over a [`VariableSpace`]. Variables carry a [`Role`] so that noise variables
//! can be integrated out in closed form with [`Polynomial::expectation_over_noise`].

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coefficients with magnitude below this are dropped after every operation.
pub const ZERO_TOL: f64 = 1e-12;

/// Highest raw moment the expectation engine will produce.
pub const MAX_MOMENT_DEGREE: u32 = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("duplicate variable name `{0}`")]
    DuplicateVariable(String),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("polynomials live in different variable spaces")]
    SpaceMismatch,
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("moment of degree {degree} not supported (max {MAX_MOMENT_DEGREE})")]
    MomentDegree { degree: u32 },
    #[error("no noise specification for noise variable `{0}`")]
    MissingNoise(String),
    #[error("invalid noise specification: {0}")]
    InvalidNoise(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    State,
    InternalInput,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub role: Role,
}

/// Ordered list of named variables. Indices within each role are contiguous
/// from zero in declaration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Variable>", into = "Vec<Variable>")]
pub struct VariableSpace {
    vars: Vec<Variable>,
    role_index: Vec<usize>,
}

impl TryFrom<Vec<Variable>> for VariableSpace {
    type Error = PolyError;

    fn try_from(vars: Vec<Variable>) -> Result<Self, Self::Error> {
        VariableSpace::new(vars)
    }
}

impl From<VariableSpace> for Vec<Variable> {
    fn from(space: VariableSpace) -> Self {
        space.vars
    }
}

impl VariableSpace {
    pub fn new(vars: Vec<Variable>) -> Result<Self, PolyError> {
        let mut role_index = Vec::with_capacity(vars.len());
        let mut counts: BTreeMap<Role, usize> = BTreeMap::new();
        for (i, v) in vars.iter().enumerate() {
            if vars[..i].iter().any(|u| u.name == v.name) {
                return Err(PolyError::DuplicateVariable(v.name.clone()));
            }
            let c = counts.entry(v.role).or_insert(0);
            role_index.push(*c);
            *c += 1;
        }
        Ok(Self { vars, role_index })
    }

    /// Convenience constructor from `(name, role)` pairs.
    pub fn from_names<S: Into<String>>(
        names: impl IntoIterator<Item = (S, Role)>,
    ) -> Result<Self, PolyError> {
        Self::new(
            names
                .into_iter()
                .map(|(name, role)| Variable { name: name.into(), role })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn vars(&self) -> &[Variable] {
        &self.vars
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.vars.iter().position(|v| v.name == name)
    }

    /// Position of a variable among the variables sharing its role.
    pub fn role_index(&self, var: usize) -> usize {
        self.role_index[var]
    }

    pub fn count(&self, role: Role) -> usize {
        self.vars.iter().filter(|v| v.role == role).count()
    }

    /// Global indices of the variables with the given role, in order.
    pub fn indices_of(&self, role: Role) -> Vec<usize> {
        (0..self.vars.len()).filter(|&i| self.vars[i].role == role).collect()
    }

    pub fn without_role(&self, role: Role) -> VariableSpace {
        let vars = self.vars.iter().filter(|v| v.role != role).cloned().collect();
        VariableSpace::new(vars).expect("subset of a valid space is valid")
    }
}

/// Distribution of one scalar noise component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum NoiseSpec {
    Gaussian { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec::Gaussian { mean: 0.0, std: 1.0 }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), PolyError> {
        match *self {
            NoiseSpec::Gaussian { mean, std } => {
                if !mean.is_finite() || !std.is_finite() || std < 0.0 {
                    return Err(PolyError::InvalidNoise(format!(
                        "gaussian needs finite mean and std >= 0, got ({mean}, {std})"
                    )));
                }
            }
            NoiseSpec::Uniform { lo, hi } => {
                if !lo.is_finite() || !hi.is_finite() || lo > hi {
                    return Err(PolyError::InvalidNoise(format!(
                        "uniform needs finite lo <= hi, got ({lo}, {hi})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Raw moment `E[X^k]`.
    pub fn moment(&self, k: u32) -> Result<f64, PolyError> {
        if k > MAX_MOMENT_DEGREE {
            return Err(PolyError::MomentDegree { degree: k });
        }
        if k == 0 {
            return Ok(1.0);
        }
        match *self {
            NoiseSpec::Gaussian { mean, std } => {
                // E[(m + sZ)^k] = sum_j C(k,j) m^(k-j) s^j E[Z^j], E[Z^j] = (j-1)!! for even j
                let mut total = 0.0;
                let mut binom = 1.0;
                let mut central = 1.0; // (j-1)!!
                for j in 0..=k {
                    if j > 0 {
                        binom = binom * f64::from(k - j + 1) / f64::from(j);
                    }
                    if j % 2 == 0 {
                        if j >= 2 {
                            central *= f64::from(j - 1);
                        }
                        total += binom * mean.powi((k - j) as i32) * std.powi(j as i32) * central;
                    }
                }
                Ok(total)
            }
            NoiseSpec::Uniform { lo, hi } => {
                if hi == lo {
                    return Ok(lo.powi(k as i32));
                }
                let k1 = (k + 1) as i32;
                Ok((hi.powi(k1) - lo.powi(k1)) / (f64::from(k + 1) * (hi - lo)))
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            NoiseSpec::Gaussian { mean, std } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + std * z
            }
            NoiseSpec::Uniform { lo, hi } => {
                if hi == lo {
                    lo
                } else {
                    lo + (hi - lo) * rng.random::<f64>()
                }
            }
        }
    }
}

/// A sparse polynomial with real coefficients.
#[derive(Debug, Clone)]
pub struct Polynomial {
    space: Arc<VariableSpace>,
    terms: BTreeMap<Vec<u32>, f64>,
}

impl PartialEq for Polynomial {
    fn eq(&self, other: &Self) -> bool {
        same_space(&self.space, &other.space) && self.terms == other.terms
    }
}

fn same_space(a: &Arc<VariableSpace>, b: &Arc<VariableSpace>) -> bool {
    Arc::ptr_eq(a, b) || a == b
}

impl Polynomial {
    pub fn zero(space: &Arc<VariableSpace>) -> Self {
        Self { space: space.clone(), terms: BTreeMap::new() }
    }

    pub fn constant(space: &Arc<VariableSpace>, c: f64) -> Self {
        let mut p = Self::zero(space);
        p.add_term(vec![0; space.len()], c);
        p
    }

    pub fn var(space: &Arc<VariableSpace>, name: &str) -> Result<Self, PolyError> {
        let i = space
            .index_of(name)
            .ok_or_else(|| PolyError::UnknownVariable(name.to_string()))?;
        Ok(Self::var_at(space, i))
    }

    pub fn var_at(space: &Arc<VariableSpace>, index: usize) -> Self {
        let mut exp = vec![0; space.len()];
        exp[index] = 1;
        let mut p = Self::zero(space);
        p.add_term(exp, 1.0);
        p
    }

    /// Builds a polynomial from raw terms, merging duplicates and dropping
    /// coefficients below [`ZERO_TOL`].
    pub fn from_terms(
        space: &Arc<VariableSpace>,
        terms: impl IntoIterator<Item = (Vec<u32>, f64)>,
    ) -> Result<Self, PolyError> {
        let mut p = Self::zero(space);
        for (exp, c) in terms {
            if exp.len() != space.len() {
                return Err(PolyError::Dimension { expected: space.len(), got: exp.len() });
            }
            *p.terms.entry(exp).or_insert(0.0) += c;
        }
        p.normalize();
        Ok(p)
    }

    pub fn parse(space: &Arc<VariableSpace>, src: &str) -> Result<Self, PolyError> {
        Parser::new(space, src).parse()
    }

    pub fn space(&self) -> &Arc<VariableSpace> {
        &self.space
    }

    pub fn terms(&self) -> impl Iterator<Item = (&[u32], f64)> {
        self.terms.iter().map(|(e, &c)| (e.as_slice(), c))
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coefficient(&self, exp: &[u32]) -> f64 {
        self.terms.get(exp).copied().unwrap_or(0.0)
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(|e| e.iter().sum()).max().unwrap_or(0)
    }

    pub fn degree_in(&self, var: usize) -> u32 {
        self.terms.keys().map(|e| e[var]).max().unwrap_or(0)
    }

    /// True when the polynomial has a nonzero exponent on some variable of `role`.
    pub fn depends_on_role(&self, role: Role) -> bool {
        let idx = self.space.indices_of(role);
        self.terms.keys().any(|e| idx.iter().any(|&i| e[i] > 0))
    }

    fn add_term(&mut self, exp: Vec<u32>, c: f64) {
        let v = self.terms.get(&exp).copied().unwrap_or(0.0) + c;
        if v.abs() < ZERO_TOL {
            self.terms.remove(&exp);
        } else {
            self.terms.insert(exp, v);
        }
    }

    fn normalize(&mut self) {
        self.terms.retain(|_, c| c.abs() >= ZERO_TOL);
    }

    fn assert_same_space(&self, other: &Self) {
        assert!(
            same_space(&self.space, &other.space),
            "polynomials live in different variable spaces"
        );
    }

    pub fn scale(&self, k: f64) -> Self {
        let mut p = Self {
            space: self.space.clone(),
            terms: self.terms.iter().map(|(e, c)| (e.clone(), c * k)).collect(),
        };
        p.normalize();
        p
    }

    pub fn pow(&self, n: u32) -> Self {
        let mut acc = Self::constant(&self.space, 1.0);
        for _ in 0..n {
            acc = &acc * self;
        }
        acc
    }

    pub fn eval(&self, point: &[f64]) -> Result<f64, PolyError> {
        if point.len() != self.space.len() {
            return Err(PolyError::Dimension { expected: self.space.len(), got: point.len() });
        }
        Ok(self.eval_unchecked(point))
    }

    /// Evaluation without the length check. Panics on short input.
    pub fn eval_unchecked(&self, point: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(exp, c)| {
                exp.iter()
                    .zip(point)
                    .filter(|(&e, _)| e > 0)
                    .fold(*c, |acc, (&e, &x)| acc * x.powi(e as i32))
            })
            .sum()
    }

    /// Substitutes polynomials for variables. Every substituted polynomial must
    /// share one target space; variables that are not substituted are carried
    /// over by name and must exist in the target space.
    pub fn compose(&self, subs: &BTreeMap<String, Polynomial>) -> Result<Self, PolyError> {
        for name in subs.keys() {
            if self.space.index_of(name).is_none() {
                return Err(PolyError::UnknownVariable(name.clone()));
            }
        }
        let Some(target) = subs.values().next().map(|p| p.space.clone()) else {
            return Ok(self.clone());
        };
        if subs.values().any(|p| !same_space(&p.space, &target)) {
            return Err(PolyError::SpaceMismatch);
        }
        let used: Vec<bool> = (0..self.space.len()).map(|i| self.degree_in(i) > 0).collect();
        let images: Vec<Polynomial> = self
            .space
            .vars()
            .iter()
            .zip(&used)
            .map(|(v, &u)| match subs.get(&v.name) {
                Some(p) => Ok(p.clone()),
                None if u => Polynomial::var(&target, &v.name),
                // never raised to a positive power
                None => Ok(Polynomial::zero(&target)),
            })
            .collect::<Result<_, _>>()?;
        let mut powers: Vec<Vec<Polynomial>> = images
            .iter()
            .map(|img| vec![Polynomial::constant(&target, 1.0), img.clone()])
            .collect();
        let mut out = Polynomial::zero(&target);
        for (exp, &c) in &self.terms {
            let mut term = Polynomial::constant(&target, c);
            for (v, &e) in exp.iter().enumerate() {
                if e == 0 {
                    continue;
                }
                while powers[v].len() <= e as usize {
                    let next = &powers[v][powers[v].len() - 1] * &images[v];
                    powers[v].push(next);
                }
                term = &term * &powers[v][e as usize];
            }
            out = &out + &term;
        }
        Ok(out)
    }

    /// Integrates out every noise-role variable using raw moments of the given
    /// specs (indexed by position among the noise variables). Components are
    /// treated as independent. The result lives in the space with the noise
    /// variables removed.
    pub fn expectation_over_noise(&self, noise: &[NoiseSpec]) -> Result<Self, PolyError> {
        let noise_idx = self.space.indices_of(Role::Noise);
        if noise.len() < noise_idx.len() {
            let missing = &self.space.vars()[noise_idx[noise.len()]].name;
            return Err(PolyError::MissingNoise(missing.clone()));
        }
        let keep: Vec<usize> = (0..self.space.len())
            .filter(|i| self.space.vars()[*i].role != Role::Noise)
            .collect();
        let reduced = Arc::new(self.space.without_role(Role::Noise));
        let mut cache: BTreeMap<(usize, u32), f64> = BTreeMap::new();
        let mut out = Polynomial::zero(&reduced);
        for (exp, &c) in &self.terms {
            let mut coef = c;
            for (k, &vi) in noise_idx.iter().enumerate() {
                let a = exp[vi];
                if a == 0 {
                    continue;
                }
                let m = match cache.get(&(k, a)) {
                    Some(&m) => m,
                    None => {
                        let m = noise[k].moment(a)?;
                        cache.insert((k, a), m);
                        m
                    }
                };
                coef *= m;
            }
            let new_exp: Vec<u32> = keep.iter().map(|&i| exp[i]).collect();
            *out.terms.entry(new_exp).or_insert(0.0) += coef;
        }
        out.normalize();
        Ok(out)
    }

    /// Re-expresses the polynomial in another space that contains all of the
    /// variables it uses (matched by name).
    pub fn embed(&self, target: &Arc<VariableSpace>) -> Result<Self, PolyError> {
        let map: Vec<Option<usize>> = self
            .space
            .vars()
            .iter()
            .map(|v| target.index_of(&v.name))
            .collect();
        let mut out = Polynomial::zero(target);
        for (exp, &c) in &self.terms {
            let mut e = vec![0; target.len()];
            for (i, &a) in exp.iter().enumerate() {
                if a == 0 {
                    continue;
                }
                match map[i] {
                    Some(j) => e[j] += a,
                    None => {
                        return Err(PolyError::UnknownVariable(self.space.vars()[i].name.clone()))
                    }
                }
            }
            *out.terms.entry(e).or_insert(0.0) += c;
        }
        out.normalize();
        Ok(out)
    }

    pub fn compile(&self) -> CompiledPoly {
        CompiledPoly::new(self)
    }

    pub fn to_json(&self) -> PolyJson {
        PolyJson {
            vars: self.space.vars().to_vec(),
            terms: self
                .terms
                .iter()
                .map(|(e, &c)| TermJson { exp: e.clone(), coef: c })
                .collect(),
        }
    }

    pub fn from_json(json: &PolyJson) -> Result<Self, PolyError> {
        let space = Arc::new(VariableSpace::new(json.vars.clone())?);
        Self::from_terms(&space, json.terms.iter().map(|t| (t.exp.clone(), t.coef)))
    }
}

/// JSON form: `{"vars": [...], "terms": [{"exp": [...], "coef": ...}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolyJson {
    pub vars: Vec<Variable>,
    pub terms: Vec<TermJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermJson {
    pub exp: Vec<u32>,
    pub coef: f64,
}

impl std::ops::Add for &Polynomial {
    type Output = Polynomial;
    fn add(self, rhs: &Polynomial) -> Polynomial {
        self.assert_same_space(rhs);
        let mut out = self.clone();
        for (e, &c) in &rhs.terms {
            *out.terms.entry(e.clone()).or_insert(0.0) += c;
        }
        out.normalize();
        out
    }
}

impl std::ops::Sub for &Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: &Polynomial) -> Polynomial {
        self + &rhs.scale(-1.0)
    }
}

impl std::ops::Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

impl std::ops::Mul for &Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: &Polynomial) -> Polynomial {
        self.assert_same_space(rhs);
        let mut terms: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        for (ea, &ca) in &self.terms {
            for (eb, &cb) in &rhs.terms {
                let e: Vec<u32> = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                *terms.entry(e).or_insert(0.0) += ca * cb;
            }
        }
        let mut out = Polynomial { space: self.space.clone(), terms };
        out.normalize();
        out
    }
}

impl fmt::Display for Polynomial {
    /// Human syntax accepted by [`Polynomial::parse`], e.g. `-0.00012*T^4 + 28.68`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        // highest total degree first reads more naturally
        let mut terms: Vec<(&Vec<u32>, &f64)> = self.terms.iter().collect();
        terms.sort_by(|a, b| {
            let da: u32 = a.0.iter().sum();
            let db: u32 = b.0.iter().sum();
            db.cmp(&da).then_with(|| b.0.cmp(a.0))
        });
        for (k, (exp, &c)) in terms.into_iter().enumerate() {
            let neg = c < 0.0;
            if k == 0 {
                if neg {
                    write!(f, "-")?;
                }
            } else {
                write!(f, "{}", if neg { " - " } else { " + " })?;
            }
            let mag = c.abs();
            let mut factors: Vec<String> = Vec::new();
            for (i, &e) in exp.iter().enumerate() {
                let name = &self.space.vars()[i].name;
                match e {
                    0 => {}
                    1 => factors.push(name.clone()),
                    _ => factors.push(format!("{name}^{e}")),
                }
            }
            if factors.is_empty() {
                write!(f, "{mag:?}")?;
            } else if mag == 1.0 {
                write!(f, "{}", factors.join("*"))?;
            } else {
                write!(f, "{mag:?}*{}", factors.join("*"))?;
            }
        }
        Ok(())
    }
}

/// Flattened polynomial for repeated evaluation in hot loops.
#[derive(Debug, Clone)]
pub struct CompiledPoly {
    needed: usize,
    coefs: Vec<f64>,
    // (term index start, end) into `factors`
    spans: Vec<(u32, u32)>,
    factors: Vec<(u32, i32)>,
}

impl CompiledPoly {
    fn new(p: &Polynomial) -> Self {
        let mut coefs = Vec::with_capacity(p.terms.len());
        let mut spans = Vec::with_capacity(p.terms.len());
        let mut factors = Vec::new();
        for (exp, &c) in &p.terms {
            let start = factors.len() as u32;
            for (v, &e) in exp.iter().enumerate() {
                if e > 0 {
                    factors.push((v as u32, e as i32));
                }
            }
            coefs.push(c);
            spans.push((start, factors.len() as u32));
        }
        let needed = factors.iter().map(|&(v, _)| v as usize + 1).max().unwrap_or(0);
        Self { needed, coefs, spans, factors }
    }

    /// Minimum point length accepted by [`CompiledPoly::eval`]: one past the
    /// highest variable index that actually occurs.
    pub fn needed_len(&self) -> usize {
        self.needed
    }

    #[inline]
    pub fn eval(&self, point: &[f64]) -> f64 {
        debug_assert!(point.len() >= self.needed);
        let mut total = 0.0;
        for (c, &(s, e)) in self.coefs.iter().zip(&self.spans) {
            let mut t = *c;
            for &(v, k) in &self.factors[s as usize..e as usize] {
                let x = point[v as usize];
                t *= match k {
                    1 => x,
                    2 => x * x,
                    _ => x.powi(k),
                };
            }
            total += t;
        }
        total
    }
}

struct Parser<'a> {
    space: &'a Arc<VariableSpace>,
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(space: &'a Arc<VariableSpace>, src: &'a str) -> Self {
        Self { space, src: src.as_bytes(), pos: 0 }
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, PolyError> {
        Err(PolyError::Parse { pos: self.pos, msg: msg.into() })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn parse(mut self) -> Result<Polynomial, PolyError> {
        let p = self.expr()?;
        if self.peek().is_some() {
            return self.err("unexpected trailing input");
        }
        Ok(p)
    }

    fn expr(&mut self) -> Result<Polynomial, PolyError> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    acc = &acc + &self.term()?;
                }
                Some(b'-') => {
                    self.pos += 1;
                    acc = &acc - &self.term()?;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Polynomial, PolyError> {
        let mut acc = self.unary()?;
        while self.peek() == Some(b'*') {
            self.pos += 1;
            acc = &acc * &self.unary()?;
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<Polynomial, PolyError> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(-&self.unary()?)
            }
            Some(b'+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Polynomial, PolyError> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            self.skip_ws();
            let start = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if start == self.pos {
                return self.err("expected non-negative integer exponent");
            }
            let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii digits");
            let n: u32 = match text.parse() {
                Ok(n) => n,
                Err(_) => return self.err("exponent out of range"),
            };
            return Ok(base.pow(n));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Polynomial, PolyError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if self.peek() != Some(b')') {
                    return self.err("expected `)`");
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.ident(),
            Some(c) => self.err(format!("unexpected character `{}`", c as char)),
            None => self.err("unexpected end of input"),
        }
    }

    fn number(&mut self) -> Result<Polynomial, PolyError> {
        let start = self.pos;
        let bytes = self.src;
        while self.pos < bytes.len() && (bytes[self.pos].is_ascii_digit() || bytes[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < bytes.len() && (bytes[self.pos] == b'e' || bytes[self.pos] == b'E') {
            let mut look = self.pos + 1;
            if look < bytes.len() && (bytes[look] == b'+' || bytes[look] == b'-') {
                look += 1;
            }
            if look < bytes.len() && bytes[look].is_ascii_digit() {
                self.pos = look;
                while self.pos < bytes.len() && bytes[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            }
        }
        let text = std::str::from_utf8(&bytes[start..self.pos]).expect("ascii");
        match text.parse::<f64>() {
            Ok(v) => Ok(Polynomial::constant(self.space, v)),
            Err(_) => {
                self.pos = start;
                self.err(format!("invalid number `{text}`"))
            }
        }
    }

    fn ident(&mut self) -> Result<Polynomial, PolyError> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric()
                || self.src[self.pos] == b'_'
                || self.src[self.pos] == b'.')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        match self.space.index_of(name) {
            Some(i) => Ok(Polynomial::var_at(self.space, i)),
            None => {
                self.pos = start;
                self.err(format!("unknown variable `{name}`"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn space(names: &[(&str, Role)]) -> Arc<VariableSpace> {
        Arc::new(VariableSpace::from_names(names.iter().map(|(n, r)| (n.to_string(), *r))).unwrap())
    }

    fn room_barrier() -> (Arc<VariableSpace>, Polynomial) {
        let s = space(&[("T", Role::State)]);
        let p = Polynomial::parse(
            &s,
            "-0.00012*T^4 + 0.01045*T^3 - 0.19932*T^2 - 0.64538*T + 28.68175",
        )
        .unwrap();
        (s, p)
    }

    #[test]
    fn eval_square() {
        let s = space(&[("x", Role::State)]);
        let p = Polynomial::parse(&s, "x^2").unwrap();
        assert_eq!(p.eval(&[3.0]).unwrap(), 9.0);
    }

    #[test]
    fn eval_zero_polynomial() {
        let s = space(&[("x", Role::State), ("y", Role::State)]);
        let p = Polynomial::zero(&s);
        assert_eq!(p.eval(&[1.5, -2.0]).unwrap(), 0.0);
    }

    #[test]
    fn eval_dimension_mismatch() {
        let s = space(&[("x", Role::State)]);
        let p = Polynomial::parse(&s, "x").unwrap();
        assert!(matches!(p.eval(&[1.0, 2.0]), Err(PolyError::Dimension { .. })));
    }

    #[test]
    fn quartic_matches_horner() {
        let (_, p) = room_barrier();
        // Horner, written out independently of the term map
        let coeffs = [-0.00012, 0.01045, -0.19932, -0.64538, 28.68175];
        let horner = |t: f64| coeffs.iter().fold(0.0, |acc, c| acc * t + c);
        for t in [1.0, 17.0, 20.0, 23.0, 50.0] {
            let got = p.eval(&[t]).unwrap();
            assert!((got - horner(t)).abs() <= 1e-9 * horner(t).abs().max(1.0), "t={t}");
        }
        let v = p.eval(&[20.0]).unwrap();
        assert!((v - horner(20.0)).abs() < 1e-9);
    }

    #[test]
    fn compose_binomial() {
        let s = space(&[("x", Role::State), ("s", Role::Noise)]);
        let p = Polynomial::parse(&s, "x^2").unwrap();
        let mut subs = BTreeMap::new();
        subs.insert("x".to_string(), Polynomial::parse(&s, "x + s").unwrap());
        let got = p.compose(&subs).unwrap();
        let want = Polynomial::parse(&s, "x^2 + 2*x*s + s^2").unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn compose_annihilation() {
        let s = space(&[("x", Role::State)]);
        let p = Polynomial::parse(&s, "x").unwrap();
        let mut subs = BTreeMap::new();
        subs.insert("x".to_string(), Polynomial::zero(&s));
        assert!(p.compose(&subs).unwrap().is_zero());
    }

    #[test]
    fn compose_unknown_variable() {
        let s = space(&[("x", Role::State)]);
        let p = Polynomial::parse(&s, "x").unwrap();
        let mut subs = BTreeMap::new();
        subs.insert("y".to_string(), Polynomial::zero(&s));
        assert_eq!(p.compose(&subs), Err(PolyError::UnknownVariable("y".into())));
    }

    fn random_poly(s: &Arc<VariableSpace>, deg: u32, rng: &mut ChaCha8Rng) -> Polynomial {
        let n = s.len();
        let mut terms = Vec::new();
        for _ in 0..8 {
            let mut exp = vec![0u32; n];
            let mut budget = rng.random_range(0..=deg);
            while budget > 0 {
                exp[rng.random_range(0..n)] += 1;
                budget -= 1;
            }
            terms.push((exp, rng.random_range(-2.0..2.0)));
        }
        Polynomial::from_terms(s, terms).unwrap()
    }

    #[test]
    fn composition_commutes_with_evaluation() {
        let s = space(&[("a", Role::State), ("b", Role::State), ("c", Role::State)]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_poly(&s, 3, &mut rng);
        let images: Vec<Polynomial> = (0..3).map(|_| random_poly(&s, 2, &mut rng)).collect();
        let subs: BTreeMap<String, Polynomial> = ["a", "b", "c"]
            .iter()
            .zip(&images)
            .map(|(n, q)| (n.to_string(), q.clone()))
            .collect();
        let composed = p.compose(&subs).unwrap();
        assert!(composed.degree() <= p.degree() * 2);
        for _ in 0..100 {
            let pt: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
            let inner: Vec<f64> = images.iter().map(|q| q.eval(&pt).unwrap()).collect();
            let want = p.eval(&inner).unwrap();
            let got = composed.eval(&pt).unwrap();
            assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn gaussian_moments() {
        let g = NoiseSpec::default();
        let want = [1.0, 0.0, 1.0, 0.0, 3.0, 0.0, 15.0, 0.0, 105.0];
        for (k, w) in want.iter().enumerate() {
            assert_eq!(g.moment(k as u32).unwrap(), *w, "k={k}");
        }
        let shifted = NoiseSpec::Gaussian { mean: 1.0, std: 2.0 };
        // E[X^2] = m^2 + s^2, E[X^3] = m^3 + 3 m s^2
        assert_eq!(shifted.moment(2).unwrap(), 5.0);
        assert_eq!(shifted.moment(3).unwrap(), 13.0);
        assert!(g.moment(MAX_MOMENT_DEGREE + 1).is_err());
    }

    #[test]
    fn uniform_moments() {
        let u = NoiseSpec::Uniform { lo: -1.0, hi: 1.0 };
        assert_eq!(u.moment(1).unwrap(), 0.0);
        assert!((u.moment(2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((u.moment(4).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn expectation_of_square() {
        let s = space(&[("x", Role::State), ("s", Role::Noise)]);
        let p = Polynomial::parse(&s, "(x + 0.25*s)^2").unwrap();
        let e = p.expectation_over_noise(&[NoiseSpec::default()]).unwrap();
        let reduced = e.space().clone();
        assert_eq!(e, Polynomial::parse(&reduced, "x^2 + 0.0625").unwrap());
    }

    #[test]
    fn expectation_odd_moment_vanishes() {
        let s = space(&[("x", Role::State), ("s", Role::Noise)]);
        let p = Polynomial::parse(&s, "x*s").unwrap();
        assert!(p.expectation_over_noise(&[NoiseSpec::default()]).unwrap().is_zero());
    }

    #[test]
    fn expectation_missing_noise() {
        let s = space(&[("x", Role::State), ("s", Role::Noise)]);
        let p = Polynomial::parse(&s, "x*s").unwrap();
        assert!(matches!(p.expectation_over_noise(&[]), Err(PolyError::MissingNoise(_))));
    }

    #[test]
    fn expectation_matches_monte_carlo() {
        let s = space(&[("x", Role::State), ("s", Role::Noise)]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_poly(&s, 4, &mut rng);
        let noise = NoiseSpec::default();
        let e = p.expectation_over_noise(&[noise]).unwrap();
        let closed = e.eval(&[0.7]).unwrap();
        let n = 1_000_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let v = p.eval(&[0.7, noise.sample(&mut rng)]).unwrap();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - closed).abs() <= 3.0 * se, "mc {mean} closed {closed} se {se}");
    }

    #[test]
    fn noise_free_expectation_is_identity() {
        let s = space(&[("x", Role::State), ("y", Role::State)]);
        let p = Polynomial::parse(&s, "3*x^2*y - y + 0.5").unwrap();
        let e = p.expectation_over_noise(&[]).unwrap();
        assert_eq!(e.to_json().terms, p.to_json().terms);
    }

    #[test]
    fn parse_errors_carry_position() {
        let s = space(&[("x", Role::State)]);
        match Polynomial::parse(&s, "x + y") {
            Err(PolyError::Parse { pos, .. }) => assert_eq!(pos, 4),
            other => panic!("{other:?}"),
        }
        assert!(Polynomial::parse(&s, "x^").is_err());
        assert!(Polynomial::parse(&s, "(x + 1").is_err());
        assert!(Polynomial::parse(&s, "x x").is_err());
    }

    #[test]
    fn parse_scientific_literals() {
        let s = space(&[("x", Role::State)]);
        let p = Polynomial::parse(&s, "7.07e-4*x + 2E2").unwrap();
        assert_eq!(p.eval(&[1.0]).unwrap(), 7.07e-4 + 200.0);
    }

    #[test]
    fn duplicate_variable_rejected() {
        let err = VariableSpace::from_names([("x", Role::State), ("x", Role::Noise)]);
        assert_eq!(err, Err(PolyError::DuplicateVariable("x".into())));
    }

    #[test]
    fn role_indices_are_contiguous() {
        let s = space(&[("x", Role::State), ("s", Role::Noise), ("y", Role::State), ("w", Role::InternalInput)]);
        assert_eq!(s.role_index(0), 0);
        assert_eq!(s.role_index(2), 1);
        assert_eq!(s.role_index(1), 0);
        assert_eq!(s.role_index(3), 0);
    }

    #[test]
    fn compiled_matches_tree_eval() {
        let (_, p) = room_barrier();
        let c = p.compile();
        for t in [1.0, 19.5, 50.0] {
            assert!((c.eval(&[t]) - p.eval(&[t]).unwrap()).abs() < 1e-12);
        }
    }

    fn arb_poly() -> impl Strategy<Value = (Vec<(Vec<u32>, f64)>, Vec<(Vec<u32>, f64)>, Vec<f64>)> {
        let term = (proptest::collection::vec(0u32..4, 2), -3.0f64..3.0);
        (
            proptest::collection::vec(term.clone(), 0..6),
            proptest::collection::vec(term, 0..6),
            proptest::collection::vec(-2.0f64..2.0, 2),
        )
    }

    proptest! {
        #[test]
        fn ring_laws_hold_pointwise((ta, tb, pt) in arb_poly()) {
            let s = space(&[("x", Role::State), ("y", Role::State)]);
            let a = Polynomial::from_terms(&s, ta).unwrap();
            let b = Polynomial::from_terms(&s, tb).unwrap();
            let (va, vb) = (a.eval(&pt).unwrap(), b.eval(&pt).unwrap());
            let sum = (&a + &b).eval(&pt).unwrap();
            let prod = (&a * &b).eval(&pt).unwrap();
            prop_assert!((sum - (va + vb)).abs() <= 1e-9 * (va.abs() + vb.abs()).max(1.0));
            prop_assert!((prod - va * vb).abs() <= 1e-9 * (va * vb).abs().max(1.0));
        }

        #[test]
        fn expectation_is_linear((ta, tb, _pt) in arb_poly(), a in -3.0f64..3.0) {
            let s = space(&[("x", Role::State), ("s", Role::Noise)]);
            let p = Polynomial::from_terms(&s, ta).unwrap();
            let q = Polynomial::from_terms(&s, tb).unwrap();
            let noise = [NoiseSpec::Gaussian { mean: 0.3, std: 0.7 }];
            let lhs = (&p.scale(a) + &q).expectation_over_noise(&noise).unwrap();
            let rhs = &p.expectation_over_noise(&noise).unwrap().scale(a)
                + &q.expectation_over_noise(&noise).unwrap();
            let diff = &lhs - &rhs;
            for (_, c) in diff.terms() {
                prop_assert!(c.abs() < 1e-9);
            }
        }

        #[test]
        fn display_parse_round_trip((ta, _tb, _pt) in arb_poly()) {
            let s = space(&[("x", Role::State), ("y", Role::State)]);
            let p = Polynomial::from_terms(&s, ta).unwrap();
            let back = Polynomial::parse(&s, &p.to_string()).unwrap();
            prop_assert_eq!(back, p);
        }

        #[test]
        fn json_round_trip((ta, _tb, _pt) in arb_poly()) {
            let s = space(&[("x", Role::State), ("y", Role::Noise)]);
            let p = Polynomial::from_terms(&s, ta).unwrap();
            let text = serde_json::to_string(&p.to_json()).unwrap();
            let back = Polynomial::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
