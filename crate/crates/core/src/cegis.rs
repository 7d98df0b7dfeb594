//! Counterexample-guided synthesis of per-mode barrier certificates.
//!
//! The barrier is a polynomial template with unknown coefficients. For fixed
//! `(kappa, lambda, alpha)` every condition is linear in the coefficients and
//! in `(gamma, psi, rho)`, except for the max on the right of the decrease
//! condition, which is resolved per point by picking the currently largest
//! term. Candidates are fitted on a pool of points and falsified with
//! [`check_cbc`]; failures grow the pool.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certify::{
    check_cbc, expected_next, CbcCertificate, CertConstants, CertStatus, CertifyError, CheckReport, CheckStatus,
    Condition, PowerLaw,
};
use crate::grid::{GridConfig, PointCloud};
use crate::lp::{find_feasible, Halfspaces, LpConfig};
use crate::model::{BoxSet, Subsystem};
use crate::poly::{CompiledPoly, Polynomial};

#[derive(Debug, Error)]
pub enum CegisError {
    #[error("invalid synthesis configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Certify(#[from] CertifyError),
}

fn default_kappas() -> Vec<f64> {
    vec![0.3, 0.5, 0.7, 0.9, 0.99]
}
fn default_lambdas() -> Vec<f64> {
    vec![1.0]
}
fn default_alphas() -> Vec<f64> {
    vec![1e-4]
}
fn default_two() -> f64 {
    2.0
}
fn default_budget() -> usize {
    200
}
fn default_pool() -> usize {
    64
}
fn default_margin() -> f64 {
    1e-4
}
fn default_degree() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    #[serde(default = "default_degree")]
    pub degree: u32,
    /// Iterations per candidate.
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default = "default_kappas")]
    pub kappas: Vec<f64>,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    /// Coefficients of `alpha(s) = c s^alpha_exp`.
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_two")]
    pub alpha_exp: f64,
    #[serde(default = "default_two")]
    pub rho_exp: f64,
    /// Initial pool points per condition domain.
    #[serde(default = "default_pool")]
    pub initial_points: usize,
    /// Slack demanded on pool constraints, relative to lambda.
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grid: GridConfig,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            degree: default_degree(),
            budget: default_budget(),
            kappas: default_kappas(),
            lambdas: default_lambdas(),
            alphas: default_alphas(),
            alpha_exp: 2.0,
            rho_exp: 2.0,
            initial_points: default_pool(),
            margin: default_margin(),
            seed: 0,
            grid: GridConfig::default(),
        }
    }
}

/// Fixed outer parameters of one synthesis attempt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub kappa: f64,
    pub lambda: f64,
    pub alpha: f64,
}

/// Which right-hand term a decrease constraint is written against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Disjunct {
    Kappa,
    Rho,
    Psi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolPoint {
    pub condition: Condition,
    pub x: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub w: Vec<f64>,
    /// Iteration that added the point; initial points have `None`.
    pub added_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub candidate: usize,
    pub iteration: usize,
    pub pool_size: usize,
    /// Worst normalized violation left by the fit; positive means infeasible.
    pub fit_residual: f64,
    /// Worst checker margin per condition.
    pub margins: Vec<(Condition, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisResult {
    pub certificate: Option<CbcCertificate>,
    pub candidate: Option<Candidate>,
    pub reports: Vec<CheckReport>,
    /// Iterations of the winning candidate, or of all candidates on failure.
    pub iterations: usize,
    /// Smallest worst-case checker margin over all attempts.
    pub best_margin: f64,
    pub log: Vec<IterationLog>,
    pub pool: Vec<PoolPoint>,
}

impl SynthesisResult {
    pub fn is_success(&self) -> bool {
        self.certificate.is_some()
    }
}

/// Monomial exponents of total degree `<= degree` in `n` variables.
fn exponents(n: usize, degree: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; n];
    fn rec(i: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if i == cur.len() {
            out.push(cur.clone());
            return;
        }
        for e in 0..=left {
            cur[i] = e;
            rec(i + 1, left - e, cur, out);
        }
        cur[i] = 0;
    }
    rec(0, degree, &mut cur, &mut out);
    out.sort_by_key(|e| (e.iter().sum::<u32>(), std::cmp::Reverse(e.clone())));
    out
}

/// Template basis in coordinates normalized to `[-1, 1]` over the state set.
struct Basis {
    polys: Vec<Polynomial>,
    compiled: Vec<CompiledPoly>,
    expected: Vec<CompiledPoly>,
}

impl Basis {
    fn new(sys: &Subsystem, mode: usize, degree: u32) -> Result<Self, CegisError> {
        let hull = sys
            .state_set
            .hull()
            .ok_or_else(|| CegisError::Config("state set is empty".into()))?;
        let space = sys.space();
        let names = sys.state_names();
        let normalized: Vec<Polynomial> = names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let (lo, hi) = (hull.lo(i), hull.hi(i));
                let (c, r) = ((lo + hi) / 2.0, ((hi - lo) / 2.0).max(1e-12));
                let v = Polynomial::var(space, name).expect("state variable");
                &v.scale(1.0 / r) - &Polynomial::constant(space, c / r)
            })
            .collect();
        let mut polys = Vec::new();
        for e in exponents(names.len(), degree) {
            let mut p = Polynomial::constant(space, 1.0);
            for (u, &k) in normalized.iter().zip(&e) {
                if k > 0 {
                    p = &p * &u.pow(k);
                }
            }
            polys.push(p);
        }
        let expected = polys
            .iter()
            .map(|p| expected_next(sys, p, mode).map(|e| e.compile()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { compiled: polys.iter().map(Polynomial::compile).collect(), polys, expected })
    }

    fn len(&self) -> usize {
        self.polys.len()
    }

    fn features(&self, x: &[f64]) -> Vec<f64> {
        self.compiled.iter().map(|p| p.eval(x)).collect()
    }

    fn expected_features(&self, xw: &[f64]) -> Vec<f64> {
        self.expected.iter().map(|p| p.eval(xw)).collect()
    }

    fn barrier(&self, theta: &[f64]) -> Polynomial {
        let mut b = Polynomial::zero(self.polys[0].space());
        for (p, &t) in self.polys.iter().zip(theta) {
            if t != 0.0 {
                b = &b + &p.scale(t);
            }
        }
        b
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn validate(cfg: &SynthesisConfig) -> Result<(), CegisError> {
    let bad = |m: String| Err(CegisError::Config(m));
    if cfg.kappas.is_empty() || cfg.lambdas.is_empty() || cfg.alphas.is_empty() {
        return bad("candidate lists must be non-empty".into());
    }
    if let Some(k) = cfg.kappas.iter().find(|k| !(**k > 0.0 && **k < 1.0)) {
        return bad(format!("kappa candidates must lie in (0,1), got {k}"));
    }
    if let Some(l) = cfg.lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        return bad(format!("lambda candidates must be positive, got {l} (gamma < lambda is then unattainable)"));
    }
    if let Some(a) = cfg.alphas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return bad(format!("alpha candidates must be positive, got {a}"));
    }
    if !(cfg.alpha_exp > 0.0 && cfg.rho_exp > 0.0) {
        return bad("exponents must be positive".into());
    }
    if cfg.budget == 0 {
        return bad("budget must be at least 1".into());
    }
    Ok(())
}

fn candidates(cfg: &SynthesisConfig) -> Vec<Candidate> {
    let mut out = Vec::new();
    for &lambda in &cfg.lambdas {
        for &alpha in &cfg.alphas {
            for &kappa in &cfg.kappas {
                out.push(Candidate { index: out.len(), kappa, lambda, alpha });
            }
        }
    }
    out
}

struct Attempt {
    certificate: Option<CbcCertificate>,
    reports: Vec<CheckReport>,
    iterations: usize,
    best_margin: f64,
    log: Vec<IterationLog>,
    pool: Vec<PoolPoint>,
}

fn initial_pool(sys: &Subsystem, cfg: &SynthesisConfig) -> Vec<PoolPoint> {
    let n = sys.state_dim();
    let k = cfg.initial_points.max(1);
    let sample = |set: &BoxSet, salt: u64| PointCloud::sampled(set, k, cfg.seed ^ salt);
    let mut pool = Vec::new();
    let mut add = |cond: Condition, cloud: PointCloud| {
        for p in cloud.iter() {
            pool.push(PoolPoint { condition: cond, x: p[..n].to_vec(), w: p[n..].to_vec(), added_at: None });
        }
    };
    add(Condition::C1, sample(&sys.state_set, 1));
    add(Condition::C2, sample(&sys.init_set, 2));
    add(Condition::C3, sample(&sys.unsafe_set, 3));
    add(Condition::C4, sample(&sys.state_set.product(&sys.input_set), 4));
    pool
}

/// Row layout: `[theta..., gamma, psi, rho]`.
fn attempt(sys: &Subsystem, mode: usize, basis: &Basis, cand: Candidate, cfg: &SynthesisConfig) -> Result<Attempt, CegisError> {
    let nb = basis.len();
    let dim = nb + 3;
    let (ig, ip, ir) = (nb, nb + 1, nb + 2);
    let has_inputs = sys.input_dim() > 0;
    let alpha = PowerLaw::new(cand.alpha, cfg.alpha_exp);
    let tau = cfg.margin * cand.lambda;
    let mut nonneg = vec![false; dim];
    nonneg[ig] = true;
    nonneg[ip] = true;
    nonneg[ir] = true;
    let lp = LpConfig { seed: cfg.seed ^ (cand.index as u64).wrapping_mul(0x2545_f491_4f6c_dd1d), ..LpConfig::default() };

    let mut pool = initial_pool(sys, cfg);
    let mut disjuncts: Vec<Disjunct> = vec![Disjunct::Psi; pool.len()];
    let mut z = vec![0.0; dim];
    let mut log = Vec::new();
    let mut best_margin = f64::INFINITY;
    let mut last_reports = Vec::new();

    for it in 0..cfg.budget {
        let mut h = Halfspaces::new(dim);
        let mut row = |feat: &[f64], extra: &[(usize, f64)], b: f64| {
            let mut a = vec![0.0; dim];
            a[..nb].copy_from_slice(feat);
            for &(i, v) in extra {
                a[i] += v;
            }
            h.push(a, b);
        };
        for (pt, dj) in pool.iter().zip(&disjuncts) {
            let phi = basis.features(&pt.x);
            match pt.condition {
                Condition::C1 => {
                    let neg: Vec<f64> = phi.iter().map(|v| -v).collect();
                    let out = sys.eval_output(&pt.x);
                    row(&neg, &[], -alpha.eval(inf_norm(&out)) - tau);
                }
                Condition::C2 => row(&phi, &[(ig, -1.0)], -tau),
                Condition::C3 => {
                    let neg: Vec<f64> = phi.iter().map(|v| -v).collect();
                    row(&neg, &[], -cand.lambda - tau);
                }
                Condition::C4 => {
                    let mut xw = pt.x.clone();
                    xw.extend_from_slice(&pt.w);
                    let e = basis.expected_features(&xw);
                    match dj {
                        Disjunct::Kappa => {
                            let d: Vec<f64> = e.iter().zip(&phi).map(|(a, b)| a - cand.kappa * b).collect();
                            row(&d, &[], -tau);
                        }
                        Disjunct::Psi => row(&e, &[(ip, -1.0)], -tau),
                        Disjunct::Rho => {
                            let s = inf_norm(&pt.w).powf(cfg.rho_exp);
                            row(&e, &[(ir, -s)], -tau);
                        }
                    }
                }
            }
        }
        // levels: gamma below lambda, psi small enough for a useful bound
        let mut unit = |i: usize, b: f64| {
            let mut a = vec![0.0; dim];
            a[i] = 1.0;
            h.push(a, b);
        };
        unit(ig, cand.lambda * (1.0 - 1e-3));
        unit(ip, cand.kappa * cand.lambda);
        if !has_inputs {
            unit(ir, 0.0);
        }
        let (zn, residual) = find_feasible(&h, &nonneg, &z, cand.lambda, &lp);
        z = zn;
        if residual > 0.0 {
            log.push(IterationLog { candidate: cand.index, iteration: it, pool_size: pool.len(), fit_residual: residual, margins: vec![] });
            return Ok(Attempt { certificate: None, reports: last_reports, iterations: it + 1, best_margin, log, pool });
        }

        let constants = CertConstants {
            kappa: cand.kappa,
            gamma: z[ig],
            lambda: cand.lambda,
            psi: z[ip],
            alpha,
            rho: if has_inputs && z[ir] > 0.0 { PowerLaw::new(z[ir], cfg.rho_exp) } else { PowerLaw::ZERO },
        };
        let mut cert = CbcCertificate { mode, barrier: basis.barrier(&z[..nb]), constants, status: CertStatus::Unchecked };
        let reports = check_cbc(sys, &cert, &cfg.grid)?;
        let worst = reports.iter().filter_map(|r| r.worst_margin).fold(f64::NEG_INFINITY, f64::max);
        best_margin = best_margin.min(worst);
        log.push(IterationLog {
            candidate: cand.index,
            iteration: it,
            pool_size: pool.len(),
            fit_residual: residual,
            margins: reports.iter().map(|r| (r.condition, r.worst_margin)).collect(),
        });
        if reports.iter().all(CheckReport::passed) {
            cert.status = CertStatus::from_reports(&reports);
            return Ok(Attempt { certificate: Some(cert), reports, iterations: it + 1, best_margin, log, pool });
        }
        for r in reports.iter().filter(|r| r.status == CheckStatus::Refuted) {
            let cex = r.counterexample.as_ref().expect("refuted reports carry a point");
            pool.push(PoolPoint { condition: r.condition, x: cex.x.clone(), w: cex.w.clone(), added_at: Some(it) });
            disjuncts.push(Disjunct::Psi);
        }
        // re-select each decrease point against the currently largest term
        let b = basis.barrier(&z[..nb]).compile();
        for (pt, dj) in pool.iter().zip(disjuncts.iter_mut()) {
            if pt.condition != Condition::C4 {
                continue;
            }
            let terms = [
                (cand.kappa * b.eval(&pt.x), Disjunct::Kappa),
                (if has_inputs { z[ir] * inf_norm(&pt.w).powf(cfg.rho_exp) } else { f64::NEG_INFINITY }, Disjunct::Rho),
                (z[ip], Disjunct::Psi),
            ];
            *dj = terms.iter().fold(terms[2], |a, t| if t.0 > a.0 { *t } else { a }).1;
        }
        last_reports = reports;
    }
    Ok(Attempt { certificate: None, reports: last_reports, iterations: cfg.budget, best_margin, log, pool })
}

/// Synthesizes a certificate for one mode. Candidates run in parallel; the
/// verified candidate with the lowest index wins.
pub fn synthesize_cbc(sys: &Subsystem, mode: usize, cfg: &SynthesisConfig) -> Result<SynthesisResult, CegisError> {
    validate(cfg)?;
    if mode >= sys.mode_count() {
        return Err(CegisError::Config(format!("mode {mode} out of range")));
    }
    let basis = Basis::new(sys, mode, cfg.degree)?;
    let cands = candidates(cfg);
    let run = |c: &Candidate| attempt(sys, mode, &basis, *c, cfg);

    #[cfg(feature = "parallel")]
    let attempts: Vec<Result<Attempt, CegisError>> = {
        use rayon::prelude::*;
        // stop launching later candidates once an earlier one succeeds
        let found = std::sync::atomic::AtomicUsize::new(usize::MAX);
        cands
            .par_iter()
            .map(|c| {
                if c.index > found.load(std::sync::atomic::Ordering::Relaxed) {
                    return Ok(None);
                }
                let a = run(c)?;
                if a.certificate.is_some() {
                    found.fetch_min(c.index, std::sync::atomic::Ordering::Relaxed);
                }
                Ok(Some(a))
            })
            .collect::<Vec<Result<Option<Attempt>, CegisError>>>()
            .into_iter()
            .filter_map(|r| r.transpose())
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let attempts: Vec<Result<Attempt, CegisError>> = {
        let mut out = Vec::new();
        for c in &cands {
            let a = run(c);
            let done = matches!(&a, Ok(a) if a.certificate.is_some());
            out.push(a);
            if done {
                break;
            }
        }
        out
    };

    let mut attempts = attempts.into_iter().collect::<Result<Vec<_>, _>>()?;
    // skipped candidates were dropped, so indices are recovered from the logs
    let index_of = |a: &Attempt| a.log.first().map_or(usize::MAX, |l| l.candidate);
    attempts.sort_by_key(index_of);
    if let Some(win) = attempts.iter().position(|a| a.certificate.is_some()) {
        let a = attempts.swap_remove(win);
        let cand = cands[index_of(&a)];
        return Ok(SynthesisResult {
            certificate: a.certificate,
            candidate: Some(cand),
            reports: a.reports,
            iterations: a.iterations,
            best_margin: a.best_margin,
            log: a.log,
            pool: a.pool,
        });
    }
    let best_margin = attempts.iter().map(|a| a.best_margin).fold(f64::INFINITY, f64::min);
    let iterations = attempts.iter().map(|a| a.iterations).sum();
    let best = attempts
        .iter()
        .min_by(|a, b| a.best_margin.total_cmp(&b.best_margin))
        .map(|a| (a.pool.clone(), a.reports.clone()))
        .unwrap_or_default();
    Ok(SynthesisResult {
        certificate: None,
        candidate: None,
        reports: best.1,
        iterations,
        best_margin,
        log: attempts.into_iter().flat_map(|a| a.log).collect(),
        pool: best.0,
    })
}

/// Template coefficients of a synthesized barrier, keyed by monomial.
pub fn coefficient_table(p: &Polynomial) -> BTreeMap<String, f64> {
    let names: Vec<String> = p.space().vars().iter().map(|v| v.name.clone()).collect();
    p.terms()
        .map(|(e, c)| {
            let key = e
                .iter()
                .zip(&names)
                .filter(|(k, _)| **k > 0)
                .map(|(k, n)| if *k == 1 { n.clone() } else { format!("{n}^{k}") })
                .collect::<Vec<_>>()
                .join("*");
            (if key.is_empty() { "1".into() } else { key }, c)
        })
        .collect()
}
