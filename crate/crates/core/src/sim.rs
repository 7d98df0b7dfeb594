//! Monte Carlo runs of the network under a barrier-driven switching controller,
//! compared against the finite-horizon bound.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};
use thiserror::Error;

use crate::augment::{admissible_modes, check_dwell_time, next_counter};
use crate::bound::{safety_bound, SafetyBound};
use crate::certify::{AbcCertificate, AbcEval, CertifyError, UnsafeSemantics};
use crate::model::{ModelError, Network};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("certificate is not verified; pass the override to simulate anyway")]
    Unverified,
    #[error("invalid simulation input: {0}")]
    Invalid(String),
    #[error("no trajectories were retained")]
    NothingRetained,
    #[error(transparent)]
    Certify(#[from] CertifyError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub trajectories: usize,
    pub horizon: usize,
    #[serde(default)]
    pub seed: u64,
    /// Trajectories kept in full for plotting.
    #[serde(default)]
    pub retain: usize,
    /// Initial mode of every subsystem.
    #[serde(default)]
    pub initial_mode: usize,
    /// Simulate even when the certificate is not verified.
    #[serde(default)]
    pub allow_unverified: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { trajectories: 1000, horizon: 10, seed: 0, retain: 0, initial_mode: 0, allow_unverified: false }
    }
}

/// Two-sided 95% Clopper-Pearson interval for `k` successes in `n` trials.
pub fn clopper_pearson(k: u64, n: u64) -> Option<(f64, f64)> {
    if n == 0 {
        return None;
    }
    let q = 0.025;
    let lo = if k == 0 { 0.0 } else { Beta::new(k as f64, (n - k + 1) as f64).ok()?.inverse_cdf(q) };
    let hi = if k == n { 1.0 } else { Beta::new((k + 1) as f64, (n - k) as f64).ok()?.inverse_cdf(1.0 - q) };
    Some((lo, hi))
}

/// Empirical frequency with its confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frequency {
    pub count: u64,
    pub value: f64,
    pub lower95: f64,
    pub upper95: f64,
}

impl Frequency {
    fn new(count: u64, n: u64) -> Option<Self> {
        let (lower95, upper95) = clopper_pearson(count, n)?;
        Some(Self { count, value: count as f64 / n as f64, lower95, upper95 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetainedTrajectory {
    pub index: usize,
    /// `states[k][i]`.
    pub states: Vec<Vec<Vec<f64>>>,
    pub modes: Vec<Vec<usize>>,
    pub counters: Vec<Vec<u32>>,
    pub barrier: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub trajectories: usize,
    pub horizon: usize,
    pub seed: u64,
    pub subsystems: usize,
    pub lambda: f64,
    pub semantics: UnsafeSemantics,
    /// Trajectories with `sup_k B >= lambda`.
    pub exceedances: u64,
    /// Trajectories that entered the unsafe set.
    pub entered_unsafe: u64,
    /// `None` when no trajectories were run.
    pub exceedance_frequency: Option<Frequency>,
    pub unsafe_frequency: Option<Frequency>,
    pub bound: Option<SafetyBound>,
    /// Upper confidence limit of the exceedance frequency does not exceed delta.
    pub bound_respected: Option<bool>,
    /// Steps where the chosen mode failed the decrease inequality.
    pub controller_warnings: u64,
    /// Switching signals failing the dwell-time test; zero by construction.
    pub dwell_violations: u64,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub retained: Vec<RetainedTrajectory>,
}

/// Picks the next mode of each subsystem: hold while the dwell counter runs,
/// then the mode whose own dynamics minimize the expected next barrier value.
#[derive(Debug, Clone, Copy, Default)]
pub struct Controller;

impl Controller {
    /// Returns the requested mode and whether the decrease inequality holds for it.
    fn choose(&self, ev: &AbcEval<'_>, cert: &AbcCertificate, i: usize, xw: &[f64], mode: usize, counter: u32) -> (usize, bool) {
        let comp = ev.component(i);
        let m = comp.mode_count();
        let adm = admissible_modes(mode, counter, comp.k_d, m);
        let mut best = (f64::INFINITY, mode);
        if adm.len() > 1 {
            for q in adm {
                let l2 = next_counter(mode, counter, q, comp.k_d).expect("admissible");
                let score = comp.factors[q][l2 as usize] * comp.next[q][q].eval(xw);
                if score < best.0 {
                    best = (score, q);
                }
            }
        } else {
            best.1 = mode;
        }
        let q = best.1;
        let c = &cert.components[i].constants;
        let n = xw.len() - ev.local_input_dim(i);
        let lhs = comp.expected(xw, mode, counter, q);
        let w_norm = xw[n..].iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let rhs = (c.kappa * comp.value(&xw[..n], mode, counter)).max(c.rho.eval(w_norm)).max(c.psi);
        (q, lhs <= rhs + 1e-9)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for one `(trajectory, subsystem, step)` triple.
pub fn stream(seed: u64, trajectory: u64, subsystem: u64, step: u64) -> ChaCha8Rng {
    let h = splitmix(splitmix(splitmix(splitmix(seed) ^ trajectory) ^ subsystem) ^ step);
    ChaCha8Rng::seed_from_u64(h)
}

const INIT_STEP: u64 = u64::MAX;

struct Outcome {
    exceeded: bool,
    unsafe_hit: bool,
    warnings: u64,
    dwell_violations: u64,
    retained: Option<RetainedTrajectory>,
}

fn in_unsafe(net: &Network, states: &[Vec<f64>], semantics: UnsafeSemantics) -> bool {
    let mut hits = net.subsystems.iter().zip(states).map(|(s, x)| s.unsafe_set.contains(x));
    match semantics {
        UnsafeSemantics::Union => hits.any(|h| h),
        UnsafeSemantics::Product => hits.all(|h| h),
    }
}

fn run_one(
    net: &Network,
    ev: &AbcEval<'_>,
    cert: &AbcCertificate,
    cfg: &SimConfig,
    t: usize,
) -> Outcome {
    let nsub = net.len();
    let ctl = Controller;
    let mut states: Vec<Vec<f64>> = (0..nsub)
        .map(|i| {
            let mut rng = stream(cfg.seed, t as u64, i as u64, INIT_STEP);
            net.subsystems[i].init_set.sample(&mut rng).expect("non-empty initial set")
        })
        .collect();
    let mut modes = vec![cfg.initial_mode; nsub];
    let mut counters = vec![0u32; nsub];
    let keep = t < cfg.retain;
    let mut signals: Vec<Vec<usize>> = vec![vec![cfg.initial_mode]; nsub];
    let mut joint: Vec<f64> = states.concat();
    let mut sup = ev.value(&joint, &modes, &counters);
    let mut unsafe_hit = in_unsafe(net, &states, cert.semantics);
    let mut warnings = 0;
    let mut rec = keep.then(|| RetainedTrajectory {
        index: t,
        states: vec![states.clone()],
        modes: vec![modes.clone()],
        counters: vec![counters.clone()],
        barrier: vec![sup],
    });
    let mut noise = Vec::new();
    for k in 0..cfg.horizon {
        let mut next_states = Vec::with_capacity(nsub);
        let mut next_modes = modes.clone();
        let mut next_counters = counters.clone();
        for i in 0..nsub {
            let sys = &net.subsystems[i];
            let xw = ev.local_xw(&joint, i);
            let (q, ok) = ctl.choose(ev, cert, i, &xw, modes[i], counters[i]);
            if !ok {
                warnings += 1;
            }
            let mut rng = stream(cfg.seed, t as u64, i as u64, k as u64);
            noise.clear();
            noise.extend(sys.noise.iter().map(|s| s.sample(&mut rng)));
            let n = sys.state_dim();
            next_states.push(sys.step(modes[i], &xw[..n], &xw[n..], &noise));
            next_counters[i] = next_counter(modes[i], counters[i], q, ev.component(i).k_d).expect("admissible");
            next_modes[i] = q;
            signals[i].push(q);
        }
        states = next_states;
        modes = next_modes;
        counters = next_counters;
        joint = states.concat();
        let b = ev.value(&joint, &modes, &counters);
        sup = sup.max(b);
        unsafe_hit |= in_unsafe(net, &states, cert.semantics);
        if let Some(r) = rec.as_mut() {
            r.states.push(states.clone());
            r.modes.push(modes.clone());
            r.counters.push(counters.clone());
            r.barrier.push(b);
        }
    }
    let dwell_violations = signals
        .iter()
        .zip(&cert.components)
        .filter(|(s, c)| !check_dwell_time(s, c.k_d))
        .count() as u64;
    Outcome { exceeded: sup >= cert.constants.lambda, unsafe_hit, warnings, dwell_violations, retained: rec }
}

/// Runs `cfg.trajectories` independent closed-loop trajectories. The report
/// does not depend on the number of worker threads.
pub fn run_monte_carlo(net: &Network, cert: &AbcCertificate, cfg: &SimConfig) -> Result<SimReport, SimError> {
    let mut warnings = Vec::new();
    if !cert.status.is_verified() {
        if !cfg.allow_unverified {
            return Err(SimError::Unverified);
        }
        warnings.push("certificate is not verified; the bound comparison is informational only".to_string());
    }
    let ev = AbcEval::new(net, cert)?;
    for s in &net.subsystems {
        if cfg.initial_mode >= s.mode_count() {
            return Err(SimError::Invalid(format!("initial mode {} out of range for `{}`", cfg.initial_mode, s.id)));
        }
        if s.init_set.is_empty() {
            return Err(SimError::Invalid(format!("initial set of `{}` is empty", s.id)));
        }
    }
    let one = |t: usize| run_one(net, &ev, cert, cfg, t);
    #[cfg(feature = "parallel")]
    let outcomes: Vec<Outcome> = {
        use rayon::prelude::*;
        (0..cfg.trajectories).into_par_iter().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<Outcome> = (0..cfg.trajectories).map(one).collect();

    let n = cfg.trajectories as u64;
    let exceedances = outcomes.iter().filter(|o| o.exceeded).count() as u64;
    let entered_unsafe = outcomes.iter().filter(|o| o.unsafe_hit).count() as u64;
    let controller_warnings = outcomes.iter().map(|o| o.warnings).sum();
    let dwell_violations = outcomes.iter().map(|o| o.dwell_violations).sum();
    let k = &cert.constants;
    let bound = match safety_bound(k.gamma, k.lambda, k.kappa, k.psi, cfg.horizon as u64) {
        Ok(b) => Some(b),
        Err(e) => {
            warnings.push(format!("no bound: {e}"));
            None
        }
    };
    let exceedance_frequency = Frequency::new(exceedances, n);
    let bound_respected = match (&bound, &exceedance_frequency) {
        (Some(b), Some(f)) => Some(f.upper95 <= b.delta),
        _ => None,
    };
    if controller_warnings > 0 {
        warnings.push(format!("{controller_warnings} controller steps violated the decrease inequality"));
    }
    Ok(SimReport {
        trajectories: cfg.trajectories,
        horizon: cfg.horizon,
        seed: cfg.seed,
        subsystems: net.len(),
        lambda: k.lambda,
        semantics: cert.semantics,
        exceedances,
        entered_unsafe,
        exceedance_frequency,
        unsafe_frequency: Frequency::new(entered_unsafe, n),
        bound,
        bound_respected,
        controller_warnings,
        dwell_violations,
        warnings,
        retained: outcomes.into_iter().filter_map(|o| o.retained).collect(),
    })
}

/// Columns `k, r0, r1, ...`: one state component of one subsystem across the
/// retained realizations.
pub fn plot_data(report: &SimReport, subsystem: usize, component: usize) -> Result<String, SimError> {
    if report.retained.is_empty() {
        return Err(SimError::NothingRetained);
    }
    if subsystem >= report.subsystems {
        return Err(SimError::Invalid(format!("subsystem {subsystem} out of range")));
    }
    let mut out = String::from("k");
    for r in &report.retained {
        out.push_str(&format!(",r{}", r.index));
    }
    out.push('\n');
    for k in 0..=report.horizon {
        out.push_str(&k.to_string());
        for r in &report.retained {
            let v = r.states[k][subsystem]
                .get(component)
                .ok_or_else(|| SimError::Invalid(format!("state component {component} out of range")))?;
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Full dump of the retained trajectories: `trajectory,k,subsystem,x0..,p,l`,
/// preceded by a `#` line carrying the run configuration as JSON.
pub fn trajectory_csv(report: &SimReport, ids: &[String]) -> Result<String, SimError> {
    if report.retained.is_empty() {
        return Err(SimError::NothingRetained);
    }
    let header = serde_json::json!({
        "schema_version": 1,
        "seed": report.seed,
        "trajectories": report.trajectories,
        "horizon": report.horizon,
        "retained": report.retained.len(),
    });
    let width = report.retained[0].states[0].iter().map(Vec::len).max().unwrap_or(0);
    let mut out = format!("# {header}\ntrajectory,k,subsystem");
    for d in 0..width {
        out.push_str(&format!(",x{d}"));
    }
    out.push_str(",p,l\n");
    for r in &report.retained {
        for (k, states) in r.states.iter().enumerate() {
            for (i, x) in states.iter().enumerate() {
                let id = ids.get(i).cloned().unwrap_or_else(|| i.to_string());
                out.push_str(&format!("{},{k},{id}", r.index));
                for d in 0..width {
                    match x.get(d) {
                        Some(v) => out.push_str(&format!(",{v}")),
                        None => out.push(','),
                    }
                }
                out.push_str(&format!(",{},{}\n", r.modes[k][i], r.counters[k][i]));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certify::{parse_barrier, ApbcCertificate, CertConstants, CertStatus, PowerLaw};
    use crate::model::{BoxSet, ModeDesc, NoiseTable, Subsystem, SubsystemDesc};

    fn scalar(id: &str) -> Subsystem {
        let d = SubsystemDesc {
            id: id.into(),
            states: vec!["x".into()],
            inputs: vec![],
            noise: vec!["n".into()],
            modes: vec![
                ModeDesc { label: None, dynamics: vec!["0.5*x + 0.1*n".into()] },
                ModeDesc { label: None, dynamics: vec!["0.4*x + 0.1*n".into()] },
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

    fn cert(sys: &Subsystem, barrier: &str, gamma: f64, psi: f64, k_d: u32) -> AbcCertificate {
        let k = CertConstants {
            kappa: 0.5,
            gamma,
            lambda: 0.64,
            psi,
            alpha: PowerLaw::new(0.5, 2.0),
            rho: PowerLaw::ZERO,
        };
        let comp = ApbcCertificate {
            barriers: vec![parse_barrier(sys, barrier).unwrap(); 2],
            mode_kappas: vec![0.5, 0.5],
            epsilon: Some(2.0),
            k_d,
            constants: k.clone(),
            status: CertStatus::Unchecked,
        };
        AbcCertificate {
            components: vec![comp],
            scalings: vec![1.0],
            constants: k,
            semantics: UnsafeSemantics::Union,
            status: CertStatus::Verified { resolution: Some(0.01) },
        }
    }

    #[test]
    fn clopper_pearson_reference_values() {
        // k = 0: upper limit 1 - 0.025^(1/n)
        let (lo, hi) = clopper_pearson(0, 100).unwrap();
        assert_eq!(lo, 0.0);
        assert!((hi - (1.0 - 0.025f64.powf(0.01))).abs() < 1e-9);
        // k = n mirrors k = 0
        let (lo, hi) = clopper_pearson(100, 100).unwrap();
        assert_eq!(hi, 1.0);
        assert!((lo - 0.025f64.powf(0.01)).abs() < 1e-9);
        assert!(clopper_pearson(0, 0).is_none());
    }

    #[test]
    fn zero_barrier_never_exceeds() {
        let sys = scalar("a");
        let net = Network { subsystems: vec![sys.clone()], edges: vec![] };
        let c = cert(&sys, "0", 0.0, 0.0, 1);
        let r = run_monte_carlo(&net, &c, &SimConfig { trajectories: 200, horizon: 20, ..Default::default() }).unwrap();
        assert_eq!(r.exceedances, 0);
        assert_eq!(r.exceedance_frequency.unwrap().value, 0.0);
    }

    #[test]
    fn empty_run_has_no_frequencies() {
        let sys = scalar("a");
        let net = Network { subsystems: vec![sys.clone()], edges: vec![] };
        let c = cert(&sys, "x^2", 0.01, 0.02, 2);
        let r = run_monte_carlo(&net, &c, &SimConfig { trajectories: 0, ..Default::default() }).unwrap();
        assert!(r.exceedance_frequency.is_none() && r.unsafe_frequency.is_none());
        assert!(r.bound_respected.is_none());
    }

    #[test]
    fn unverified_is_refused_without_override() {
        let sys = scalar("a");
        let net = Network { subsystems: vec![sys.clone()], edges: vec![] };
        let mut c = cert(&sys, "x^2", 0.01, 0.02, 2);
        c.status = CertStatus::Unchecked;
        assert!(matches!(run_monte_carlo(&net, &c, &SimConfig::default()), Err(SimError::Unverified)));
        let cfg = SimConfig { trajectories: 10, allow_unverified: true, ..Default::default() };
        assert!(!run_monte_carlo(&net, &c, &cfg).unwrap().warnings.is_empty());
    }

    #[test]
    fn reproducible_and_dwell_compliant() {
        let sys = scalar("a");
        let net = Network { subsystems: vec![sys.clone()], edges: vec![] };
        let c = cert(&sys, "x^2 + 0.01*x", 0.02, 0.03, 3);
        let cfg = SimConfig { trajectories: 300, horizon: 30, seed: 9, retain: 5, ..Default::default() };
        let a = run_monte_carlo(&net, &c, &cfg).unwrap();
        let b = run_monte_carlo(&net, &c, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dwell_violations, 0);
        for r in &a.retained {
            let sig: Vec<usize> = r.modes.iter().map(|m| m[0]).collect();
            assert!(check_dwell_time(&sig, 3));
        }
        let csv = plot_data(&a, 0, 0).unwrap();
        assert_eq!(csv.lines().count(), 32);
        assert_eq!(csv.lines().next().unwrap(), "k,r0,r1,r2,r3,r4");
        let dump = trajectory_csv(&a, &["a".into()]).unwrap();
        assert!(dump.starts_with("# {"));
        let none = run_monte_carlo(&net, &c, &SimConfig { retain: 0, ..cfg }).unwrap();
        assert!(matches!(plot_data(&none, 0, 0), Err(SimError::NothingRetained)));
    }
}
