//! Switching cost between per-mode barriers, the minimum dwell time it forces,
//! and the lift from per-mode certificates to an augmented one.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certify::{ApbcCertificate, CbcCertificate, CertConstants, CertStatus, CertifyError, PowerLaw};
use crate::grid::{map_points, refine_max, refine_steps, top_k, GridConfig, PointCloud};
use crate::model::BoxSet;
use crate::poly::CompiledPoly;

/// Ratios are skipped where both barriers fall below this.
pub const DEFAULT_RATIO_FLOOR: f64 = 1e-12;
/// Safety inflation applied on top of the raw grid estimate.
pub const MU_INFLATION: f64 = 1.05;

#[derive(Debug, Error)]
pub enum DwellError {
    #[error("invalid dwell parameters: {0}")]
    Params(String),
    #[error("barrier of mode {mode} is negative ({value:e}) at {x:?}")]
    NegativeBarrier { mode: usize, x: Vec<f64>, value: f64 },
    #[error("dwell time {k_d} is below the required minimum {required}")]
    DwellTooShort { k_d: u32, required: u32 },
    #[error("unsupported: {0}")]
    Capability(String),
    #[error(transparent)]
    Certify(#[from] CertifyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DwellParams {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub mu: f64,
    pub k_d: u32,
}

pub fn default_epsilon() -> f64 {
    2.0
}

fn check_kappas(kappas: &[f64]) -> Result<(), DwellError> {
    if kappas.is_empty() {
        return Err(DwellError::Params("at least one mode is required".into()));
    }
    if let Some(k) = kappas.iter().find(|k| !(**k > 0.0 && **k < 1.0)) {
        return Err(DwellError::Params(format!("mode decay rates must lie in (0,1), got {k}")));
    }
    Ok(())
}

/// Real-valued dwell bound `max_p eps ln(mu) / ln(1/kappa_p) + 1`.
pub fn dwell_bound(epsilon: f64, mu: f64, kappas: &[f64]) -> Result<f64, DwellError> {
    if !(epsilon > 1.0 && epsilon.is_finite()) {
        return Err(DwellError::Params(format!("epsilon must exceed 1, got {epsilon}")));
    }
    if !(mu >= 1.0 && mu.is_finite()) {
        return Err(DwellError::Params(format!("mu must be at least 1, got {mu}")));
    }
    check_kappas(kappas)?;
    Ok(kappas
        .iter()
        .map(|k| epsilon * mu.ln() / (1.0 / k).ln() + 1.0)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Smallest integer dwell time satisfying [`dwell_bound`] for every mode.
pub fn min_dwell_time(epsilon: f64, mu: f64, kappas: &[f64]) -> Result<u32, DwellError> {
    let raw = dwell_bound(epsilon, mu, kappas)?;
    Ok((raw - 1e-9).ceil().max(1.0) as u32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuEstimate {
    /// Raw grid-and-refinement maximum ratio, floored at 1.
    pub raw: f64,
    /// `raw` times the safety inflation.
    pub mu: f64,
    pub inflation: f64,
    /// Ordered pair `(p, q)` and point attaining `B_p / B_q = raw`.
    pub worst_pair: Option<(usize, usize)>,
    pub worst_x: Option<Vec<f64>>,
    pub points: u64,
    pub resolution: Option<f64>,
    /// Points where all barriers are below the floor.
    pub skipped: Vec<Vec<f64>>,
}

/// Grid estimate of the smallest `mu >= 1` with `B_p <= mu B_q` on `state_set`.
pub fn estimate_mu(
    barriers: &[CompiledPoly],
    state_set: &BoxSet,
    grid: &GridConfig,
    floor: f64,
) -> Result<MuEstimate, DwellError> {
    let m = barriers.len();
    if m == 0 {
        return Err(DwellError::Params("at least one mode is required".into()));
    }
    let cloud = PointCloud::over(state_set, grid.resolution, grid.max_points, grid.seed);
    let mut est = MuEstimate {
        raw: 1.0,
        mu: MU_INFLATION,
        inflation: MU_INFLATION,
        worst_pair: None,
        worst_x: None,
        points: cloud.len() as u64,
        resolution: cloud.step,
        skipped: Vec::new(),
    };
    if m == 1 || cloud.is_empty() {
        return Ok(est);
    }
    let vals: Vec<Vec<f64>> = (0..cloud.len())
        .map(|i| barriers.iter().map(|b| b.eval(cloud.point(i))).collect())
        .collect();
    for (i, v) in vals.iter().enumerate() {
        if let Some((p, &val)) = v.iter().enumerate().find(|(_, v)| **v < -floor) {
            return Err(DwellError::NegativeBarrier { mode: p, x: cloud.point(i).to_vec(), value: val });
        }
        if v.iter().all(|b| *b < floor) {
            est.skipped.push(cloud.point(i).to_vec());
        }
    }
    // largest ratio over pairs where the denominator is meaningful
    let ratio = |v: &[f64], p: usize, q: usize| -> f64 {
        if v[p] < floor && v[q] < floor {
            1.0
        } else if v[q] < floor {
            f64::INFINITY
        } else {
            v[p] / v[q]
        }
    };
    for p in 0..m {
        for q in 0..m {
            if p == q {
                continue;
            }
            let f = |x: &[f64]| {
                let v: Vec<f64> = barriers.iter().map(|b| b.eval(x)).collect();
                ratio(&v, p, q)
            };
            let values = map_points(&cloud, f);
            for &i in &top_k(&values, grid.refine_starts.max(1)) {
                let b = cloud.bounds_of(i);
                let (x, r) = refine_max(f, cloud.point(i), b, &refine_steps(b, grid.resolution), grid.refine_sweeps);
                let (x, r) = if values[i] >= r { (cloud.point(i).to_vec(), values[i]) } else { (x, r) };
                if r > est.raw {
                    est.raw = r;
                    est.worst_pair = Some((p, q));
                    est.worst_x = Some(x);
                }
            }
        }
    }
    est.mu = est.raw * MU_INFLATION;
    Ok(est)
}

/// One row of a derivation table: which constant, how it was formed, its value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Derivation {
    pub constant: String,
    pub formula: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lifted {
    pub certificate: ApbcCertificate,
    pub required_dwell: u32,
    pub derivation: Vec<Derivation>,
}

fn sorted_by_mode(certs: &[CbcCertificate]) -> Result<Vec<&CbcCertificate>, DwellError> {
    let mut v: Vec<&CbcCertificate> = certs.iter().collect();
    v.sort_by_key(|c| c.mode);
    if v.is_empty() || v.iter().enumerate().any(|(i, c)| c.mode != i) {
        return Err(DwellError::Params("need exactly one certificate per mode 0..m".into()));
    }
    Ok(v)
}

fn common_exponent(laws: &[PowerLaw], name: &str, allow_zero: bool) -> Result<f64, DwellError> {
    let exps: Vec<f64> = laws.iter().filter(|l| !(allow_zero && l.is_zero())).map(|l| l.exp).collect();
    match exps.first() {
        None => Ok(1.0),
        Some(&e) if exps.iter().all(|x| (x - e).abs() <= 1e-12 * e.abs().max(1.0)) => Ok(e),
        _ => Err(DwellError::Capability(format!("{name} exponents differ across modes: {exps:?}"))),
    }
}

/// Lifts per-mode certificates to `B(x,p,l) = kappa_p^(-l/eps) B_p(x)`.
pub fn lift_to_apbc(certs: &[CbcCertificate], params: &DwellParams) -> Result<Lifted, DwellError> {
    let certs = sorted_by_mode(certs)?;
    for c in &certs {
        c.constants.validate(false)?;
    }
    let kappas: Vec<f64> = certs.iter().map(|c| c.constants.kappa).collect();
    let eps = params.epsilon;
    let required = min_dwell_time(eps, params.mu, &kappas)?;
    if params.k_d < required {
        return Err(DwellError::DwellTooShort { k_d: params.k_d, required });
    }
    let kd = params.k_d as f64;
    let alphas: Vec<PowerLaw> = certs.iter().map(|c| c.constants.alpha).collect();
    let rhos: Vec<PowerLaw> = certs.iter().map(|c| c.constants.rho).collect();
    let alpha_exp = common_exponent(&alphas, "alpha", false)?;
    let rho_exp = common_exponent(&rhos, "rho", true)?;

    let max_over = |f: &dyn Fn(&CertConstants) -> f64| certs.iter().map(|c| f(&c.constants)).fold(f64::NEG_INFINITY, f64::max);
    let min_over = |f: &dyn Fn(&CertConstants) -> f64| certs.iter().map(|c| f(&c.constants)).fold(f64::INFINITY, f64::min);
    let gamma = max_over(&|c| c.kappa.powf(-(kd - 1.0) / eps) * c.gamma);
    let lambda = min_over(&|c| c.lambda);
    let kappa = max_over(&|c| c.kappa.powf((eps - 1.0) / eps));
    let psi = max_over(&|c| c.kappa.powf(-kd / eps) * c.psi);
    let rho_coef = max_over(&|c| c.kappa.powf(-kd / eps) * c.rho.coef);
    let alpha_coef = min_over(&|c| c.alpha.coef);

    let constants = CertConstants {
        kappa,
        gamma,
        lambda,
        psi,
        alpha: PowerLaw::new(alpha_coef, alpha_exp),
        rho: if rho_coef == 0.0 { PowerLaw::ZERO } else { PowerLaw::new(rho_coef, rho_exp) },
    };
    let row = |c: &str, f: &str, v: f64| Derivation { constant: c.into(), formula: f.into(), value: v };
    let derivation = vec![
        row("gamma", "max_p kappa_p^(-(k_d-1)/eps) * gamma_p", gamma),
        row("lambda", "min_p lambda_p", lambda),
        row("kappa", "max_p kappa_p^((eps-1)/eps)", kappa),
        row("psi", "max_p kappa_p^(-k_d/eps) * psi_p", psi),
        row("rho.coef", "max_p kappa_p^(-k_d/eps) * rho_p.coef", rho_coef),
        row("alpha.coef", "min_p alpha_p.coef", alpha_coef),
        row("k_d (required)", "ceil(max_p eps ln(mu) / ln(1/kappa_p) + 1)", required as f64),
    ];
    Ok(Lifted {
        certificate: ApbcCertificate {
            barriers: certs.iter().map(|c| c.barrier.clone()).collect(),
            mode_kappas: kappas,
            epsilon: Some(eps),
            k_d: params.k_d,
            constants,
            status: CertStatus::Unchecked,
        },
        required_dwell: required,
        derivation,
    })
}

/// Augmented certificate from a barrier shared by every mode: no counter
/// scaling and no dwell requirement.
pub fn common_barrier_apbc(certs: &[CbcCertificate]) -> Result<Lifted, DwellError> {
    let certs = sorted_by_mode(certs)?;
    if certs.iter().any(|c| c.barrier != certs[0].barrier) {
        return Err(DwellError::Params("barriers differ across modes".into()));
    }
    for c in &certs {
        c.constants.validate(false)?;
    }
    let alphas: Vec<PowerLaw> = certs.iter().map(|c| c.constants.alpha).collect();
    let rhos: Vec<PowerLaw> = certs.iter().map(|c| c.constants.rho).collect();
    let alpha_exp = common_exponent(&alphas, "alpha", false)?;
    let rho_exp = common_exponent(&rhos, "rho", true)?;
    let fold = |f: fn(&CertConstants) -> f64, max: bool| {
        let it = certs.iter().map(|c| f(&c.constants));
        if max { it.fold(f64::NEG_INFINITY, f64::max) } else { it.fold(f64::INFINITY, f64::min) }
    };
    let rho_coef = fold(|c| c.rho.coef, true);
    let constants = CertConstants {
        kappa: fold(|c| c.kappa, true),
        gamma: fold(|c| c.gamma, true),
        lambda: fold(|c| c.lambda, false),
        psi: fold(|c| c.psi, true),
        alpha: PowerLaw::new(fold(|c| c.alpha.coef, false), alpha_exp),
        rho: if rho_coef == 0.0 { PowerLaw::ZERO } else { PowerLaw::new(rho_coef, rho_exp) },
    };
    let row = |c: &str, f: &str, v: f64| Derivation { constant: c.into(), formula: f.into(), value: v };
    let derivation = vec![
        row("gamma", "max_p gamma_p", constants.gamma),
        row("lambda", "min_p lambda_p", constants.lambda),
        row("kappa", "max_p kappa_p", constants.kappa),
        row("psi", "max_p psi_p", constants.psi),
        row("rho.coef", "max_p rho_p.coef", rho_coef),
        row("alpha.coef", "min_p alpha_p.coef", constants.alpha.coef),
    ];
    Ok(Lifted {
        certificate: ApbcCertificate {
            barriers: vec![certs[0].barrier.clone(); certs.len()],
            mode_kappas: certs.iter().map(|c| c.constants.kappa).collect(),
            epsilon: None,
            k_d: 1,
            constants,
            status: CertStatus::Unchecked,
        },
        required_dwell: 1,
        derivation,
    })
}

/// One point of the dwell-time trade-off curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub epsilon: f64,
    pub k_d: u32,
    /// Decay rate of the lifted certificate.
    pub kappa: f64,
}

/// `k_d` and lifted decay rate as `epsilon` varies.
pub fn dwell_tradeoff(mu: f64, kappas: &[f64], epsilons: &[f64]) -> Result<Vec<TradeoffPoint>, DwellError> {
    epsilons
        .iter()
        .map(|&eps| {
            Ok(TradeoffPoint {
                epsilon: eps,
                k_d: min_dwell_time(eps, mu, kappas)?,
                kappa: kappas.iter().map(|k| k.powf((eps - 1.0) / eps)).fold(f64::NEG_INFINITY, f64::max),
            })
        })
        .collect()
}

pub const DEFAULT_TRADEOFF_EPSILONS: [f64; 6] = [1.25, 1.5, 2.0, 3.0, 5.0, 10.0];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModeDesc, NoiseTable, Subsystem, SubsystemDesc};
    use crate::poly::Polynomial;
    use proptest::prelude::*;

    fn scalar_sys() -> Subsystem {
        let d = SubsystemDesc {
            id: "s".into(),
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

    fn cert(sys: &Subsystem, mode: usize, b: &str, k: CertConstants) -> CbcCertificate {
        CbcCertificate::new(sys, mode, b, k).unwrap()
    }

    fn constants(kappa: f64, gamma: f64, lambda: f64, psi: f64, rho: f64) -> CertConstants {
        CertConstants {
            kappa,
            gamma,
            lambda,
            psi,
            alpha: PowerLaw::new(1e-3, 2.0),
            rho: PowerLaw::new(rho, 2.0),
        }
    }

    #[test]
    fn min_dwell_examples() {
        assert_eq!(min_dwell_time(2.0, 2.0, &[0.469, 0.498]).unwrap(), 3);
        assert_eq!(min_dwell_time(7.0, 1.0, &[0.3, 0.9]).unwrap(), 1);
        let raw = dwell_bound(2.0, 2.0, &[0.469]).unwrap();
        // high-precision value of 2 ln 2 / ln(1/0.469) + 1
        assert!((raw - 2.830_931_472_628_641).abs() < 1e-12, "{raw}");
        assert_eq!(min_dwell_time(2.0, 2.0, &[0.469]).unwrap(), 3);
        assert!(min_dwell_time(2.0, 2.0, &[1.0]).is_err());
        assert!(min_dwell_time(2.0, 2.0, &[0.0]).is_err());
    }

    #[test]
    fn lift_matches_formulas() {
        let sys = scalar_sys();
        let certs = vec![
            cert(&sys, 0, "x^2", constants(0.469, 0.15, 2.4, 5.42e-6, 2.71e-6)),
            cert(&sys, 1, "1.1*x^2", constants(0.498, 0.16, 2.3, 6.88e-6, 3.44e-6)),
        ];
        let l = lift_to_apbc(&certs, &DwellParams { epsilon: 2.0, mu: 2.0, k_d: 3 }).unwrap();
        let k = &l.certificate.constants;
        // independent recomputation
        let g = (0.15 / 0.469f64).max(0.16 / 0.498);
        assert!((k.gamma - g).abs() < 1e-15);
        assert_eq!(k.lambda, 2.3);
        assert!((k.kappa - 0.498f64.sqrt()).abs() < 1e-15);
        let psi = (5.42e-6 * 0.469f64.powf(-1.5)).max(6.88e-6 * 0.498f64.powf(-1.5));
        assert!((k.psi - psi).abs() < 1e-18);
        let rho = (2.71e-6 * 0.469f64.powf(-1.5)).max(3.44e-6 * 0.498f64.powf(-1.5));
        assert!((k.rho.coef - rho).abs() < 1e-18);
        assert_eq!(l.required_dwell, 3);
        assert!(matches!(
            lift_to_apbc(&certs, &DwellParams { epsilon: 2.0, mu: 2.0, k_d: 2 }),
            Err(DwellError::DwellTooShort { k_d: 2, required: 3 })
        ));
    }

    #[test]
    fn lift_large_epsilon_limit() {
        let sys = scalar_sys();
        let certs = vec![cert(&sys, 0, "x^2", constants(0.6, 0.1, 1.0, 0.01, 0.0))];
        let l = lift_to_apbc(&certs, &DwellParams { epsilon: 100.0, mu: 1.0, k_d: 4 }).unwrap();
        let k = &l.certificate.constants;
        assert!((k.kappa - 0.6f64.powf(0.99)).abs() < 1e-15);
        assert!((k.gamma - 0.1 * 0.6f64.powf(-0.03)).abs() < 1e-15);
        assert!(k.rho.is_zero());
    }

    #[test]
    fn mismatched_exponents_are_rejected() {
        let sys = scalar_sys();
        let mut k2 = constants(0.5, 0.1, 1.0, 0.01, 1e-3);
        k2.alpha.exp = 3.0;
        let certs = vec![cert(&sys, 0, "x^2", constants(0.5, 0.1, 1.0, 0.01, 1e-3)), cert(&sys, 1, "x^2", k2)];
        assert!(matches!(
            lift_to_apbc(&certs, &DwellParams { epsilon: 2.0, mu: 1.0, k_d: 1 }),
            Err(DwellError::Capability(_))
        ));
    }

    #[test]
    fn common_barrier_keeps_constants() {
        let sys = scalar_sys();
        let k = constants(0.5, 0.1, 1.0, 0.01, 1e-3);
        let certs = vec![cert(&sys, 0, "x^2", k.clone()), cert(&sys, 1, "x^2", k.clone())];
        let l = common_barrier_apbc(&certs).unwrap();
        assert_eq!(l.certificate.constants, k);
        assert_eq!(l.certificate.k_d, 1);
        assert_eq!(l.certificate.factor(1, 0), 1.0);
        // the lift with mu = 1 and k_d = 1 agrees on gamma
        let lifted = lift_to_apbc(&certs, &DwellParams { epsilon: 2.0, mu: 1.0, k_d: 1 }).unwrap();
        assert_eq!(lifted.certificate.constants.gamma, k.gamma);
    }

    #[test]
    fn mu_examples() {
        let sys = scalar_sys();
        let grid = GridConfig::with_step(0.01);
        let b = Polynomial::parse(sys.space(), "x^2 + 0.1").unwrap();
        let same = estimate_mu(&[b.compile(), b.compile()], &sys.state_set, &grid, DEFAULT_RATIO_FLOOR).unwrap();
        assert_eq!(same.raw, 1.0);
        let double = Polynomial::parse(sys.space(), "2*x^2 + 0.2").unwrap();
        let e = estimate_mu(&[double.compile(), b.compile()], &sys.state_set, &grid, DEFAULT_RATIO_FLOOR).unwrap();
        assert!((e.raw - 2.0).abs() < 1e-12);
        assert!((e.mu - 2.1).abs() < 1e-12);
        let single = estimate_mu(&[b.compile()], &sys.state_set, &grid, DEFAULT_RATIO_FLOOR).unwrap();
        assert_eq!(single.raw, 1.0);
        let neg = Polynomial::parse(sys.space(), "x - 0.5").unwrap();
        assert!(matches!(
            estimate_mu(&[neg.compile(), b.compile()], &sys.state_set, &grid, DEFAULT_RATIO_FLOOR),
            Err(DwellError::NegativeBarrier { .. })
        ));
    }

    #[test]
    fn common_zero_is_skipped_and_estimate_dominates() {
        let sys = scalar_sys();
        let grid = GridConfig::with_step(0.05);
        let a = Polynomial::parse(sys.space(), "x^2").unwrap().compile();
        let b = Polynomial::parse(sys.space(), "3*x^2 + x^4").unwrap().compile();
        let e = estimate_mu(&[a.clone(), b.clone()], &sys.state_set, &grid, DEFAULT_RATIO_FLOOR).unwrap();
        assert_eq!(e.skipped.len(), 1);
        for i in 0..=40 {
            let x = [-1.0 + 0.05 * i as f64];
            let (va, vb) = (a.eval(&x), b.eval(&x));
            assert!(va <= e.raw * vb + 1e-9 && vb <= e.raw * va + 1e-9);
        }
        assert!((e.raw - 4.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn lift_monotone_in_dwell(
            k1 in 0.05f64..0.95, k2 in 0.05f64..0.95,
            g1 in 0.0f64..1.0, g2 in 0.0f64..1.0,
            p1 in 0.0f64..0.1, p2 in 0.0f64..0.1,
            eps in 1.1f64..6.0, kd in 1u32..8,
        ) {
            let sys = scalar_sys();
            let certs = vec![
                cert(&sys, 0, "x^2", constants(k1, g1, 2.0, p1, 1e-4)),
                cert(&sys, 1, "x^2", constants(k2, g2, 2.5, p2, 2e-4)),
            ];
            let a = lift_to_apbc(&certs, &DwellParams { epsilon: eps, mu: 1.0, k_d: kd }).unwrap();
            let b = lift_to_apbc(&certs, &DwellParams { epsilon: eps, mu: 1.0, k_d: kd + 1 }).unwrap();
            let (a, b) = (&a.certificate.constants, &b.certificate.constants);
            prop_assert!(b.gamma >= a.gamma);
            prop_assert!(b.psi >= a.psi);
            prop_assert_eq!(a.lambda, b.lambda);
            prop_assert_eq!(a.kappa, b.kappa);
        }
    }
}
