//! Finite-horizon upper bound on the probability of reaching the unsafe set.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rounding slack tolerated outside `[0, 1]` before clamping.
pub const CLAMP_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum BoundError {
    #[error("invalid bound parameters: {0}")]
    Params(String),
    #[error("bound evaluated to {0}, outside [0,1] beyond rounding")]
    OutOfRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    /// `lambda >= psi / kappa`.
    LevelAboveDrift,
    /// `lambda < psi / kappa`.
    LevelBelowDrift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyBound {
    pub gamma: f64,
    pub lambda: f64,
    pub kappa: f64,
    pub psi: f64,
    pub horizon: u64,
    pub delta: f64,
    pub branch: Branch,
}

impl SafetyBound {
    /// Lower bound on the probability of staying safe.
    pub fn safe_probability(&self) -> f64 {
        1.0 - self.delta
    }
}

/// Upper bound `delta` on leaving the `lambda` sublevel set within `horizon` steps.
pub fn safety_bound(gamma: f64, lambda: f64, kappa: f64, psi: f64, horizon: u64) -> Result<SafetyBound, BoundError> {
    let bad = |m: String| Err(BoundError::Params(m));
    if !(kappa > 0.0 && kappa < 1.0) {
        return bad(format!("kappa must lie in (0,1), got {kappa}"));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return bad(format!("lambda must be positive, got {lambda}"));
    }
    if !(gamma >= 0.0 && psi >= 0.0 && psi.is_finite()) {
        return bad(format!("gamma and psi must be non-negative, got {gamma}, {psi}"));
    }
    if !(gamma < lambda) {
        return bad(format!("gamma ({gamma}) must be below lambda ({lambda})"));
    }
    let t = horizon as f64;
    let (delta, branch) = if lambda >= psi / kappa {
        (1.0 - (1.0 - gamma / lambda) * (1.0 - psi / lambda).powf(t), Branch::LevelAboveDrift)
    } else {
        let decay = (1.0 - kappa).powf(t);
        ((gamma / lambda) * decay + psi / (kappa * lambda) * (1.0 - decay), Branch::LevelBelowDrift)
    };
    let delta = if delta < -CLAMP_TOL || delta > 1.0 + CLAMP_TOL || delta.is_nan() {
        return Err(BoundError::OutOfRange(delta));
    } else {
        delta.clamp(0.0, 1.0)
    };
    Ok(SafetyBound { gamma, lambda, kappa, psi, horizon, delta, branch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_mode_network_value() {
        let b = safety_bound(0.321, 2.3, 0.706, 1.95e-5, 100).unwrap();
        assert_eq!(b.branch, Branch::LevelAboveDrift);
        let oracle = 1.0 - (1.0 - 0.321 / 2.3) * (1.0f64 - 1.95e-5 / 2.3).powi(100);
        assert!((b.delta - oracle).abs() < 1e-14);
        assert!((b.safe_probability() - 0.86).abs() < 0.005);
    }

    #[test]
    fn room_value() {
        let b = safety_bound(0.16, 1.2, 0.99, 7.07e-4, 10).unwrap();
        assert_eq!(b.branch, Branch::LevelAboveDrift);
        let oracle = 1.0 - (1.0 - 0.16 / 1.2) * (1.0f64 - 7.07e-4 / 1.2).powi(10);
        assert!((b.delta - oracle).abs() < 1e-14);
        assert!((b.delta - 0.1384).abs() < 1e-4);
    }

    #[test]
    fn zero_levels_give_zero() {
        assert_eq!(safety_bound(0.0, 1.0, 0.5, 0.0, 50).unwrap().delta, 0.0);
    }

    #[test]
    fn second_branch_and_horizon_zero() {
        let b = safety_bound(0.02, 0.2, 0.9, 0.19, 1).unwrap();
        assert_eq!(b.branch, Branch::LevelBelowDrift);
        assert!((b.delta - (0.1 * 0.1 + 0.19 / 0.18 * 0.9)).abs() < 1e-14);
        for (g, l, k, p) in [(0.1, 0.2, 0.3, 0.5), (0.1, 2.0, 0.3, 0.01)] {
            let z = safety_bound(g, l, k, p, 0).unwrap();
            assert!((z.delta - g / l).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_is_an_error() {
        // the second branch exceeds 1 when psi / (kappa lambda) is large
        assert!(matches!(safety_bound(0.1, 0.2, 0.3, 0.5, 7), Err(BoundError::OutOfRange(_))));
    }

    #[test]
    fn tie_takes_first_branch() {
        let b = safety_bound(0.1, 1.0, 0.5, 0.5, 3).unwrap();
        assert_eq!(b.branch, Branch::LevelAboveDrift);
    }

    #[test]
    fn domain_errors() {
        assert!(safety_bound(0.1, 1.0, 1.0, 0.0, 3).is_err());
        assert!(safety_bound(1.0, 1.0, 0.5, 0.0, 3).is_err());
        assert!(safety_bound(0.1, -1.0, 0.5, 0.0, 3).is_err());
        assert!(safety_bound(-0.1, 1.0, 0.5, 0.0, 3).is_err());
    }

    proptest! {
        #[test]
        fn monotone_in_parameters(
            g in 0.0f64..0.5, l in 0.6f64..3.0, k in 0.05f64..0.95, p in 0.0f64..0.02,
            t in 0u64..200, dt in 0u64..50, dg in 0.0f64..0.05, dp in 0.0f64..0.005, dl in 0.0f64..0.5,
        ) {
            let base = safety_bound(g, l, k, p, t).unwrap();
            prop_assume!(base.branch == Branch::LevelAboveDrift);
            let tol = 1e-12;
            prop_assert!(safety_bound(g, l, k, p, t + dt).unwrap().delta >= base.delta - tol);
            prop_assert!(safety_bound(g + dg, l, k, p, t).unwrap().delta >= base.delta - tol);
            if let Ok(b) = safety_bound(g, l, k, p + dp, t) {
                prop_assert!(b.delta >= base.delta - tol);
            }
            prop_assert!(safety_bound(g, l + dl, k, p, t).unwrap().delta <= base.delta + tol);
            prop_assert!((0.0..=1.0).contains(&base.delta));
        }
    }
}
