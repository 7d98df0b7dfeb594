//! Augmented execution: state, active mode and a dwell counter capped at `k_d - 1`.
//!
//! The vector field applied at a step is the one of the mode active at that
//! step; a requested switch takes effect on the following step.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{InputSource, Network, Subsystem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("switch from mode {from} to {to} requested with counter {counter} < {max}")]
    DwellViolation { from: usize, to: usize, counter: u32, max: u32 },
    #[error("mode {0} out of range")]
    BadMode(usize),
    #[error("counter {counter} outside [0, {max}]")]
    BadCounter { counter: u32, max: u32 },
    #[error("dwell time must be at least 1")]
    BadDwell,
    #[error("switching signal violates the dwell time {0}")]
    InfeasibleSignal(u32),
    #[error("{0}")]
    Length(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub x: Vec<f64>,
    pub mode: usize,
    pub counter: u32,
}

impl AugmentedState {
    /// Initial state: counter starts at zero.
    pub fn initial(x: Vec<f64>, mode: usize) -> Self {
        Self { x, mode, counter: 0 }
    }
}

/// Counter update for a requested next mode. Returns the next counter.
pub fn next_counter(mode: usize, counter: u32, requested: usize, k_d: u32) -> Result<u32, AugmentError> {
    if k_d == 0 {
        return Err(AugmentError::BadDwell);
    }
    let top = k_d - 1;
    if counter > top {
        return Err(AugmentError::BadCounter { counter, max: top });
    }
    if counter < top {
        if requested != mode {
            return Err(AugmentError::DwellViolation { from: mode, to: requested, counter, max: top });
        }
        Ok(counter + 1)
    } else if requested == mode {
        Ok(top)
    } else {
        Ok(0)
    }
}

/// Modes that may be requested from `(mode, counter)`.
pub fn admissible_modes(mode: usize, counter: u32, k_d: u32, mode_count: usize) -> std::ops::Range<usize> {
    if counter + 1 < k_d {
        mode..mode + 1
    } else {
        0..mode_count
    }
}

/// One augmented step of a single subsystem with internal input `w`.
pub fn augmented_step(
    sys: &Subsystem,
    k_d: u32,
    s: &AugmentedState,
    requested: usize,
    w: &[f64],
    noise: &[f64],
) -> Result<AugmentedState, AugmentError> {
    if s.mode >= sys.mode_count() {
        return Err(AugmentError::BadMode(s.mode));
    }
    if requested >= sys.mode_count() {
        return Err(AugmentError::BadMode(requested));
    }
    let counter = next_counter(s.mode, s.counter, requested, k_d)?;
    Ok(AugmentedState { x: sys.step(s.mode, &s.x, w, noise), mode: requested, counter })
}

/// One synchronous augmented step of a network; inputs are wired from the
/// pre-step states.
pub fn network_step(
    net: &Network,
    wiring: &[Vec<InputSource>],
    k_d: &[u32],
    states: &[AugmentedState],
    requested: &[usize],
    noise: &[Vec<f64>],
) -> Result<Vec<AugmentedState>, AugmentError> {
    let xs: Vec<Vec<f64>> = states.iter().map(|s| s.x.clone()).collect();
    (0..net.len())
        .map(|i| {
            let w = net.inputs_for(wiring, i, &xs);
            augmented_step(&net.subsystems[i], k_d[i], &states[i], requested[i], &w, &noise[i])
        })
        .collect()
}

/// Step indices `k >= 1` where `signal[k] != signal[k-1]`.
pub fn switch_instants(signal: &[usize]) -> Vec<usize> {
    (1..signal.len()).filter(|&k| signal[k] != signal[k - 1]).collect()
}

/// True iff the first switch happens at step `>= k_d` and consecutive switches
/// are at least `k_d` steps apart.
pub fn check_dwell_time(signal: &[usize], k_d: u32) -> bool {
    let k_d = k_d as usize;
    let mut last = 0usize;
    for s in switch_instants(signal) {
        if s - last < k_d {
            return false;
        }
        last = s;
    }
    true
}

/// Runs the plain switched recursion and the augmented one side by side on
/// identical inputs and noise, and compares the external outputs bit for bit.
///
/// `signal` has length `horizon + 1`; `inputs` and `noise` have length `horizon`.
pub fn equivalence_check(
    sys: &Subsystem,
    k_d: u32,
    x0: &[f64],
    signal: &[usize],
    inputs: &[Vec<f64>],
    noise: &[Vec<f64>],
) -> Result<bool, AugmentError> {
    if !check_dwell_time(signal, k_d) {
        return Err(AugmentError::InfeasibleSignal(k_d));
    }
    let horizon = signal.len().saturating_sub(1);
    if inputs.len() < horizon || noise.len() < horizon {
        return Err(AugmentError::Length("inputs and noise must cover the horizon".into()));
    }
    let Some(&p0) = signal.first() else {
        return Ok(true);
    };
    let mut x = x0.to_vec();
    let mut aug = AugmentedState::initial(x0.to_vec(), p0);
    if sys.eval_output(&x) != sys.eval_output(&aug.x) {
        return Ok(false);
    }
    for k in 0..horizon {
        x = sys.step(signal[k], &x, &inputs[k], &noise[k]);
        aug = augmented_step(sys, k_d, &aug, signal[k + 1], &inputs[k], &noise[k])?;
        if sys.eval_output(&x) != sys.eval_output(&aug.x) || aug.mode != signal[k + 1] {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoxSet, ModeDesc, NoiseTable, SubsystemDesc};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_mode_scalar(a: f64, b: f64) -> Subsystem {
        let d = SubsystemDesc {
            id: "s".into(),
            states: vec!["x".into()],
            inputs: vec![],
            noise: vec!["n".into()],
            modes: vec![
                ModeDesc { label: None, dynamics: vec![format!("{a}*x + 0.1*n")] },
                ModeDesc { label: None, dynamics: vec![format!("{b}*x - 0.3 + 0.1*n")] },
            ],
            output: None,
            outputs: Default::default(),
            state_set: BoxSet::single(vec![[-1.0, 1.0]]),
            init_set: BoxSet::single(vec![[-0.1, 0.1]]),
            unsafe_set: BoxSet::default(),
            input_set: None,
        };
        Subsystem::from_desc(&d, &NoiseTable::default()).unwrap()
    }

    #[test]
    fn counter_scenarios() {
        let sys = two_mode_scalar(0.5, 1.2);
        let s = AugmentedState { x: vec![0.2], mode: 0, counter: 0 };
        let n = augmented_step(&sys, 3, &s, 0, &[], &[0.0]).unwrap();
        assert_eq!((n.mode, n.counter), (0, 1));
        let s = AugmentedState { x: vec![0.2], mode: 0, counter: 2 };
        let n = augmented_step(&sys, 3, &s, 1, &[], &[0.0]).unwrap();
        assert_eq!((n.mode, n.counter), (1, 0));
        // dynamics of the current mode, not the requested one
        assert_eq!(n.x, vec![0.5 * 0.2]);
        let n = augmented_step(&sys, 3, &s, 0, &[], &[0.0]).unwrap();
        assert_eq!((n.mode, n.counter), (0, 2));
        let s = AugmentedState { x: vec![0.2], mode: 0, counter: 1 };
        assert!(matches!(
            augmented_step(&sys, 3, &s, 1, &[], &[0.0]),
            Err(AugmentError::DwellViolation { .. })
        ));
    }

    #[test]
    fn dwell_time_examples() {
        assert!(check_dwell_time(&[1, 1, 1, 2, 2, 2, 1], 3));
        assert!(!check_dwell_time(&[1, 2], 2));
        assert!(check_dwell_time(&[4; 9], 5));
        assert!(check_dwell_time(&[], 3));
        assert!(!check_dwell_time(&[1, 1, 1, 2, 2, 1], 3));
    }

    #[test]
    fn constant_signal_is_equivalent() {
        let sys = two_mode_scalar(0.5, 1.2);
        let signal = vec![1; 21];
        let noise: Vec<Vec<f64>> = (0..20).map(|k| vec![k as f64 * 0.01]).collect();
        let inputs = vec![vec![]; 20];
        assert!(equivalence_check(&sys, 4, &[0.05], &signal, &inputs, &noise).unwrap());
    }

    #[test]
    fn infeasible_signal_is_rejected() {
        let sys = two_mode_scalar(0.5, 1.2);
        let err = equivalence_check(&sys, 3, &[0.0], &[0, 1, 1], &[vec![], vec![]], &[vec![0.0], vec![0.0]]);
        assert_eq!(err, Err(AugmentError::InfeasibleSignal(3)));
    }

    /// Random dwell-feasible signal of length `len`.
    fn feasible_signal(rng: &mut ChaCha8Rng, len: usize, k_d: u32, modes: usize) -> Vec<usize> {
        let mut sig = Vec::with_capacity(len);
        let mut p = rng.random_range(0..modes);
        let mut since = 0u32;
        for _ in 0..len {
            if since >= k_d && rng.random_bool(0.3) {
                p = (p + 1 + rng.random_range(0..modes - 1)) % modes;
                since = 0;
            }
            sig.push(p);
            since += 1;
        }
        sig
    }

    #[test]
    fn dual_simulation_on_random_signals() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let sys = two_mode_scalar(rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9));
        for _ in 0..100 {
            let k_d = rng.random_range(1..5);
            let signal = feasible_signal(&mut rng, 51, k_d, 2);
            assert!(check_dwell_time(&signal, k_d));
            let noise: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random_range(-3.0..3.0)]).collect();
            let x0 = [rng.random_range(-0.1..0.1)];
            assert!(equivalence_check(&sys, k_d, &x0, &signal, &vec![vec![]; 50], &noise).unwrap());
        }
    }

    proptest! {
        #[test]
        fn counter_stays_bounded_and_signals_comply(
            k_d in 1u32..6,
            requests in proptest::collection::vec(0usize..3, 1..80),
        ) {
            // requests are clipped to what the scenarios allow, then replayed
            let mut mode = 0usize;
            let mut counter = 0u32;
            let mut signal = vec![mode];
            for r in requests {
                let adm = admissible_modes(mode, counter, k_d, 3);
                let req = if adm.contains(&r) { r } else { mode };
                counter = next_counter(mode, counter, req, k_d).unwrap();
                prop_assert!(counter < k_d);
                mode = req;
                signal.push(mode);
            }
            prop_assert!(check_dwell_time(&signal, k_d));
        }
    }
}
