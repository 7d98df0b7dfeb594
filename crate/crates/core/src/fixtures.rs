//! Ring networks used as worked examples, with their published certificates.
//!
//! `room-temp` is a ring of rooms heated by a boiler whose valve has seven
//! positions; every room exchanges heat with both neighbours. `two-mode` is a
//! cascade ring of planar affine systems with two modes that admit no common
//! barrier, so the dwell-time lift is needed.
//!
//! Modes are 0-based: mode `m` of `room-temp` opens the valve to `0.1 m`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certify::{CbcCertificate, CbcDesc, CertConstants, CertStatus, CertifyError, PowerLaw};
use crate::dwell::DwellParams;
use crate::model::{BoxSet, Edge, ModeDesc, Network, NetworkDesc, NoiseTable, SubsystemDesc};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("a ring needs at least 2 subsystems, got {0}")]
    TooSmall(usize),
    #[error("unknown fixture `{0}` (expected room-temp or two-mode)")]
    Unknown(String),
    #[error(transparent)]
    Certify(#[from] CertifyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixtureKind {
    RoomTemp,
    TwoMode,
}

impl FromStr for FixtureKind {
    type Err = FixtureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "room-temp" => Ok(Self::RoomTemp),
            "two-mode" => Ok(Self::TwoMode),
            other => Err(FixtureError::Unknown(other.into())),
        }
    }
}

impl fmt::Display for FixtureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RoomTemp => "room-temp",
            Self::TwoMode => "two-mode",
        })
    }
}

/// Published safety claim: the network stays safe for `horizon` steps with
/// probability at least `safe_probability`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub horizon: u64,
    pub safe_probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub kind: FixtureKind,
    pub size: usize,
    pub network: NetworkDesc,
    /// Per-mode certificates shared by every subsystem (the ring is symmetric).
    pub certificates: Vec<CbcDesc>,
    /// `None` when all modes share one barrier.
    pub dwell: Option<DwellParams>,
    pub claim: Claim,
}

impl Fixture {
    pub fn build(kind: FixtureKind, n: usize) -> Result<Self, FixtureError> {
        match kind {
            FixtureKind::RoomTemp => room_temp(n),
            FixtureKind::TwoMode => two_mode(n),
        }
    }

    pub fn network(&self) -> Network {
        Network::from_desc(&self.network).expect("fixture networks are well formed")
    }

    /// Parsed per-mode certificates for subsystem `i` of `net`.
    pub fn certificates_for(&self, net: &Network, i: usize) -> Result<Vec<CbcCertificate>, FixtureError> {
        let sys = &net.subsystems[i];
        Ok(self
            .certificates
            .iter()
            .map(|d| CbcCertificate::from_desc(sys, d))
            .collect::<Result<Vec<_>, _>>()?)
    }
}

fn ring_check(n: usize) -> Result<(), FixtureError> {
    if n < 2 {
        return Err(FixtureError::TooSmall(n));
    }
    Ok(())
}

fn quad(coef: f64) -> PowerLaw {
    PowerLaw::new(coef, 2.0)
}

pub const ROOM_MODES: usize = 7;

/// Published quartic barrier for every room and valve position.
pub const ROOM_BARRIER: &str = "-0.00012*T^4 + 0.01045*T^3 - 0.19932*T^2 - 0.64538*T + 28.68175";

pub fn room_constants() -> CertConstants {
    CertConstants { kappa: 0.99, gamma: 0.16, lambda: 1.2, psi: 7.07e-4, alpha: quad(4.5e-5), rho: quad(9.3e-6) }
}

fn room_dynamics(mode: usize) -> String {
    // heat exchange 0.005, to outside 0.022 (at -1), heater 0.05 (at 50)
    let valve = 0.1 * mode as f64;
    format!(
        "(1 - 2*0.005 - 0.022 - 0.05*{valve})*T + 0.05*50*{valve} + 0.005*(wl + wr) + 0.022*(-1) + 0.25*n"
    )
}

fn room_id(i: usize) -> String {
    format!("room{}", i + 1)
}

/// Ring of `n` rooms; `wl`/`wr` read the left and right neighbour.
pub fn room_temp(n: usize) -> Result<Fixture, FixtureError> {
    ring_check(n)?;
    let modes: Vec<ModeDesc> = (0..ROOM_MODES)
        .map(|m| ModeDesc { label: Some(format!("valve{m}")), dynamics: vec![room_dynamics(m)] })
        .collect();
    let mut subsystems = Vec::with_capacity(n);
    let mut edges = Vec::new();
    for i in 0..n {
        let left = (i + n - 1) % n;
        let right = (i + 1) % n;
        let mut outputs = std::collections::BTreeMap::new();
        if n == 2 {
            // both neighbours are the same room
            outputs.insert(room_id(right), vec!["T".to_string(), "T".to_string()]);
            edges.push(Edge { from: room_id(left), to: room_id(i), inputs: vec!["wl".into(), "wr".into()] });
        } else {
            outputs.insert(room_id(left), vec!["T".to_string()]);
            outputs.insert(room_id(right), vec!["T".to_string()]);
            edges.push(Edge { from: room_id(left), to: room_id(i), inputs: vec!["wl".into()] });
            edges.push(Edge { from: room_id(right), to: room_id(i), inputs: vec!["wr".into()] });
        }
        subsystems.push(SubsystemDesc {
            id: room_id(i),
            states: vec!["T".into()],
            inputs: vec!["wl".into(), "wr".into()],
            noise: vec!["n".into()],
            modes: modes.clone(),
            output: None,
            outputs,
            state_set: BoxSet::single(vec![[1.0, 50.0]]),
            init_set: BoxSet::single(vec![[19.0, 21.0]]),
            unsafe_set: BoxSet::union(vec![vec![[1.0, 17.0]], vec![[23.0, 50.0]]]),
            input_set: Some(BoxSet::single(vec![[1.0, 50.0], [1.0, 50.0]])),
        });
    }
    let certificates = (0..ROOM_MODES)
        .map(|m| CbcDesc {
            mode: m,
            barrier: ROOM_BARRIER.into(),
            constants: room_constants(),
            status: CertStatus::Unchecked,
        })
        .collect();
    Ok(Fixture {
        kind: FixtureKind::RoomTemp,
        size: n,
        network: NetworkDesc { subsystems, edges, noise: NoiseTable::default() },
        certificates,
        dwell: None,
        claim: Claim { horizon: 10, safe_probability: 0.87 },
    })
}

pub const TWO_MODE_BARRIERS: [&str; 2] = [
    "0.2309*x1^2 + 0.1160*x1*x2 + 0.000001*x1 + 0.2529*x2^2 - 0.000001*x2 + 0.000000002",
    "0.2394*x1^2 + 0.1101*x1*x2 - 0.000002*x1 + 0.2588*x2^2 - 0.000008*x2 + 0.000000005",
];

pub fn two_mode_constants() -> [CertConstants; 2] {
    [
        CertConstants { kappa: 0.469, gamma: 0.15, lambda: 2.4, psi: 5.42e-6, alpha: quad(4e-5), rho: quad(2.71e-6) },
        CertConstants { kappa: 0.498, gamma: 0.16, lambda: 2.3, psi: 6.88e-6, alpha: quad(5e-5), rho: quad(3.44e-6) },
    ]
}

pub fn two_mode_dwell() -> DwellParams {
    DwellParams { epsilon: 2.0, mu: 2.0, k_d: 3 }
}

const TWO_MODE_DYNAMICS: [[&str; 2]; 2] = [
    ["0.05*x1 + 0.01*w1 - 0.9 + 0.1*n1", "0.9*x1 + 0.03*x2 + 0.01*w2 + 0.5 + 0.1*n2"],
    ["0.02*x1 - 1.2*x2 + 0.01*w1 + 0.9 + 0.1*n1", "0.05*x2 + 0.01*w2 - 0.2 + 0.1*n2"],
];

fn cascade_id(i: usize) -> String {
    format!("sub{}", i + 1)
}

/// Cascade ring of `n` planar subsystems; subsystem `i` reads the state of `i-1`.
pub fn two_mode(n: usize) -> Result<Fixture, FixtureError> {
    ring_check(n)?;
    let modes: Vec<ModeDesc> = TWO_MODE_DYNAMICS
        .iter()
        .enumerate()
        .map(|(m, d)| ModeDesc { label: Some(format!("mode{m}")), dynamics: d.iter().map(|s| s.to_string()).collect() })
        .collect();
    let mut subsystems = Vec::with_capacity(n);
    let mut edges = Vec::with_capacity(n);
    for i in 0..n {
        let next = (i + 1) % n;
        let prev = (i + n - 1) % n;
        subsystems.push(SubsystemDesc {
            id: cascade_id(i),
            states: vec!["x1".into(), "x2".into()],
            inputs: vec!["w1".into(), "w2".into()],
            noise: vec!["n1".into(), "n2".into()],
            modes: modes.clone(),
            output: None,
            outputs: [(cascade_id(next), vec!["x1".to_string(), "x2".to_string()])].into(),
            state_set: BoxSet::single(vec![[-6.0, 6.0]; 2]),
            init_set: BoxSet::single(vec![[-0.5, 0.5]; 2]),
            unsafe_set: BoxSet::union(vec![vec![[-6.0, -2.0]; 2], vec![[2.0, 6.0]; 2]]),
            input_set: Some(BoxSet::single(vec![[-6.0, 6.0]; 2])),
        });
        edges.push(Edge { from: cascade_id(prev), to: cascade_id(i), inputs: vec!["w1".into(), "w2".into()] });
    }
    let certificates = TWO_MODE_BARRIERS
        .iter()
        .zip(two_mode_constants())
        .enumerate()
        .map(|(m, (b, c))| CbcDesc { mode: m, barrier: b.to_string(), constants: c, status: CertStatus::Unchecked })
        .collect();
    Ok(Fixture {
        kind: FixtureKind::TwoMode,
        size: n,
        network: NetworkDesc { subsystems, edges, noise: NoiseTable::default() },
        certificates,
        dwell: Some(two_mode_dwell()),
        claim: Claim { horizon: 100, safe_probability: 0.86 },
    })
}
