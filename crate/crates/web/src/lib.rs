//! Browser bindings for three interactive views: the safety bound as the
//! horizon grows, the dwell-time trade-off of a mode lift, and Monte Carlo
//! runs of the worked examples. Results cross the boundary as JSON strings.

use bcert_core::bound::{safety_bound, Branch};
use bcert_core::dwell::{dwell_bound, dwell_tradeoff};
use bcert_core::fixtures::{Fixture, FixtureKind};
use bcert_core::project::Project;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest `trajectories * subsystems * horizon` accepted from the page.
pub const WORK_CAP: u64 = 20_000_000;

#[derive(Debug, Serialize)]
pub struct BoundCurve {
    pub horizon: Vec<u64>,
    pub delta: Vec<f64>,
    pub branch: Branch,
}

/// Bound for every horizon `0..=max_horizon`.
pub fn bound_curve(gamma: f64, lambda: f64, kappa: f64, psi: f64, max_horizon: u32) -> Result<BoundCurve, String> {
    let mut out = BoundCurve { horizon: Vec::new(), delta: Vec::new(), branch: Branch::LevelAboveDrift };
    for t in 0..=max_horizon as u64 {
        let b = safety_bound(gamma, lambda, kappa, psi, t).map_err(|e| e.to_string())?;
        out.branch = b.branch;
        out.horizon.push(t);
        out.delta.push(b.delta);
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct TradeoffRow {
    pub epsilon: f64,
    /// Real-valued dwell bound before rounding up.
    pub bound: f64,
    pub k_d: u32,
    pub kappa: f64,
}

pub fn tradeoff(mu: f64, kappas: &[f64], epsilons: &[f64]) -> Result<Vec<TradeoffRow>, String> {
    let pts = dwell_tradeoff(mu, kappas, epsilons).map_err(|e| e.to_string())?;
    pts.into_iter()
        .map(|p| {
            Ok(TradeoffRow {
                epsilon: p.epsilon,
                bound: dwell_bound(p.epsilon, mu, kappas).map_err(|e| e.to_string())?,
                k_d: p.k_d,
                kappa: p.kappa,
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct FixtureRun {
    pub fixture: FixtureKind,
    pub subsystems: usize,
    pub k_d: u32,
    pub gamma: f64,
    pub lambda: f64,
    pub kappa: f64,
    pub psi: f64,
    pub delta: f64,
    pub exceedances: u64,
    pub trajectories: usize,
    pub frequency: f64,
    pub upper95: f64,
    /// First state component of the first subsystem, one row per retained run.
    pub paths: Vec<Vec<f64>>,
    /// Network barrier along each retained run.
    pub barrier: Vec<Vec<f64>>,
    pub unsafe_set: Vec<Vec<[f64; 2]>>,
}

/// Lifts and composes the published certificates (without grid checks) and
/// simulates the closed loop.
pub fn fixture_run(name: &str, n: usize, trajectories: usize, horizon: usize, seed: u64, retain: usize) -> Result<FixtureRun, String> {
    let kind: FixtureKind = name.parse().map_err(|e: bcert_core::fixtures::FixtureError| e.to_string())?;
    if (trajectories as u64).saturating_mul(n as u64).saturating_mul(horizon as u64) > WORK_CAP {
        return Err(format!("trajectories x subsystems x horizon must stay below {WORK_CAP}"));
    }
    let f = Fixture::build(kind, n).map_err(|e| e.to_string())?;
    let mut p = Project::from_fixture(&f).map_err(|e| e.to_string())?;
    let s = &mut p.file.simulation;
    s.trajectories = trajectories;
    s.horizon = horizon;
    s.seed = seed;
    s.retain = retain.min(trajectories);
    let (apbcs, _) = p.lift(false).map_err(|e| e.to_string())?;
    let (c, _) = p.compose(&apbcs).map_err(|e| e.to_string())?;
    let r = p.simulate(&c).map_err(|e| e.to_string())?;
    let k = &c.certificate.constants;
    let bound = r.bound.as_ref().ok_or("no bound for these constants")?;
    let freq = r.exceedance_frequency;
    Ok(FixtureRun {
        fixture: kind,
        subsystems: n,
        k_d: apbcs[0].k_d,
        gamma: k.gamma,
        lambda: k.lambda,
        kappa: k.kappa,
        psi: k.psi,
        delta: bound.delta,
        exceedances: r.exceedances,
        trajectories,
        frequency: freq.map_or(0.0, |f| f.value),
        upper95: freq.map_or(1.0, |f| f.upper95),
        paths: r.retained.iter().map(|t| t.states.iter().map(|s| s[0][0]).collect()).collect(),
        barrier: r.retained.iter().map(|t| t.barrier.clone()).collect(),
        unsafe_set: p.network.subsystems[0].unsafe_set.boxes.iter().map(|b| b.bounds.clone()).collect(),
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = boundCurve)]
pub fn bound_curve_js(gamma: f64, lambda: f64, kappa: f64, psi: f64, max_horizon: u32) -> Result<String, JsError> {
    to_js(bound_curve(gamma, lambda, kappa, psi, max_horizon))
}

#[wasm_bindgen(js_name = dwellTradeoff)]
pub fn tradeoff_js(mu: f64, kappas: Vec<f64>, epsilons: Vec<f64>) -> Result<String, JsError> {
    to_js(tradeoff(mu, &kappas, &epsilons))
}

#[wasm_bindgen(js_name = fixtureRun)]
pub fn fixture_run_js(name: &str, n: usize, trajectories: usize, horizon: usize, seed: u64, retain: usize) -> Result<String, JsError> {
    to_js(fixture_run(name, n, trajectories, horizon, seed, retain))
}
