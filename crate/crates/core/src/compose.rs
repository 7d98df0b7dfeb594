//! Gain digraph, the cycle small-gain test, scaling search and composition of
//! subsystem certificates into a network certificate.
//!
//! Gains are linear: the cross gain from `j` into `i` is `rho_i(alpha_j^-1(s))`,
//! which is `c_ij * s` when the two power laws share an exponent.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certify::{AbcCertificate, ApbcCertificate, CertConstants, CertStatus, PowerLaw, UnsafeSemantics};
use crate::model::Network;

/// Required margin in the scaled edge inequalities.
pub const SCALING_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error("unsupported: {0}")]
    Capability(String),
    #[error("invalid gain graph: {0}")]
    Invalid(String),
    #[error("small-gain condition violated: {0}")]
    SmallGain(String),
    #[error(
        "composition infeasible: lambda of `{lambda_of}` scaled ({lambda:e}) does not exceed gamma of `{gamma_of}` scaled ({gamma:e})"
    )]
    Infeasible { lambda_of: String, lambda: f64, gamma_of: String, gamma: f64 },
}

/// Cross gain `c * s` on the arc `from -> to`, i.e. `from` feeds `to`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainEdge {
    pub to: usize,
    pub from: usize,
    pub coef: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainDigraph {
    pub self_gains: Vec<f64>,
    pub edges: Vec<GainEdge>,
}

impl GainDigraph {
    pub fn new(self_gains: Vec<f64>, edges: Vec<GainEdge>) -> Result<Self, ComposeError> {
        let n = self_gains.len();
        for e in &edges {
            if e.to >= n || e.from >= n || e.to == e.from {
                return Err(ComposeError::Invalid(format!("bad edge {} -> {}", e.from, e.to)));
            }
            if !(e.coef >= 0.0 && e.coef.is_finite()) {
                return Err(ComposeError::Invalid(format!("gain {} on {} -> {}", e.coef, e.from, e.to)));
            }
        }
        Ok(Self { self_gains, edges })
    }

    /// Builds gains from the network wiring and each subsystem's constants.
    pub fn from_network(net: &Network, constants: &[CertConstants]) -> Result<Self, ComposeError> {
        if constants.len() != net.len() {
            return Err(ComposeError::Invalid(format!(
                "{} certificates for {} subsystems",
                constants.len(),
                net.len()
            )));
        }
        let mut pairs = BTreeSet::new();
        for e in &net.edges {
            let (Some(from), Some(to)) = (net.index_of(&e.from), net.index_of(&e.to)) else {
                return Err(ComposeError::Invalid(format!("edge {} -> {} names unknown subsystems", e.from, e.to)));
            };
            if from != to {
                pairs.insert((to, from));
            }
        }
        let mut edges = Vec::with_capacity(pairs.len());
        for (to, from) in pairs {
            let coef = cross_gain(&constants[to].rho, &constants[from].alpha).map_err(|m| {
                ComposeError::Capability(format!("gain {} -> {}: {m}", net.subsystems[from].id, net.subsystems[to].id))
            })?;
            if coef > 0.0 {
                edges.push(GainEdge { to, from, coef });
            }
        }
        Self::new(constants.iter().map(|c| c.kappa).collect(), edges)
    }

    pub fn len(&self) -> usize {
        self.self_gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.self_gains.is_empty()
    }
}

/// Coefficient of `rho(alpha^-1(s))` when the result is linear.
pub fn cross_gain(rho: &PowerLaw, alpha: &PowerLaw) -> Result<f64, String> {
    if rho.is_zero() {
        return Ok(0.0);
    }
    if (rho.exp / alpha.exp - 1.0).abs() > 1e-12 {
        return Err(format!(
            "rho exponent {} and alpha exponent {} do not cancel, so the gain is not linear; \
             only the sufficient test c_ij <= 1 for linear gains is available",
            rho.exp, alpha.exp
        ));
    }
    Ok(rho.coef / alpha.coef)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallGainReport {
    pub satisfied: bool,
    /// Nodes whose self gain is not below 1.
    pub self_violations: Vec<usize>,
    /// Maximum cycle mean of `ln c_ij`; `None` without cycles.
    pub max_cycle_mean: Option<f64>,
    /// A cycle attaining the maximum mean, as a node sequence.
    pub critical_cycle: Option<Vec<usize>>,
    /// Product of the gains along `critical_cycle`.
    pub cycle_gain: Option<f64>,
}

/// Karp's maximum cycle mean on `ln c` with a critical cycle.
fn max_cycle_mean(g: &GainDigraph) -> Option<(f64, Vec<usize>)> {
    let n = g.len();
    if n == 0 || g.edges.is_empty() {
        return None;
    }
    let arcs: Vec<(usize, usize, f64)> = g.edges.iter().map(|e| (e.from, e.to, e.coef.ln())).collect();
    let ninf = f64::NEG_INFINITY;
    // d[k][v]: heaviest walk of exactly k arcs ending at v, starting anywhere
    let mut d = vec![vec![ninf; n]; n + 1];
    let mut pred = vec![vec![usize::MAX; n]; n + 1];
    d[0].iter_mut().for_each(|x| *x = 0.0);
    for k in 1..=n {
        let (prev, cur) = d.split_at_mut(k);
        let (prev, cur) = (&prev[k - 1], &mut cur[0]);
        for &(u, v, w) in &arcs {
            if prev[u] > ninf && prev[u] + w > cur[v] {
                cur[v] = prev[u] + w;
                pred[k][v] = u;
            }
        }
    }
    let mut best: Option<(f64, usize)> = None;
    for v in 0..n {
        if d[n][v] == ninf {
            continue;
        }
        let worst = (0..n)
            .filter(|&k| d[k][v] > ninf)
            .map(|k| (d[n][v] - d[k][v]) / (n - k) as f64)
            .fold(f64::INFINITY, f64::min);
        if best.is_none_or(|(b, _)| worst > b) {
            best = Some((worst, v));
        }
    }
    let (mean, v) = best?;
    // walk back n arcs from v and split the walk into simple cycles
    let mut walk = vec![v];
    let mut cur = v;
    for k in (1..=n).rev() {
        cur = pred[k][cur];
        walk.push(cur);
    }
    walk.reverse();
    let weight = |a: usize, b: usize| {
        arcs.iter().filter(|&&(u, w, _)| u == a && w == b).map(|a| a.2).fold(ninf, f64::max)
    };
    let mut stack: Vec<usize> = Vec::new();
    let mut pos = vec![usize::MAX; n];
    let mut best_cycle: Option<(f64, Vec<usize>)> = None;
    for &node in &walk {
        if pos[node] != usize::MAX {
            let start = pos[node];
            let cycle: Vec<usize> = stack[start..].to_vec();
            let mut total = 0.0;
            for i in 0..cycle.len() {
                total += weight(cycle[i], cycle[(i + 1) % cycle.len()]);
            }
            let m = total / cycle.len() as f64;
            if best_cycle.as_ref().is_none_or(|(b, _)| m > *b) {
                best_cycle = Some((m, cycle));
            }
            for &u in &stack[start + 1..] {
                pos[u] = usize::MAX;
            }
            stack.truncate(start + 1);
        } else {
            pos[node] = stack.len();
            stack.push(node);
        }
    }
    let (cm, cycle) = best_cycle.expect("a walk of n arcs on n nodes repeats a node");
    debug_assert!((cm - mean).abs() <= 1e-9 * mean.abs().max(1.0));
    Some((mean, cycle))
}

/// Self gains below 1 and every cycle product of cross gains below 1.
pub fn small_gain_check(g: &GainDigraph) -> SmallGainReport {
    let self_violations: Vec<usize> = (0..g.len()).filter(|&i| !(g.self_gains[i] < 1.0)).collect();
    let mcm = max_cycle_mean(g);
    let cycles_ok = mcm.as_ref().is_none_or(|(m, _)| *m < 0.0);
    let cycle_gain = mcm.as_ref().map(|(_, c)| {
        (0..c.len())
            .map(|i| {
                let (a, b) = (c[i], c[(i + 1) % c.len()]);
                g.edges.iter().filter(|e| e.from == a && e.to == b).map(|e| e.coef).fold(0.0, f64::max)
            })
            .product()
    });
    SmallGainReport {
        satisfied: self_violations.is_empty() && cycles_ok,
        self_violations,
        max_cycle_mean: mcm.as_ref().map(|m| m.0),
        critical_cycle: mcm.map(|m| m.1),
        cycle_gain,
    }
}

/// Positive `s_i` with `c_ij s_j / s_i < 1` on every arc.
pub fn find_sigma(g: &GainDigraph) -> Result<Vec<f64>, ComposeError> {
    let report = small_gain_check(g);
    if !report.satisfied {
        let msg = if !report.self_violations.is_empty() {
            format!("self gains not below 1 at nodes {:?}", report.self_violations)
        } else {
            format!(
                "cycle {:?} has gain product {:e}",
                report.critical_cycle.unwrap_or_default(),
                report.cycle_gain.unwrap_or(f64::NAN)
            )
        };
        return Err(ComposeError::SmallGain(msg));
    }
    let n = g.len();
    if g.edges.iter().all(|e| e.coef < 1.0 - SCALING_TOL) {
        return Ok(vec![1.0; n]);
    }
    let slack = report.max_cycle_mean.map_or(1.0, |m| -m / 2.0);
    // longest-path potentials from a virtual source; no positive cycles remain
    let mut u = vec![0.0f64; n];
    for _ in 0..n {
        let mut changed = false;
        for e in &g.edges {
            if e.coef == 0.0 {
                continue;
            }
            let cand = u[e.from] + e.coef.ln() + slack;
            if cand > u[e.to] {
                u[e.to] = cand;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let s: Vec<f64> = u.iter().map(|x| x.exp()).collect();
    if let Some(e) = g.edges.iter().find(|e| e.coef * s[e.from] / s[e.to] >= 1.0 - SCALING_TOL) {
        return Err(ComposeError::SmallGain(format!(
            "scaled gain on {} -> {} is {:e}",
            e.from,
            e.to,
            e.coef * s[e.from] / s[e.to]
        )));
    }
    Ok(s)
}

/// Largest scaled cross gain `c_ij s_j / s_i`.
pub fn max_scaled_gain(g: &GainDigraph, s: &[f64]) -> f64 {
    g.edges.iter().map(|e| e.coef * s[e.from] / s[e.to]).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Composition {
    pub graph: GainDigraph,
    pub small_gain: SmallGainReport,
    pub scalings: Vec<f64>,
    pub certificate: AbcCertificate,
}

/// Composed constants for per-subsystem constants and scalings.
pub fn composed_constants(
    names: &[String],
    constants: &[CertConstants],
    graph: &GainDigraph,
    scalings: &[f64],
    semantics: UnsafeSemantics,
) -> Result<CertConstants, ComposeError> {
    let n = constants.len();
    if n == 0 || scalings.len() != n || names.len() != n {
        return Err(ComposeError::Invalid("constants, names and scalings must have equal non-zero length".into()));
    }
    let arg = |f: &dyn Fn(usize) -> f64, max: bool| {
        (0..n).map(|i| (f(i), i)).fold((if max { f64::NEG_INFINITY } else { f64::INFINITY }, 0), |a, b| {
            if (max && b.0 > a.0) || (!max && b.0 < a.0) { b } else { a }
        })
    };
    let (gamma, gi) = arg(&|i| constants[i].gamma / scalings[i], true);
    let (lmax, li_max) = arg(&|i| constants[i].lambda / scalings[i], true);
    let (lmin, li_min) = arg(&|i| constants[i].lambda / scalings[i], false);
    if !(lmax > gamma) {
        return Err(ComposeError::Infeasible {
            lambda_of: names[li_max].clone(),
            lambda: lmax,
            gamma_of: names[gi].clone(),
            gamma,
        });
    }
    if semantics == UnsafeSemantics::Union && !(lmin > gamma) {
        return Err(ComposeError::Infeasible {
            lambda_of: names[li_min].clone(),
            lambda: lmin,
            gamma_of: names[gi].clone(),
            gamma,
        });
    }
    let kappa = constants.iter().map(|c| c.kappa).fold(max_scaled_gain(graph, scalings), f64::max);
    let psi = arg(&|i| constants[i].psi / scalings[i], true).0;
    let alpha_coef = arg(&|i| constants[i].alpha.coef / scalings[i], false).0;
    Ok(CertConstants {
        kappa,
        gamma,
        lambda: if semantics == UnsafeSemantics::Product { lmax } else { lmin },
        psi,
        alpha: PowerLaw::new(alpha_coef, constants[0].alpha.exp),
        rho: PowerLaw::ZERO,
    })
}

/// Small-gain test, scaling search and composition in one call. Pass
/// `scalings` to skip the search.
pub fn compose_abc(
    net: &Network,
    apbcs: &[ApbcCertificate],
    scalings: Option<Vec<f64>>,
    semantics: UnsafeSemantics,
) -> Result<Composition, ComposeError> {
    let constants: Vec<CertConstants> = apbcs.iter().map(|c| c.constants.clone()).collect();
    let graph = GainDigraph::from_network(net, &constants)?;
    let small_gain = small_gain_check(&graph);
    let scalings = match scalings {
        Some(s) => {
            if s.len() != net.len() || s.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return Err(ComposeError::Invalid("scalings must be positive, one per subsystem".into()));
            }
            if !small_gain.satisfied || max_scaled_gain(&graph, &s) >= 1.0 - SCALING_TOL {
                return Err(ComposeError::SmallGain("given scalings do not contract every edge".into()));
            }
            s
        }
        None => find_sigma(&graph)?,
    };
    let names: Vec<String> = net.subsystems.iter().map(|s| s.id.clone()).collect();
    let k = composed_constants(&names, &constants, &graph, &scalings, semantics)?;
    Ok(Composition {
        certificate: AbcCertificate {
            components: apbcs.to_vec(),
            scalings: scalings.clone(),
            constants: k,
            semantics,
            status: CertStatus::Unchecked,
        },
        graph,
        small_gain,
        scalings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ring(n: usize, c: f64, kappa: f64) -> GainDigraph {
        let edges = (0..n).map(|i| GainEdge { to: i, from: (i + n - 1) % n, coef: c }).collect();
        GainDigraph::new(vec![kappa; n], edges).unwrap()
    }

    #[test]
    fn room_ring_is_small_gain() {
        let c = cross_gain(&PowerLaw::new(9.3e-6, 2.0), &PowerLaw::new(4.5e-5, 2.0)).unwrap();
        assert!((c - 9.3e-6 / 4.5e-5).abs() < 1e-15);
        let r = small_gain_check(&ring(10, c, 0.99));
        assert!(r.satisfied);
        assert!((r.max_cycle_mean.unwrap() - c.ln()).abs() < 1e-12);
        assert_eq!(find_sigma(&ring(10, c, 0.99)).unwrap(), vec![1.0; 10]);
    }

    #[test]
    fn unit_self_gain_violates() {
        let mut g = ring(3, 0.1, 0.5);
        g.self_gains[1] = 1.0;
        let r = small_gain_check(&g);
        assert!(!r.satisfied);
        assert_eq!(r.self_violations, vec![1]);
    }

    #[test]
    fn two_node_loop_with_large_gain() {
        let g = GainDigraph::new(
            vec![0.5, 0.5],
            vec![GainEdge { to: 0, from: 1, coef: 2.0 }, GainEdge { to: 1, from: 0, coef: 0.4 }],
        )
        .unwrap();
        let r = small_gain_check(&g);
        assert!(r.satisfied);
        assert!((r.cycle_gain.unwrap() - 0.8).abs() < 1e-12);
        let s = find_sigma(&g).unwrap();
        assert!(2.0 * s[1] / s[0] < 1.0 - SCALING_TOL);
        assert!(0.4 * s[0] / s[1] < 1.0 - SCALING_TOL);
    }

    #[test]
    fn violating_cycle_is_extracted() {
        let g = GainDigraph::new(
            vec![0.5; 4],
            vec![
                GainEdge { to: 1, from: 0, coef: 0.1 },
                GainEdge { to: 2, from: 1, coef: 3.0 },
                GainEdge { to: 3, from: 2, coef: 1.0 },
                GainEdge { to: 1, from: 3, coef: 0.5 },
            ],
        )
        .unwrap();
        let r = small_gain_check(&g);
        assert!(!r.satisfied);
        let mut cyc = r.critical_cycle.unwrap();
        cyc.sort();
        assert_eq!(cyc, vec![1, 2, 3]);
        assert!((r.cycle_gain.unwrap() - 1.5).abs() < 1e-12);
        assert!(matches!(find_sigma(&g), Err(ComposeError::SmallGain(_))));
    }

    #[test]
    fn single_node_has_identity_scaling() {
        let g = GainDigraph::new(vec![0.7], vec![]).unwrap();
        assert!(small_gain_check(&g).satisfied);
        assert_eq!(find_sigma(&g).unwrap(), vec![1.0]);
    }

    #[test]
    fn nonlinear_gain_is_capability_error() {
        assert!(cross_gain(&PowerLaw::new(1.0, 2.0), &PowerLaw::new(1.0, 3.0)).is_err());
        assert_eq!(cross_gain(&PowerLaw::ZERO, &PowerLaw::new(1.0, 3.0)), Ok(0.0));
    }

    #[test]
    fn eq13_gate_names_offenders() {
        let k = |gamma: f64, lambda: f64| CertConstants {
            kappa: 0.5,
            gamma,
            lambda,
            psi: 0.0,
            alpha: PowerLaw::new(1.0, 2.0),
            rho: PowerLaw::ZERO,
        };
        let names = vec!["a".to_string(), "b".to_string()];
        let g = GainDigraph::new(vec![0.5, 0.5], vec![]).unwrap();
        let ks = vec![k(0.1, 2.0), k(0.5, 0.4)];
        let prod = composed_constants(&names, &ks, &g, &[1.0, 1.0], UnsafeSemantics::Product).unwrap();
        assert_eq!(prod.lambda, 2.0);
        let err = composed_constants(&names, &ks, &g, &[1.0, 1.0], UnsafeSemantics::Union).unwrap_err();
        assert!(matches!(err, ComposeError::Infeasible { ref lambda_of, ref gamma_of, .. } if lambda_of == "b" && gamma_of == "b"));
    }

    fn random_graph(n: usize, gains: &[f64]) -> GainDigraph {
        let mut edges = Vec::new();
        let mut k = 0;
        for to in 0..n {
            for from in 0..n {
                if to != from && k < gains.len() && gains[k] > 0.0 {
                    edges.push(GainEdge { to, from, coef: gains[k] });
                }
                k += 1;
            }
        }
        GainDigraph::new(vec![0.5; n], edges).unwrap()
    }

    /// Oracle: largest cycle geometric mean by enumerating simple cycles.
    fn brute_mean(g: &GainDigraph) -> Option<f64> {
        let n = g.len();
        let mut best: Option<f64> = None;
        fn dfs(g: &GainDigraph, start: usize, cur: usize, seen: &mut Vec<bool>, sum: f64, len: usize, best: &mut Option<f64>) {
            for e in g.edges.iter().filter(|e| e.from == cur) {
                let w = sum + e.coef.ln();
                if e.to == start {
                    let m = w / (len + 1) as f64;
                    if best.is_none_or(|b| m > b) {
                        *best = Some(m);
                    }
                } else if e.to > start && !seen[e.to] {
                    seen[e.to] = true;
                    dfs(g, start, e.to, seen, w, len + 1, best);
                    seen[e.to] = false;
                }
            }
        }
        for s in 0..n {
            let mut seen = vec![false; n];
            seen[s] = true;
            dfs(g, s, s, &mut seen, 0.0, 0, &mut best);
        }
        best
    }

    proptest! {
        #[test]
        fn karp_matches_cycle_enumeration(n in 2usize..6, gains in proptest::collection::vec(prop_oneof![Just(0.0), 0.05f64..3.0], 36)) {
            let g = random_graph(n, &gains);
            let fast = small_gain_check(&g).max_cycle_mean;
            let slow = brute_mean(&g);
            match (fast, slow) {
                (None, None) => {}
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}"),
                other => prop_assert!(false, "{other:?}"),
            }
        }

        #[test]
        fn scalings_contract_every_edge(n in 2usize..7, gains in proptest::collection::vec(prop_oneof![Just(0.0), 0.05f64..4.0], 49)) {
            let g = random_graph(n, &gains);
            if small_gain_check(&g).satisfied {
                let s = find_sigma(&g).unwrap();
                for e in &g.edges {
                    prop_assert!(e.coef * s[e.from] / s[e.to] < 1.0 - SCALING_TOL);
                }
                // common rescaling keeps the edge inequalities and the gate
                let s2: Vec<f64> = s.iter().map(|x| x * 3.7).collect();
                prop_assert!((max_scaled_gain(&g, &s) - max_scaled_gain(&g, &s2)).abs() < 1e-12);
            }
        }
    }
}
