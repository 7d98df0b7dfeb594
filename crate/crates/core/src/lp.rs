//! Feasibility of `A z <= b` by projection onto the most violated halfspace,
//! with optional sign constraints and random restarts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct LpConfig {
    pub max_iterations: usize,
    pub restarts: usize,
    /// Over-relaxation of each projection, in `(0, 2)`.
    pub relaxation: f64,
    pub seed: u64,
}

impl Default for LpConfig {
    fn default() -> Self {
        Self { max_iterations: 5_000, restarts: 10, relaxation: 1.5, seed: 0 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Halfspaces {
    /// Unit-norm rows.
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    dim: usize,
}

impl Halfspaces {
    pub fn new(dim: usize) -> Self {
        Self { rows: Vec::new(), rhs: Vec::new(), dim }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Adds `a . z <= b`. A zero row is kept only as a consistency check.
    pub fn push(&mut self, a: Vec<f64>, b: f64) {
        assert_eq!(a.len(), self.dim);
        let n = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            self.rows.push(a.into_iter().map(|v| v / n).collect());
            self.rhs.push(b / n);
        } else {
            self.rows.push(a);
            self.rhs.push(b);
        }
    }

    /// Largest normalized violation and its row.
    pub fn worst(&self, z: &[f64]) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for (k, (a, b)) in self.rows.iter().zip(&self.rhs).enumerate() {
            let v = dot(a, z) - b;
            if v > best.0 {
                best = (v, k);
            }
        }
        best
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project_sign(z: &mut [f64], nonneg: &[bool]) {
    for (v, &nn) in z.iter_mut().zip(nonneg) {
        if nn && *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn run(h: &Halfspaces, nonneg: &[bool], mut z: Vec<f64>, cfg: &LpConfig) -> (Vec<f64>, f64) {
    project_sign(&mut z, nonneg);
    let (mut viol, mut k) = h.worst(&z);
    let mut best = (z.clone(), viol);
    for _ in 0..cfg.max_iterations {
        if viol <= 0.0 {
            return (z, viol);
        }
        let a = &h.rows[k];
        if a.iter().all(|v| *v == 0.0) {
            break;
        }
        let step = cfg.relaxation * viol;
        for (zi, ai) in z.iter_mut().zip(a) {
            *zi -= step * ai;
        }
        project_sign(&mut z, nonneg);
        (viol, k) = h.worst(&z);
        if viol < best.1 {
            best = (z.clone(), viol);
        }
    }
    best
}

/// Searches for `z` with every halfspace satisfied. Starts from `start`, then
/// from random points when that fails. Returns the least violating point
/// found and its worst normalized violation (`<= 0` means feasible).
pub fn find_feasible(h: &Halfspaces, nonneg: &[bool], start: &[f64], scale: f64, cfg: &LpConfig) -> (Vec<f64>, f64) {
    let mut best = run(h, nonneg, start.to_vec(), cfg);
    if best.1 <= 0.0 {
        return best;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.restarts {
        let z: Vec<f64> = (0..h.dim).map(|_| rng.random_range(-scale..scale)).collect();
        let cand = run(h, nonneg, z, cfg);
        if cand.1 < best.1 {
            best = cand;
        }
        if best.1 <= 0.0 {
            break;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_point_in_triangle() {
        let mut h = Halfspaces::new(2);
        h.push(vec![-1.0, 0.0], -1.0);
        h.push(vec![0.0, -1.0], -1.0);
        h.push(vec![1.0, 1.0], 3.0);
        let (z, v) = find_feasible(&h, &[false, false], &[0.0, 0.0], 1.0, &LpConfig::default());
        assert!(v <= 0.0);
        assert!(z[0] >= 1.0 - 1e-12 && z[1] >= 1.0 - 1e-12 && z[0] + z[1] <= 3.0 + 1e-12);
    }

    #[test]
    fn reports_infeasibility() {
        let mut h = Halfspaces::new(1);
        h.push(vec![1.0], 0.0);
        h.push(vec![-1.0], -1.0);
        let (_, v) = find_feasible(&h, &[false], &[0.0], 1.0, &LpConfig { restarts: 3, ..LpConfig::default() });
        assert!(v > 0.4);
    }

    #[test]
    fn sign_constraints_hold() {
        let mut h = Halfspaces::new(2);
        h.push(vec![1.0, 1.0], -1.0);
        let (z, v) = find_feasible(&h, &[true, false], &[5.0, 5.0], 1.0, &LpConfig::default());
        assert!(v <= 0.0 && z[0] >= 0.0);
    }
}
