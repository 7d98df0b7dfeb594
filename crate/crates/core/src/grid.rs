//! Point clouds over unions of boxes, and local refinement of worst points.
//!
//! Regular grids at step `h` place points at `lo + k*h` plus the upper bound,
//! so the grid at step `2h` is a subset of the grid at step `h`. When a grid
//! would exceed the point cap, a Latin hypercube design (plus box corners) is
//! used instead.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{BoxSet, Cuboid};

/// How finely each axis is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    /// Axis step `h`.
    Step(f64),
    /// Evenly spaced points per axis, bounds included.
    PointsPerDim(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub resolution: Resolution,
    /// Cap on points per scanned domain before switching to Latin hypercube.
    pub max_points: usize,
    /// Number of worst grid points refined by coordinate search.
    pub refine_starts: usize,
    /// Coordinate-search sweeps per start.
    pub refine_sweeps: usize,
    pub seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            resolution: Resolution::PointsPerDim(50),
            max_points: 1_000_000,
            refine_starts: 8,
            refine_sweeps: 200,
            seed: 0,
        }
    }
}

impl GridConfig {
    pub fn with_step(h: f64) -> Self {
        Self { resolution: Resolution::Step(h), ..Self::default() }
    }
}

/// Points of one axis.
pub fn axis_points(lo: f64, hi: f64, res: Resolution) -> Vec<f64> {
    if hi <= lo {
        return vec![lo];
    }
    match res {
        Resolution::Step(h) => {
            let slack = 1e-9 * h;
            let mut pts = Vec::new();
            let mut k = 0u64;
            loop {
                let x = lo + k as f64 * h;
                if x >= hi - slack {
                    break;
                }
                pts.push(x);
                k += 1;
            }
            pts.push(hi);
            pts
        }
        Resolution::PointsPerDim(n) => {
            let n = n.max(2);
            (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
        }
    }
}

fn axis_count(lo: f64, hi: f64, res: Resolution) -> usize {
    if hi <= lo {
        return 1;
    }
    match res {
        Resolution::Step(h) => {
            let n = ((hi - lo) / h - 1e-9).ceil();
            (n as usize).saturating_add(1)
        }
        Resolution::PointsPerDim(n) => n.max(2),
    }
}

/// Effective step of a regular grid over the box: the largest axis spacing.
pub fn effective_step(b: &Cuboid, res: Resolution) -> f64 {
    b.bounds
        .iter()
        .map(|&[lo, hi]| match res {
            Resolution::Step(h) => if hi > lo { h.min(hi - lo) } else { 0.0 },
            Resolution::PointsPerDim(n) => (hi - lo) / (n.max(2) - 1) as f64,
        })
        .fold(0.0, f64::max)
}

/// Regular-grid point count of a box, saturating.
pub fn grid_count(b: &Cuboid, res: Resolution) -> usize {
    b.bounds
        .iter()
        .fold(1usize, |acc, &[lo, hi]| acc.saturating_mul(axis_count(lo, hi, res)))
}

/// Points tagged with the box they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub dim: usize,
    pub coords: Vec<f64>,
    pub owner: Vec<u32>,
    pub boxes: Vec<Cuboid>,
    /// Largest axis spacing among regular grids; `None` when any box was sampled.
    pub step: Option<f64>,
}

impl PointCloud {
    pub fn empty(dim: usize) -> Self {
        Self { dim, coords: Vec::new(), owner: Vec::new(), boxes: Vec::new(), step: Some(0.0) }
    }

    pub fn len(&self) -> usize {
        self.owner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owner.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn bounds_of(&self, i: usize) -> &Cuboid {
        &self.boxes[self.owner[i] as usize]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.len()).map(move |i| self.point(i))
    }

    /// Grid over a union of boxes with at most roughly `budget` points.
    pub fn over(set: &BoxSet, res: Resolution, budget: usize, seed: u64) -> Self {
        let dim = set.dim().unwrap_or(0);
        let mut cloud = PointCloud::empty(dim);
        if set.is_empty() {
            return cloud;
        }
        let counts: Vec<usize> = set.boxes.iter().map(|b| grid_count(b, res)).collect();
        let total = counts.iter().fold(0usize, |a, &c| a.saturating_add(c));
        let budget = budget.max(set.boxes.len());
        cloud.boxes = set.boxes.clone();
        for (bi, b) in set.boxes.iter().enumerate() {
            let share = if total <= budget {
                counts[bi]
            } else {
                ((budget as f64) * counts[bi] as f64 / total as f64).ceil().max(1.0) as usize
            };
            if counts[bi] <= share {
                cloud.push_grid(bi, b, res);
                let s = effective_step(b, res);
                cloud.step = cloud.step.map(|c| c.max(s));
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (bi as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                cloud.push_lhs(bi, b, share, &mut rng);
                cloud.step = None;
            }
        }
        cloud
    }

    /// Latin-hypercube sample with about `n` points spread over the boxes by volume.
    pub fn sampled(set: &BoxSet, n: usize, seed: u64) -> Self {
        let dim = set.dim().unwrap_or(0);
        let mut cloud = PointCloud::empty(dim);
        cloud.step = None;
        if set.is_empty() {
            return cloud;
        }
        cloud.boxes = set.boxes.clone();
        let total: f64 = set.boxes.iter().map(Cuboid::volume).sum();
        for (bi, b) in set.boxes.iter().enumerate() {
            let share = if total > 0.0 { b.volume() / total } else { 1.0 / set.boxes.len() as f64 };
            let k = ((n as f64) * share).ceil().max(1.0) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (bi as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            cloud.push_lhs(bi, b, k, &mut rng);
        }
        cloud
    }

    fn push_grid(&mut self, bi: usize, b: &Cuboid, res: Resolution) {
        let axes: Vec<Vec<f64>> = b.bounds.iter().map(|&[lo, hi]| axis_points(lo, hi, res)).collect();
        let mut idx = vec![0usize; axes.len()];
        loop {
            for (d, &k) in idx.iter().enumerate() {
                self.coords.push(axes[d][k]);
            }
            self.owner.push(bi as u32);
            // odometer increment, last axis fastest
            let mut d = axes.len();
            loop {
                if d == 0 {
                    return;
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] < axes[d].len() {
                    break;
                }
                idx[d] = 0;
            }
        }
    }

    fn push_lhs(&mut self, bi: usize, b: &Cuboid, n: usize, rng: &mut ChaCha8Rng) {
        let d = b.dim();
        // corners first, when affordable
        if d < 20 && (1usize << d) <= n / 2 {
            for mask in 0..(1usize << d) {
                for (k, &[lo, hi]) in b.bounds.iter().enumerate() {
                    self.coords.push(if mask >> k & 1 == 1 { hi } else { lo });
                }
                self.owner.push(bi as u32);
            }
        }
        let perms: Vec<Vec<usize>> = (0..d)
            .map(|_| {
                let mut p: Vec<usize> = (0..n).collect();
                p.shuffle(rng);
                p
            })
            .collect();
        for i in 0..n {
            for (k, &[lo, hi]) in b.bounds.iter().enumerate() {
                let u: f64 = rng.random();
                self.coords.push(lo + (hi - lo) * (perms[k][i] as f64 + u) / n as f64);
            }
            self.owner.push(bi as u32);
        }
    }

    /// All pairs `(a, b)` concatenated, `a` outer.
    pub fn product(a: &PointCloud, b: &PointCloud) -> PointCloud {
        let dim = a.dim + b.dim;
        let mut boxes = Vec::with_capacity(a.boxes.len() * b.boxes.len());
        for ba in &a.boxes {
            for bb in &b.boxes {
                boxes.push(ba.product(bb));
            }
        }
        let mut coords = Vec::with_capacity(a.len() * b.len() * dim);
        let mut owner = Vec::with_capacity(a.len() * b.len());
        for i in 0..a.len() {
            for j in 0..b.len() {
                coords.extend_from_slice(a.point(i));
                coords.extend_from_slice(b.point(j));
                owner.push(a.owner[i] * b.boxes.len() as u32 + b.owner[j]);
            }
        }
        let step = match (a.step, b.step) {
            (Some(x), Some(y)) => Some(x.max(y)),
            _ => None,
        };
        PointCloud { dim, coords, owner, boxes, step }
    }
}

/// Splits a point budget between an outer and an inner factor whose full grids
/// have `nx` and `nw` points. The outer factor is kept whole when possible.
pub fn split_budget(cap: usize, nx: usize, nw: usize) -> (usize, usize) {
    if nx.saturating_mul(nw) <= cap {
        return (nx, nw);
    }
    let min_inner = nw.min(64).max(1);
    if nx.saturating_mul(min_inner) <= cap {
        (nx, (cap / nx.max(1)).min(nw).max(1))
    } else {
        ((cap / min_inner).max(1), min_inner)
    }
}

/// Full regular-grid size of a union of boxes, saturating.
pub fn set_grid_count(set: &BoxSet, res: Resolution) -> usize {
    set.boxes.iter().fold(0usize, |a, b| a.saturating_add(grid_count(b, res)))
}

/// Maximizes `f` by coordinate search inside `bounds`, starting from `start`
/// with initial per-axis steps `step`. Steps halve when no axis improves.
pub fn refine_max(
    f: impl Fn(&[f64]) -> f64,
    start: &[f64],
    bounds: &Cuboid,
    step: &[f64],
    sweeps: usize,
) -> (Vec<f64>, f64) {
    let mut x = start.to_vec();
    let mut best = f(&x);
    let mut h = step.to_vec();
    let mut cand = x.clone();
    for _ in 0..sweeps {
        let mut improved = false;
        for d in 0..x.len() {
            if h[d] <= 0.0 {
                continue;
            }
            for dir in [1.0, -1.0] {
                cand.copy_from_slice(&x);
                cand[d] = (x[d] + dir * h[d]).clamp(bounds.lo(d), bounds.hi(d));
                if cand[d] == x[d] {
                    continue;
                }
                let v = f(&cand);
                if v > best {
                    best = v;
                    x.copy_from_slice(&cand);
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            let mut active = false;
            for (d, hd) in h.iter_mut().enumerate() {
                *hd *= 0.5;
                let scale = 1.0 + bounds.hi(d).abs().max(bounds.lo(d).abs());
                if *hd > 1e-10 * scale {
                    active = true;
                } else {
                    *hd = 0.0;
                }
            }
            if !active {
                break;
            }
        }
    }
    (x, best)
}

/// Per-axis initial refinement steps for a box under a resolution.
pub fn refine_steps(b: &Cuboid, res: Resolution) -> Vec<f64> {
    b.bounds
        .iter()
        .map(|&[lo, hi]| match res {
            Resolution::Step(h) => h.min(hi - lo),
            Resolution::PointsPerDim(n) => (hi - lo) / (n.max(2) - 1) as f64,
        })
        .collect()
}

/// Indices of the `k` largest values, ties broken by lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| !values[i].is_nan()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Maps `f` over the points of a cloud, in parallel when enabled.
pub fn map_points<F>(cloud: &PointCloud, f: F) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if cloud.dim == 0 {
            return (0..cloud.len()).map(|_| f(&[])).collect();
        }
        cloud.coords.par_chunks(cloud.dim).map(|p| f(p)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        cloud.iter().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_grid_includes_both_ends() {
        let pts = axis_points(19.0, 21.0, Resolution::Step(0.5));
        assert_eq!(pts, vec![19.0, 19.5, 20.0, 20.5, 21.0]);
        let pts = axis_points(0.0, 1.0, Resolution::Step(0.3));
        assert_eq!(pts.len(), 5);
        assert_eq!(*pts.last().unwrap(), 1.0);
        assert_eq!(axis_points(2.0, 2.0, Resolution::Step(0.1)), vec![2.0]);
    }

    #[test]
    fn counts_agree_with_points() {
        for (lo, hi, h) in [(1.0, 50.0, 0.05), (-6.0, 6.0, 0.1), (0.0, 1.0, 0.3), (-1.0, 1.0, 0.01)] {
            let b = Cuboid::new(vec![[lo, hi]]);
            assert_eq!(grid_count(&b, Resolution::Step(h)), axis_points(lo, hi, Resolution::Step(h)).len());
        }
    }

    #[test]
    fn dyadic_grids_are_nested() {
        let fine = axis_points(-6.0, 6.0, Resolution::Step(0.05));
        let coarse = axis_points(-6.0, 6.0, Resolution::Step(0.1));
        for c in coarse {
            assert!(fine.iter().any(|f| f == &c), "{c} missing");
        }
    }

    #[test]
    fn budget_switches_to_lhs() {
        let set = BoxSet::single(vec![[0.0, 1.0], [0.0, 1.0]]);
        let grid = PointCloud::over(&set, Resolution::Step(0.1), 1000, 0);
        assert_eq!(grid.len(), 121);
        assert!(grid.step.is_some());
        let lhs = PointCloud::over(&set, Resolution::Step(0.001), 1000, 0);
        assert!(lhs.step.is_none());
        assert_eq!(lhs.len(), 1004);
        assert!(lhs.iter().all(|p| set.contains(p)));
    }

    #[test]
    fn product_cloud_pairs_points() {
        let a = PointCloud::over(&BoxSet::single(vec![[0.0, 1.0]]), Resolution::PointsPerDim(3), 100, 0);
        let b = PointCloud::over(&BoxSet::union(vec![vec![[5.0, 6.0]], vec![[7.0, 8.0]]]), Resolution::PointsPerDim(2), 100, 0);
        let p = PointCloud::product(&a, &b);
        assert_eq!(p.len(), 12);
        assert_eq!(p.point(0), &[0.0, 5.0]);
        assert_eq!(p.bounds_of(3).bounds, vec![[0.0, 1.0], [7.0, 8.0]]);
    }

    #[test]
    fn refinement_finds_interior_maximum() {
        let b = Cuboid::new(vec![[-2.0, 2.0], [-2.0, 2.0]]);
        let f = |p: &[f64]| -(p[0] - 0.3137).powi(2) - (p[1] + 1.1).powi(2);
        let (x, v) = refine_max(f, &[0.0, 0.0], &b, &[0.5, 0.5], 500);
        assert!((x[0] - 0.3137).abs() < 1e-6 && (x[1] + 1.1).abs() < 1e-6, "{x:?}");
        assert!(v > -1e-10);
    }

    #[test]
    fn split_budget_keeps_outer() {
        assert_eq!(split_budget(1_000_000, 981, 962_361), (981, 1_000_000 / 981));
        assert_eq!(split_budget(1_000_000, 14_641, 14_641), (14_641, 68));
        assert_eq!(split_budget(1_000, 100_000, 100_000), (15, 64));
        assert_eq!(split_budget(100, 5, 5), (5, 5));
    }

    #[test]
    fn top_k_orders_by_value_then_index() {
        assert_eq!(top_k(&[1.0, 3.0, 3.0, f64::NAN, 2.0], 3), vec![1, 2, 4]);
    }
}
