//! Earth Mover's Distance between equally sized point sets, solved exactly,
//! plus a differentiable surrogate and farthest point sampling.
//!
//! The distance between sets `A = {a_1..a_n}` and `B = {b_1..b_n}` is the
//! minimum over bijections `phi` of `(1/n) * sum_j ||a_j - b_phi(j)||_2`,
//! found with an `O(n^3)` shortest-augmenting-path assignment solver.
//! [`emd_diff`] rebuilds the same value on an autodiff tape while holding the
//! optimal assignment fixed, which is the correct piecewise derivative
//! everywhere the optimum is unique.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{AdError, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmdError {
    #[error("cost matrix of {got} entries is not {n}x{n}")]
    BadMatrix { got: usize, n: usize },
    #[error("cost matrix has a non-finite entry at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },
    #[error("point sets have different sizes: {a} vs {b}")]
    SizeMismatch { a: usize, b: usize },
    #[error("points have different dimensions: {a} vs {b}")]
    DimMismatch { a: usize, b: usize },
    #[error("point set is empty")]
    Empty,
    #[error("point {index} has a non-finite coordinate")]
    NonFinitePoint { index: usize },
    #[error("selection size {k} not in 1..={n}")]
    BadSelectionSize { k: usize, n: usize },
    #[error("seed index {seed} out of range for {n} points")]
    BadSeedIndex { seed: usize, n: usize },
    #[error("autodiff failure: {0}")]
    Autodiff(#[from] AdError),
}

/// Non-empty list of equal-dimension, finite points stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    dim: usize,
    data: Vec<f64>,
}

impl PointSet {
    pub fn new(points: &[Vec<f64>]) -> Result<Self, EmdError> {
        let first = points.first().ok_or(EmdError::Empty)?;
        let dim = first.len();
        if dim == 0 {
            return Err(EmdError::DimMismatch { a: 0, b: 0 });
        }
        let mut data = Vec::with_capacity(points.len() * dim);
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(EmdError::DimMismatch { a: dim, b: p.len() });
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(EmdError::NonFinitePoint { index: i });
            }
            data.extend_from_slice(p);
        }
        Ok(PointSet {
            dim,
            data,
        })
    }

    /// One-dimensional convenience constructor.
    pub fn from_scalars(xs: &[f64]) -> Result<Self, EmdError> {
        let points: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        Self::new(&points)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    crate::fmath::sqrt(s)
}

/// Minimal-cost bijection between two index sets of equal size.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `perm[i] = j` matches row `i` to column `j`; a permutation of `0..n`.
    pub perm: Vec<usize>,
    /// Total cost under `perm` (sum of the chosen matrix entries).
    pub cost: f64,
}

/// Solves the square assignment problem exactly.
///
/// `costs` is the row-major `n x n` cost matrix; every entry must be finite.
/// Runs the shortest-augmenting-path method with dual potentials in
/// `O(n^3)`. The returned cost is re-accumulated from the original matrix
/// entries in row order.
pub fn solve_assignment(costs: &[f64], n: usize) -> Result<Assignment, EmdError> {
    if n == 0 || costs.len() != n * n {
        return Err(EmdError::BadMatrix {
            got: costs.len(),
            n,
        });
    }
    for (idx, &c) in costs.iter().enumerate() {
        if !c.is_finite() {
            return Err(EmdError::NonFiniteCost {
                row: idx / n,
                col: idx % n,
            });
        }
    }

    // 1-based arrays; index 0 is the sentinel column. `p[j]` holds the row
    // currently assigned to column `j`, `u`/`v` are the dual potentials.
    let a = |i: usize, j: usize| costs[(i - 1) * n + (j - 1)];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    let cost = perm
        .iter()
        .enumerate()
        .map(|(i, &j)| costs[i * n + j])
        .sum();
    Ok(Assignment { perm, cost })
}

/// Optimal matching between two point sets under squared-free Euclidean
/// ground cost. Both sets must have the same size and dimension.
pub fn matched_assignment(a: &PointSet, b: &PointSet) -> Result<Assignment, EmdError> {
    if a.len() != b.len() {
        return Err(EmdError::SizeMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    if a.dim() != b.dim() {
        return Err(EmdError::DimMismatch {
            a: a.dim(),
            b: b.dim(),
        });
    }
    let n = a.len();
    let mut costs = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            costs[i * n + j] = euclidean(a.point(i), b.point(j));
        }
    }
    solve_assignment(&costs, n)
}

/// Earth Mover's Distance between equally sized point sets:
/// `min_phi (1/n) * sum_j ||a_j - b_phi(j)||`.
pub fn emd_sets(a: &PointSet, b: &PointSet) -> Result<f64, EmdError> {
    let asg = matched_assignment(a, b)?;
    Ok(asg.cost / a.len() as f64)
}

/// Differentiable EMD: the value equals [`emd_sets`] on the tensors' current
/// values, and gradients flow into *both* sets' coordinates while the
/// optimal assignment is held fixed.
///
/// Each element of `a` and `b` is one point as a `d x 1` tensor recorded on
/// `tape`. The distance at a coincident pair is 0 with a 0 gradient
/// (minimal-norm subgradient of the norm).
pub fn emd_diff(tape: &Tape, a: &[Tensor], b: &[Tensor]) -> Result<Tensor, EmdError> {
    if a.len() != b.len() {
        return Err(EmdError::SizeMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    if a.is_empty() {
        return Err(EmdError::Empty);
    }
    let pa = PointSet::new(&a.iter().map(|t| t.values()).collect::<Vec<_>>())?;
    let pb = PointSet::new(&b.iter().map(|t| t.values()).collect::<Vec<_>>())?;
    if pa.dim() != pb.dim() {
        return Err(EmdError::DimMismatch {
            a: pa.dim(),
            b: pb.dim(),
        });
    }
    let asg = matched_assignment(&pa, &pb)?;

    let mut total: Option<Tensor> = None;
    for (i, &j) in asg.perm.iter().enumerate() {
        let d = tape.sub(&a[i], &b[j])?;
        let sq = tape.mul(&d, &d)?;
        let ssq = tape.sum_all(&sq)?;
        let dist = tape.sqrt(&ssq)?;
        total = Some(match total {
            None => dist,
            Some(t) => tape.add(&t, &dist)?,
        });
    }
    let total = total.expect("non-empty set");
    Ok(tape.scale(&total, 1.0 / a.len() as f64)?)
}

/// Greedy farthest point sampling.
///
/// Starts from `seed_index` and repeatedly selects the point with the
/// largest distance to the already-selected set (max-min criterion), ties
/// resolved toward the lowest index. Returns `k` distinct indices in
/// selection order.
pub fn fps(points: &PointSet, k: usize, seed_index: usize) -> Result<Vec<usize>, EmdError> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(EmdError::BadSelectionSize { k, n });
    }
    if seed_index >= n {
        return Err(EmdError::BadSeedIndex {
            seed: seed_index,
            n,
        });
    }

    let dist2 = |i: usize, j: usize| {
        let (a, b) = (points.point(i), points.point(j));
        let mut s = 0.0;
        for (x, y) in a.iter().zip(b) {
            let d = x - y;
            s += d * d;
        }
        s
    };

    let mut selected = Vec::with_capacity(k);
    selected.push(seed_index);
    let mut min_d: Vec<f64> = (0..n).map(|i| dist2(i, seed_index)).collect();

    while selected.len() < k {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if !selected.contains(&i) && d > best_d {
                best_d = d;
                best = i;
            }
        }
        selected.push(best);
        for i in 0..n {
            let d = dist2(i, best);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    Ok(selected)
}
