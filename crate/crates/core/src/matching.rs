//! Minimum-cost bipartite assignment of targets to predictions.
//!
//! Row `i` of a [`CostMatrix`] is target `i`, column `j` is prediction `j`.
//! [`hungarian`] solves the square assignment problem in `O(N³)` with
//! shortest augmenting paths and dual potentials, then walks the equality
//! subgraph of the optimal duals to return the lexicographically smallest
//! optimal permutation.

use crate::error::{Error, Result};
use crate::geometry::box_loss;
use crate::labels::LabeledSet;

/// Largest size accepted by [`brute_force_match`].
pub const BRUTE_FORCE_MAX: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::LengthMismatch {
                what: "cost matrix must be square",
                left: n,
                right: bad.len(),
            });
        }
        Ok(CostMatrix {
            n,
            values: rows.into_iter().flatten().collect(),
        })
    }

    pub fn zeros(n: usize) -> Self {
        CostMatrix {
            n,
            values: vec![0.0; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    /// Sum of entries along `sigma`, accumulated in row order.
    pub fn cost_of(&self, sigma: &[usize]) -> f64 {
        sigma.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum()
    }

    fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(k) => Err(Error::NonFiniteCost {
                row: k / self.n,
                col: k % self.n,
            }),
            None => Ok(()),
        }
    }

    fn tie_tolerance(&self) -> f64 {
        let scale = self.values.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        1e-9 * scale
    }
}

/// A perfect assignment: target `i` is matched to prediction `sigma[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub sigma: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn identity(n: usize) -> Self {
        Assignment {
            sigma: (0..n).collect(),
            total_cost: 0.0,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.sigma.len() != n {
            return Err(Error::InvalidAssignment(format!(
                "length {} for {n} targets",
                self.sigma.len()
            )));
        }
        let mut seen = vec![false; n];
        for &j in &self.sigma {
            if j >= n || std::mem::replace(&mut seen[j], true) {
                return Err(Error::InvalidAssignment(format!(
                    "{:?} is not a permutation",
                    self.sigma
                )));
            }
        }
        Ok(())
    }
}

/// Matching cost: zero rows for background targets, otherwise
/// `−⟨p̂_j, p_i⟩ + box_loss(b̂_j, b_i)` with the inner product over all `C + 1` entries.
pub fn build_cost(
    targets: &LabeledSet,
    preds: &LabeledSet,
    gamma_iou: f64,
    gamma_l1: f64,
) -> Result<CostMatrix> {
    let n = targets.len();
    if preds.len() != n {
        return Err(Error::LengthMismatch {
            what: "targets vs predictions",
            left: n,
            right: preds.len(),
        });
    }
    let mut cost = CostMatrix::zeros(n);
    for (i, t) in targets.iter().enumerate() {
        if !t.is_foreground() {
            continue;
        }
        for (j, p) in preds.iter().enumerate() {
            let c = -p.dist.dot(&t.dist) + box_loss(&p.bbox, &t.bbox, gamma_iou, gamma_l1)?;
            cost.set(i, j, c);
        }
    }
    Ok(cost)
}

/// Minimum-cost perfect assignment; lexicographically smallest `sigma` among optima.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    cost.check_finite()?;
    let n = cost.n();
    if n == 0 {
        return Ok(Assignment::identity(0));
    }

    // Shortest augmenting path formulation, 1-based with a virtual column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut col_of = vec![0usize; n];
    let mut row_of_col = vec![0usize; n];
    for j in 1..=n {
        col_of[row_of[j] - 1] = j - 1;
        row_of_col[j - 1] = row_of[j] - 1;
    }

    // Equality subgraph of the optimal duals: every optimal assignment is a
    // perfect matching in it.
    let tol = cost.tie_tolerance();
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| cost.get(i, j) - u[i + 1] - v[j + 1] <= tol)
                .collect()
        })
        .collect();

    let mut fixed = vec![false; n];
    for i in 0..n {
        for &j in &tight[i] {
            if j == col_of[i] {
                break;
            }
            let r = row_of_col[j];
            if fixed[r] {
                continue;
            }
            // Let `i` take `j`; `r` must reach the column `i` releases.
            let target_col = col_of[i];
            let mut visited = vec![false; n];
            visited[j] = true;
            if reroute(r, target_col, i, &tight, &fixed, &mut visited, &mut col_of, &mut row_of_col) {
                col_of[i] = j;
                row_of_col[j] = i;
                break;
            }
        }
        fixed[i] = true;
    }

    let total_cost = cost.cost_of(&col_of);
    Ok(Assignment {
        sigma: col_of,
        total_cost,
    })
}

/// Alternating-path search used to move row `r` off its column while keeping
/// every fixed row in place. On success the matching is updated along the path.
#[allow(clippy::too_many_arguments)]
fn reroute(
    r: usize,
    free_col: usize,
    releasing_row: usize,
    tight: &[Vec<usize>],
    fixed: &[bool],
    visited: &mut [bool],
    col_of: &mut [usize],
    row_of_col: &mut [usize],
) -> bool {
    for &c in &tight[r] {
        if visited[c] {
            continue;
        }
        visited[c] = true;
        let ok = if c == free_col {
            true
        } else {
            let r2 = row_of_col[c];
            r2 != releasing_row
                && !fixed[r2]
                && reroute(r2, free_col, releasing_row, tight, fixed, visited, col_of, row_of_col)
        };
        if ok {
            col_of[r] = c;
            row_of_col[c] = r;
            return true;
        }
    }
    false
}

/// Exhaustive minimum over all `N!` permutations (test oracle).
///
/// Ties within the same tolerance as [`hungarian`] resolve to the first
/// permutation in lexicographic order.
pub fn brute_force_match(cost: &CostMatrix) -> Result<Assignment> {
    cost.check_finite()?;
    let n = cost.n();
    if n > BRUTE_FORCE_MAX {
        return Err(Error::TooLargeForBruteForce {
            n,
            max: BRUTE_FORCE_MAX,
        });
    }
    let mut best = f64::INFINITY;
    for_each_permutation(n, |perm| {
        best = best.min(cost.cost_of(perm));
    });
    let tol = cost.tie_tolerance();
    let mut chosen: Option<Vec<usize>> = None;
    for_each_permutation(n, |perm| {
        if chosen.is_none() && cost.cost_of(perm) <= best + tol {
            chosen = Some(perm.to_vec());
        }
    });
    let sigma = chosen.unwrap_or_default();
    let total_cost = cost.cost_of(&sigma);
    Ok(Assignment { sigma, total_cost })
}

/// Visits permutations of `0..n` in lexicographic order.
fn for_each_permutation(n: usize, mut f: impl FnMut(&[usize])) {
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        f(&perm);
        // next_permutation
        let Some(k) = (0..n.saturating_sub(1)).rev().find(|&k| perm[k] < perm[k + 1]) else {
            return;
        };
        let l = (k + 1..n).rev().find(|&l| perm[k] < perm[l]).expect("pivot exists");
        perm.swap(k, l);
        perm[k + 1..].reverse();
    }
}
