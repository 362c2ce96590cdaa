//! Maximum-weight bipartite matching (Kuhn-Munkres) over a similarity
//! matrix, plus an exhaustive oracle for small instances.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::matching::SimilarityMatrix;

/// Largest `min(m, n)` accepted by [`brute_force_match`].
pub const BRUTE_FORCE_LIMIT: usize = 8;

/// A one-to-one partial matching between predicted rows and golden columns.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct HardAssignment {
    rows: usize,
    cols: usize,
    /// `(predicted, golden)` pairs sorted by predicted index.
    matches: Vec<(usize, usize)>,
}

impl HardAssignment {
    pub fn new(rows: usize, cols: usize, mut matches: Vec<(usize, usize)>) -> Result<Self> {
        matches.sort_unstable();
        let mut seen_rows = vec![false; rows];
        let mut seen_cols = vec![false; cols];
        for &(i, j) in &matches {
            if i >= rows || j >= cols {
                return Err(Error::Dimension(format!(
                    "match ({i}, {j}) outside {rows}x{cols}"
                )));
            }
            if std::mem::replace(&mut seen_rows[i], true)
                || std::mem::replace(&mut seen_cols[j], true)
            {
                return Err(Error::Validation(format!(
                    "index reused in match ({i}, {j})"
                )));
            }
        }
        Ok(Self {
            rows,
            cols,
            matches,
        })
    }

    pub fn matches(&self) -> &[(usize, usize)] {
        &self.matches
    }

    /// Golden index matched to predicted call `i`, if any.
    pub fn golden_for(&self, i: usize) -> Option<usize> {
        self.matches.iter().find(|(p, _)| *p == i).map(|(_, g)| *g)
    }

    pub fn total_weight(&self, s: &SimilarityMatrix) -> f64 {
        self.matches.iter().map(|&(i, j)| s.get(i, j)).sum()
    }

    /// Binary witness `x_ij`.
    pub fn indicator(&self) -> Array2<u8> {
        let mut x = Array2::zeros((self.rows, self.cols));
        for &(i, j) in &self.matches {
            x[[i, j]] = 1;
        }
        x
    }
}

/// Min-cost perfect assignment on a square matrix (shortest augmenting
/// path with potentials). Returns `col_of_row`.
fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // row_of_col[j] is the 1-based row assigned to column j; 0 is the virtual column
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut col_of_row = vec![0usize; n];
    for j in 1..=n {
        if row_of_col[j] > 0 {
            col_of_row[row_of_col[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// Best total weight over the given rows and columns, using only
/// positive-weight edges.
fn optimal_weight(s: &SimilarityMatrix, rows: &[usize], cols: &[usize]) -> f64 {
    let k = rows.len().max(cols.len());
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    let mut cost = vec![vec![0.0; k]; k];
    for (a, &i) in rows.iter().enumerate() {
        for (b, &j) in cols.iter().enumerate() {
            let w = s.get(i, j);
            if w > 0.0 {
                cost[a][b] = -w;
            }
        }
    }
    min_cost_assignment(&cost)
        .into_iter()
        .enumerate()
        .filter(|&(a, b)| a < rows.len() && b < cols.len())
        .map(|(a, b)| s.get(rows[a], cols[b]).max(0.0))
        .sum()
}

/// Maximum-weight one-to-one matching over edges with `S_ij > 0`.
///
/// Among optimal matchings the lexicographically smallest one is chosen:
/// rows are fixed in order, each taking the lowest golden column that
/// still admits an optimal completion, or staying unmatched otherwise.
/// This costs `O(m * n)` Hungarian solves, which is negligible at trace
/// sizes.
pub fn hungarian_match(s: &SimilarityMatrix) -> HardAssignment {
    let (m, n) = (s.rows(), s.cols());
    let all_rows: Vec<usize> = (0..m).collect();
    let mut free_cols: Vec<usize> = (0..n).collect();
    let total = optimal_weight(s, &all_rows, &free_cols);
    let tol = 1e-12 * (1.0 + total);

    let mut acc = 0.0;
    let mut matches = Vec::new();
    for i in 0..m {
        let rest_rows = &all_rows[i + 1..];
        let chosen = free_cols.iter().position(|&j| {
            let w = s.get(i, j);
            if w <= 0.0 {
                return false;
            }
            let rest_cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != j).collect();
            acc + w + optimal_weight(s, rest_rows, &rest_cols) >= total - tol
        });
        if let Some(pos) = chosen {
            let j = free_cols.remove(pos);
            acc += s.get(i, j);
            matches.push((i, j));
        }
    }
    HardAssignment::new(m, n, matches).expect("matching is one-to-one by construction")
}

/// Exhaustive maximum matched weight over all injective partial mappings
/// restricted to positive edges. Enumerates subsets of the smaller side,
/// so it requires `min(m, n) <= BRUTE_FORCE_LIMIT`.
pub fn brute_force_match(s: &SimilarityMatrix) -> Result<f64> {
    let (m, n) = (s.rows(), s.cols());
    let small = m.min(n);
    if small > BRUTE_FORCE_LIMIT {
        return Err(Error::InstanceTooLarge {
            size: small,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let transpose = m < n;
    let (large, weight): (usize, Box<dyn Fn(usize, usize) -> f64>) = if transpose {
        (n, Box::new(|l, k| s.get(k, l)))
    } else {
        (m, Box::new(|l, k| s.get(l, k)))
    };
    // best[mask]: best weight so far with small-side items in `mask` taken
    let states = 1usize << small;
    let mut best = vec![f64::NEG_INFINITY; states];
    best[0] = 0.0;
    for l in 0..large {
        let mut next = best.clone();
        for (mask, &here) in best.iter().enumerate() {
            if here == f64::NEG_INFINITY {
                continue;
            }
            for k in 0..small {
                if mask & (1 << k) != 0 {
                    continue;
                }
                let w = weight(l, k);
                if w > 0.0 {
                    let to = mask | (1 << k);
                    next[to] = next[to].max(here + w);
                }
            }
        }
        best = next;
    }
    Ok(best.into_iter().fold(0.0, f64::max))
}
