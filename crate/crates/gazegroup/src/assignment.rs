//! Minimum-cost bipartite assignment.
//!
//! The solver is the O(n^3) potential-based Hungarian method on a square
//! matrix. Rectangular inputs are zero-padded to square; a perfect
//! matching on the padded matrix always contains exactly min(rows, cols)
//! real pairs and the padding contributes zero cost, so the real pairs of
//! the padded optimum are an optimal partial matching of the original
//! matrix, negative entries included.

use thiserror::Error;

use crate::autodiff::Mat;

#[derive(Debug, Error)]
pub enum AssignError {
    #[error("cost matrix has a non-finite entry at ({0}, {1})")]
    NonFinite(usize, usize),
}

fn check_finite(cost: &Mat) -> Result<(), AssignError> {
    for ((i, j), &v) in cost.indexed_iter() {
        if !v.is_finite() {
            return Err(AssignError::NonFinite(i, j));
        }
    }
    Ok(())
}

/// Minimum-cost perfect assignment on a square matrix; `result[row]` is
/// the column given to `row`.
pub fn assign_square(cost: &Mat) -> Result<Vec<usize>, AssignError> {
    let (n, m) = cost.dim();
    assert_eq!(n, m, "assign_square needs a square matrix");
    check_finite(cost)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    // Column n is the virtual root of each augmenting search; p[j] == n
    // marks an unmatched column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![n; n + 1];
    let mut way = vec![n; n + 1];
    for i in 0..n {
        p[n] = i;
        let mut j0 = n;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = n;
            for j in 0..n {
                if !used[j] {
                    let cur = cost[(i0, j)] - u[i0] - v[j];
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
            if p[j0] == n {
                break;
            }
        }
        while j0 != n {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 0..n {
        row_to_col[p[j]] = j;
    }
    Ok(row_to_col)
}

/// Optimal partial matching of a rectangular cost matrix. Returns exactly
/// `min(rows, cols)` pairs sorted by row.
pub fn min_cost_matching(cost: &Mat) -> Result<Vec<(usize, usize)>, AssignError> {
    let (rows, cols) = cost.dim();
    if rows == 0 || cols == 0 {
        check_finite(cost)?;
        return Ok(Vec::new());
    }
    let n = rows.max(cols);
    let mut padded = Mat::zeros((n, n));
    padded.slice_mut(ndarray::s![..rows, ..cols]).assign(cost);
    let assignment = assign_square(&padded)?;
    let mut pairs: Vec<(usize, usize)> = assignment
        .iter()
        .enumerate()
        .filter(|&(r, &c)| r < rows && c < cols)
        .map(|(r, &c)| (r, c))
        .collect();
    pairs.sort_unstable();
    Ok(pairs)
}

pub fn matching_cost(cost: &Mat, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost[(r, c)]).sum()
}
