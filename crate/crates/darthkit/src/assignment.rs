//! Linear assignment on dense score matrices.
//!
//! [`max_score_assignment`] is an exact maximum-total-score matching
//! (Hungarian algorithm with potentials, O(n^3)), matching `min(rows, cols)`
//! pairs like the usual rectangular LAP solvers. Callers that allow
//! "unmatched" filter the returned pairs afterwards. [`greedy_assignment`]
//! is the simple best-pair-first heuristic used by the tracker.

use ndarray::Array2;

/// Square minimization core. `cost` must be n x n; returns `row_of_col`,
/// 1-based internally but converted to a col-indexed row vector.
fn hungarian_square_min(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    // Potentials over rows (u) and cols (v); p[j] = row matched to col j.
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
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
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
    let mut row_of_col = vec![usize::MAX; n];
    for j in 1..=n {
        if p[j] != 0 {
            row_of_col[j - 1] = p[j] - 1;
        }
    }
    row_of_col
}

/// Maximum-total-score assignment of a rectangular matrix. Exactly
/// `min(rows, cols)` pairs are returned, sorted by row index.
pub fn max_score_assignment(score: &Array2<f64>) -> Vec<(usize, usize)> {
    let (r, c) = score.dim();
    if r == 0 || c == 0 {
        return Vec::new();
    }
    let n = r.max(c);
    // Pad to square with zero score; minimize the negated score.
    let mut cost = Array2::zeros((n, n));
    for i in 0..r {
        for j in 0..c {
            cost[[i, j]] = -score[[i, j]];
        }
    }
    let row_of_col = hungarian_square_min(&cost);
    let mut pairs: Vec<(usize, usize)> = row_of_col
        .iter()
        .enumerate()
        .filter_map(|(j, &i)| (i < r && j < c).then_some((i, j)))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Total score of the optimal assignment.
pub fn max_score_total(score: &Array2<f64>) -> f64 {
    max_score_assignment(score)
        .into_iter()
        .map(|(i, j)| score[[i, j]])
        .sum()
}

/// Best-pair-first matching: scan all pairs in decreasing score order (ties
/// broken by lower row, then lower column) and take a pair when both sides
/// are still free and the score reaches `min_score`.
pub fn greedy_assignment(score: &Array2<f64>, min_score: f64) -> Vec<(usize, usize)> {
    let (r, c) = score.dim();
    let mut order: Vec<(usize, usize)> = (0..r)
        .flat_map(|i| (0..c).map(move |j| (i, j)))
        .collect();
    order.sort_by(|&a, &b| {
        score[[b.0, b.1]]
            .partial_cmp(&score[[a.0, a.1]])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut row_used = vec![false; r];
    let mut col_used = vec![false; c];
    let mut pairs = Vec::new();
    for (i, j) in order {
        if !row_used[i] && !col_used[j] && score[[i, j]] >= min_score {
            row_used[i] = true;
            col_used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}
