//! Rectangular linear assignment (Hungarian method with potentials).

use nalgebra::DMatrix;

/// Minimum-cost assignment of every row to a distinct column. Requires
/// `rows <= cols`; returns the column chosen for each row.
///
/// `O(rows^2 * cols)`, shortest augmenting paths with dual potentials.
pub fn solve_min_cost(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let m = cost.ncols();
    assert!(n <= m, "solve_min_cost needs rows <= cols");
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; column 0 is the virtual start of each augmenting path.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
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
    let mut assignment = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Maximum-total-weight one-to-one matching between rows and columns.
///
/// Entries that are not finite or not positive are never selected: they are
/// solved as zero gain (the same as leaving both sides unmatched) and
/// filtered out afterwards. Pairs come back sorted by row.
pub fn max_weight_matching(weights: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let (rows, cols) = weights.shape();
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let gain = |x: f64| if x.is_finite() && x > 0.0 { x } else { 0.0 };
    let transposed = rows > cols;
    let cost = if transposed {
        DMatrix::from_fn(cols, rows, |i, j| -gain(weights[(j, i)]))
    } else {
        DMatrix::from_fn(rows, cols, |i, j| -gain(weights[(i, j)]))
    };
    let assignment = solve_min_cost(&cost);
    let mut pairs: Vec<(usize, usize)> = assignment
        .into_iter()
        .enumerate()
        .map(|(a, b)| if transposed { (b, a) } else { (a, b) })
        .filter(|&(r, c)| gain(weights[(r, c)]) > 0.0)
        .collect();
    pairs.sort_unstable();
    debug_assert!(pairs.iter().all(|&(r, c)| weights[(r, c)].is_finite()));
    pairs
}
