//! Small dense linear algebra for stationary distributions.
//!
//! Matrices here are tiny (4x4 region chains up to ~60x60 degree chains),
//! so plain Gaussian elimination with partial pivoting is plenty. The
//! column convention throughout the crate: entry `(i, j)` is the rate or
//! probability of moving from state `j` to state `i`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square")]
    NotSquare,
    #[error("column {col} sums to {sum}, expected {expected}")]
    BadColumnSum { col: usize, sum: f64, expected: f64 },
    #[error("chain is reducible: closed communicating classes {0:?}")]
    Reducible(Vec<Vec<usize>>),
    #[error("linear system is singular")]
    Singular,
}

/// Row-major square matrix, `mat[i][j]`.
pub type Matrix = Vec<Vec<f64>>;

fn check_square(m: &[Vec<f64>]) -> Result<usize, LinalgError> {
    let n = m.len();
    if m.iter().any(|row| row.len() != n) {
        return Err(LinalgError::NotSquare);
    }
    Ok(n)
}

/// Solve `a x = b` in place via Gaussian elimination with partial pivoting.
pub fn solve(mut a: Matrix, mut b: Vec<f64>) -> Result<Vec<f64>, LinalgError> {
    let n = check_square(&a)?;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&r1, &r2| a[r1][col].abs().total_cmp(&a[r2][col].abs()))
            .ok_or(LinalgError::Singular)?;
        if a[pivot][col].abs() < 1e-300 {
            return Err(LinalgError::Singular);
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// Communicating classes of the directed graph with an edge `j -> i`
/// wherever `mat[i][j] > 0` (off-diagonal), returned with a flag telling
/// whether each class is closed (no edge leaves it).
pub fn communicating_classes(mat: &[Vec<f64>]) -> Result<Vec<(Vec<usize>, bool)>, LinalgError> {
    let n = check_square(mat)?;
    // reach[j] = set of states reachable from j, via BFS
    let mut reach = vec![vec![false; n]; n];
    for start in 0..n {
        let mut stack = vec![start];
        reach[start][start] = true;
        while let Some(j) = stack.pop() {
            for i in 0..n {
                if i != j && mat[i][j] > 0.0 && !reach[start][i] {
                    reach[start][i] = true;
                    stack.push(i);
                }
            }
        }
    }
    let mut assigned = vec![false; n];
    let mut classes = Vec::new();
    for j in 0..n {
        if assigned[j] {
            continue;
        }
        let members: Vec<usize> = (0..n).filter(|&i| reach[j][i] && reach[i][j]).collect();
        for &m in &members {
            assigned[m] = true;
        }
        // closed iff nothing outside the class is reachable from it
        let closed = members
            .iter()
            .all(|&m| (0..n).all(|i| !reach[m][i] || members.contains(&i)));
        classes.push((members, closed));
    }
    Ok(classes)
}

fn closed_classes(mat: &[Vec<f64>]) -> Result<Vec<Vec<usize>>, LinalgError> {
    Ok(communicating_classes(mat)?
        .into_iter()
        .filter(|(_, closed)| *closed)
        .map(|(members, _)| members)
        .collect())
}

/// Stationary distribution of a column-stochastic matrix: the `h` with
/// `T h = h`, `h >= 0`, `sum h = 1`.
///
/// Errors when columns do not sum to 1 (within `col_tol`) or when the
/// chain has more than one closed communicating class, in which case the
/// stationary vector is not unique and the classes are reported.
pub fn stationary_of_stochastic(mat: &[Vec<f64>], col_tol: f64) -> Result<Vec<f64>, LinalgError> {
    let n = check_square(mat)?;
    for col in 0..n {
        let sum: f64 = (0..n).map(|row| mat[row][col]).sum();
        if (sum - 1.0).abs() > col_tol {
            return Err(LinalgError::BadColumnSum {
                col,
                sum,
                expected: 1.0,
            });
        }
    }
    let closed = closed_classes(mat)?;
    if closed.len() != 1 {
        return Err(LinalgError::Reducible(closed));
    }
    // (T - I) h = 0 with the last balance equation replaced by sum h = 1
    let mut a: Matrix = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| mat[i][j] - if i == j { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let mut b = vec![0.0; n];
    a[n - 1] = vec![1.0; n];
    b[n - 1] = 1.0;
    let h = solve(a, b)?;
    Ok(cleanup_distribution(h))
}

/// Stationary distribution of a CTMC generator: the `p` with `Q p = 0`,
/// `p >= 0`, `sum p = 1`. Columns must sum to 0 within `col_tol`.
pub fn stationary_of_generator(mat: &[Vec<f64>], col_tol: f64) -> Result<Vec<f64>, LinalgError> {
    let n = check_square(mat)?;
    for col in 0..n {
        let sum: f64 = (0..n).map(|row| mat[row][col]).sum();
        if sum.abs() > col_tol {
            return Err(LinalgError::BadColumnSum {
                col,
                sum,
                expected: 0.0,
            });
        }
    }
    let closed = closed_classes(mat)?;
    if closed.len() != 1 {
        return Err(LinalgError::Reducible(closed));
    }
    let mut a: Matrix = mat.to_vec();
    let mut b = vec![0.0; n];
    a[n - 1] = vec![1.0; n];
    b[n - 1] = 1.0;
    let p = solve(a, b)?;
    Ok(cleanup_distribution(p))
}

/// Zero out negative round-off dust and renormalize to sum 1.
fn cleanup_distribution(mut v: Vec<f64>) -> Vec<f64> {
    for x in v.iter_mut() {
        if *x < 0.0 && *x > -1e-9 {
            *x = 0.0;
        }
    }
    let total: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= total;
    }
    v
}

/// Total-variation distance between two distributions of equal length.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
