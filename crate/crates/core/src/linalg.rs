//! Small dense helpers over column-major `DMatrix<f64>`.

use nalgebra::{DMatrix, DVector};

#[inline]
pub(crate) fn col(m: &DMatrix<f64>, j: usize) -> &[f64] {
    let n = m.nrows();
    &m.as_slice()[j * n..(j + 1) * n]
}

#[inline]
pub(crate) fn col_mut(m: &mut DMatrix<f64>, j: usize) -> &mut [f64] {
    let n = m.nrows();
    &mut m.as_mut_slice()[j * n..(j + 1) * n]
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Index of the column of `reps` nearest to `w`; ties go to the lowest index.
pub(crate) fn nearest(w: &[f64], reps: &DMatrix<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..reps.ncols() {
        let d = sq_dist(w, col(reps, j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Least-norm solution of `min ||A x - b||` through the eigendecomposition of
/// the normal matrix. Eigenvalues below `threshold · λ_max` are treated as zero.
/// Returns the solution and whether rank deficiency was detected.
pub(crate) fn least_squares(a: &DMatrix<f64>, b: &[f64], threshold: f64) -> (DVector<f64>, bool) {
    let gram = a.transpose() * a;
    let rhs = a.transpose() * DVector::from_column_slice(b);
    let eig = gram.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().cloned().fold(0f64, f64::max);
    let cutoff = threshold * lmax.max(f64::MIN_POSITIVE);
    let mut x = DVector::zeros(a.ncols());
    let mut deficient = false;
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        if lambda <= cutoff {
            deficient = true;
            continue;
        }
        let coef = v.dot(&rhs) / lambda;
        x += v * coef;
    }
    (x, deficient)
}
