//! Orthogonal matching pursuit for one cluster of sub-vectors.
//!
//! The cluster objective `||W_I - (Dζ)1ᵀ||_F²` separates into the spread of
//! the cluster around its mean `w̄` plus `|I|·||w̄ - Dζ||²`, so greedy
//! selection and the least-squares refits only ever see `w̄`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{col, dot, least_squares, norm};

/// Relative eigenvalue cutoff for the normal equations of a support.
pub const RANK_THRESHOLD: f64 = 1e-10;

/// Residual norm of the cluster mean below which pursuit stops early.
pub const RESIDUAL_FLOOR: f64 = 1e-12;

/// Result of coding one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    /// Selected atoms in selection order.
    pub support: Vec<usize>,
    /// Coefficients aligned with `support`.
    pub coefficients: Vec<f64>,
    /// `||w̄ - Dζ||` after the final refit.
    pub residual_norm: f64,
    /// Some refit hit linearly dependent atoms and fell back to the least-norm solution.
    pub rank_deficient: bool,
}

impl SparseCode {
    /// Dense coefficient vector of length `atoms`.
    pub fn to_dense(&self, atoms: usize) -> Vec<f64> {
        let mut z = vec![0.0; atoms];
        for (&i, &c) in self.support.iter().zip(&self.coefficients) {
            z[i] = c;
        }
        z
    }
}

/// Greedy `alpha`-sparse approximation of `target` over the columns of `dictionary`.
pub(crate) fn pursue(target: &[f64], dictionary: &DMatrix<f64>, alpha: usize) -> SparseCode {
    let atoms = dictionary.ncols();
    let mut support: Vec<usize> = Vec::with_capacity(alpha);
    let mut coefficients = Vec::new();
    let mut residual = target.to_vec();
    let mut rank_deficient = false;
    for _ in 0..alpha.min(atoms) {
        if norm(&residual) < RESIDUAL_FLOOR {
            break;
        }
        let mut pick: Option<(usize, f64)> = None;
        for j in (0..atoms).filter(|j| !support.contains(j)) {
            let c = dot(&residual, col(dictionary, j)).abs();
            if pick.is_none_or(|(_, best)| c > best) {
                pick = Some((j, c));
            }
        }
        let Some((k, corr)) = pick else { break };
        if corr == 0.0 {
            break;
        }
        support.push(k);
        let sub = dictionary.select_columns(support.iter());
        let (xi, deficient) = least_squares(&sub, target, RANK_THRESHOLD);
        rank_deficient |= deficient;
        coefficients = xi.iter().copied().collect();
        residual.copy_from_slice(target);
        for (&s, &z) in support.iter().zip(&coefficients) {
            for (r, d) in residual.iter_mut().zip(col(dictionary, s)) {
                *r -= z * d;
            }
        }
    }
    SparseCode {
        support,
        coefficients,
        residual_norm: norm(&residual),
        rank_deficient,
    }
}

/// Column mean of `cluster`.
pub(crate) fn column_mean(
    cluster: &DMatrix<f64>,
    members: impl ExactSizeIterator<Item = usize>,
) -> Vec<f64> {
    let count = members.len() as f64;
    let mut mean = vec![0.0; cluster.nrows()];
    for j in members {
        for (m, x) in mean.iter_mut().zip(col(cluster, j)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    mean
}

/// Sparse-codes one cluster `W_I` (columns are its members) with at most `alpha` atoms.
pub fn sparse_code_cluster(
    cluster: &DMatrix<f64>,
    dictionary: &DMatrix<f64>,
    alpha: usize,
) -> Result<SparseCode> {
    if cluster.ncols() == 0 {
        return Err(Error::InvalidParameter(
            "cannot code an empty cluster".into(),
        ));
    }
    if cluster.nrows() != dictionary.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "cluster rows {} vs dictionary rows {}",
            cluster.nrows(),
            dictionary.nrows()
        )));
    }
    if alpha > dictionary.ncols() {
        return Err(Error::InvalidParameter(format!(
            "sparsity {alpha} exceeds dictionary size {}",
            dictionary.ncols()
        )));
    }
    let mean = column_mean(cluster, 0..cluster.ncols());
    Ok(pursue(&mean, dictionary, alpha))
}
