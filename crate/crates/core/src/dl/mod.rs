//! Structured codebooks `W ≈ DΛΓ`: every representative is a combination of
//! at most `alpha` unit-norm atoms from a small dictionary.
//!
//! [`solve`] alternates three exact or greedy block updates (sparse coding
//! per cluster, a coordinate-descent sweep over atoms, nearest-representative
//! reassignment) starting from a k-means based initial solution.

mod omp;
mod solver;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{col, norm};
use crate::model::LayerShape;
use crate::vq::AssignmentMatrix;

pub use omp::{sparse_code_cluster, SparseCode, RANK_THRESHOLD, RESIDUAL_FLOOR};
pub use solver::{
    assignment_update, dictionary_update, dl_approximate, init_solution, objective, solve,
    sparse_coding_update, IterationRecord, SolveTrace, StageTimings,
};

/// Tolerance on `||d_i|| = 1`.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// One column of `Λ` in compressed form.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseColumn {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseColumn {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn coefficient(&self, atom: usize) -> f64 {
        self.indices
            .iter()
            .position(|&i| i as usize == atom)
            .map_or(0.0, |p| self.values[p])
    }

    pub(crate) fn from_code(code: &SparseCode) -> Self {
        Self {
            indices: code.support.iter().map(|&i| i as u32).collect(),
            values: code.coefficients.clone(),
        }
    }

    /// `D λ`
    pub(crate) fn combine(&self, dictionary: &DMatrix<f64>) -> Vec<f64> {
        let mut out = vec![0.0; dictionary.nrows()];
        for (&i, &z) in self.indices.iter().zip(&self.values) {
            for (o, d) in out.iter_mut().zip(col(dictionary, i as usize)) {
                *o += z * d;
            }
        }
        out
    }
}

/// The sparse `L x K` coefficient matrix `Λ`, stored per column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseCodes {
    pub atoms: usize,
    pub columns: Vec<SparseColumn>,
}

impl SparseCodes {
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.atoms, self.columns.len());
        for (k, c) in self.columns.iter().enumerate() {
            for (&i, &v) in c.indices.iter().zip(&c.values) {
                out[(i as usize, k)] = v;
            }
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.columns.iter().map(SparseColumn::nnz).sum()
    }
}

/// Dictionary, sparse codes and assignments for one subspace.
///
/// Values are held in f64; containers store f32
/// (see [`DlCodebook::round_to_storage`]).
#[derive(Debug, Clone, PartialEq)]
pub struct DlCodebook {
    /// `N' x L` with unit-norm columns.
    pub dictionary: DMatrix<f64>,
    pub codes: SparseCodes,
    pub assignments: AssignmentMatrix,
    pub alpha: usize,
    pub shape: LayerShape,
    /// Zero-based subspace index.
    pub subspace: usize,
}

impl DlCodebook {
    /// `K`
    pub fn k(&self) -> usize {
        self.codes.columns.len()
    }

    /// `L`
    pub fn atoms(&self) -> usize {
        self.dictionary.ncols()
    }

    /// `C̃ = DΛ`, the `N' x K` representative matrix.
    pub fn representatives(&self) -> DMatrix<f64> {
        let mut reps = DMatrix::zeros(self.dictionary.nrows(), self.k());
        for (k, c) in self.codes.columns.iter().enumerate() {
            reps.column_mut(k)
                .copy_from_slice(&c.combine(&self.dictionary));
        }
        reps
    }

    /// Rounds dictionary and coefficient values through f32.
    pub fn round_to_storage(&mut self) {
        self.dictionary.apply(|x| *x = f64::from(*x as f32));
        for c in &mut self.codes.columns {
            c.values.iter_mut().for_each(|x| *x = f64::from(*x as f32));
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.atoms();
        if self.codes.atoms != l {
            return Err(Error::ShapeMismatch(format!(
                "codes index {} atoms, dictionary has {l}",
                self.codes.atoms
            )));
        }
        if self.assignments.k() != self.k() || self.assignments.len() != self.shape.columns() {
            return Err(Error::ShapeMismatch(format!(
                "assignments (K={}, len {}) do not fit K={} and shape {}",
                self.assignments.k(),
                self.assignments.len(),
                self.k(),
                self.shape
            )));
        }
        if self.k() == 0 || self.k() > self.shape.columns() {
            return Err(Error::InvalidK {
                k: self.k(),
                max: self.shape.columns(),
            });
        }
        for j in 0..l {
            let n = norm(col(&self.dictionary, j));
            if !((n - 1.0).abs() <= UNIT_NORM_TOL) {
                return Err(Error::InvalidParameter(format!("atom {j} has norm {n}")));
            }
        }
        for (k, c) in self.codes.columns.iter().enumerate() {
            if c.indices.len() != c.values.len() || c.nnz() > self.alpha {
                return Err(Error::InvalidParameter(format!(
                    "code column {k} has {} entries (alpha {})",
                    c.nnz(),
                    self.alpha
                )));
            }
            if c.indices.iter().any(|&i| i as usize >= l) || c.values.iter().any(|v| !v.is_finite())
            {
                return Err(Error::InvalidParameter(format!(
                    "code column {k} is malformed"
                )));
            }
        }
        Ok(())
    }
}
