use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lloyd iteration controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KmeansOptions {
    pub max_iters: usize,
    /// Stop when the relative loss improvement of an iteration drops below this.
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest final loss wins.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for KmeansOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            restarts: 1,
            seed: 0,
        }
    }
}

impl KmeansOptions {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.restarts == 0 {
            return Err(Error::InvalidParameter(
                "k-means needs max_iters >= 1 and restarts >= 1".into(),
            ));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tol must be > 0, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// Controls for the dictionary-learning solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    /// Reject any sparse-coding update (and any whole stage) that would raise the objective.
    pub omp_guard: bool,
    /// Iterations of plain dictionary learning on the centroids during initialization.
    pub init_iters: usize,
    /// Options for the k-means pass of the initialization.
    pub kmeans: KmeansOptions,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 30,
            tol: 1e-4,
            seed: 0,
            omp_guard: true,
            init_iters: 20,
            kmeans: KmeansOptions::default(),
        }
    }
}

impl SolverOptions {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            kmeans: KmeansOptions::with_seed(seed),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tol must be > 0, got {}",
                self.tol
            )));
        }
        self.kmeans.validate()
    }
}
