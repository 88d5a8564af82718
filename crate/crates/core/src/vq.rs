//! k-means vector quantization of kernel sub-vectors, `W ≈ CΓ`.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{col, col_mut, nearest, sq_dist};
use crate::model::{LayerShape, SubspaceMatrix};
use crate::options::KmeansOptions;

/// Compact one-hot assignment matrix: column `j` of `Γ` has its single unit
/// entry in row `indices[j]` (zero-based).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentMatrix {
    indices: Vec<u32>,
    k: usize,
}

impl AssignmentMatrix {
    pub fn new(indices: Vec<u32>, k: usize) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= k) {
            return Err(Error::InvalidParameter(format!(
                "assignment {bad} out of range for K={k}"
            )));
        }
        Ok(Self { indices, k })
    }

    pub(crate) fn from_usize(indices: &[usize], k: usize) -> Self {
        Self {
            indices: indices.iter().map(|&i| i as u32).collect(),
            k,
        }
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    #[inline]
    pub fn get(&self, j: usize) -> usize {
        self.indices[j] as usize
    }

    /// Number of representatives `K`.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Member lists `I_i` for every representative, each in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (j, &i) in self.indices.iter().enumerate() {
            out[i as usize].push(j);
        }
        out
    }

    /// Dense `K x p²M` matrix, for checks.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.k, self.indices.len());
        for (j, &i) in self.indices.iter().enumerate() {
            g[(i as usize, j)] = 1.0;
        }
        g
    }
}

/// Centroids `C` (`N' x K`) plus assignments for one subspace.
///
/// Values are held in f64; the on-disk container stores them as f32
/// (see [`VqCodebook::round_to_storage`]).
#[derive(Debug, Clone, PartialEq)]
pub struct VqCodebook {
    pub centroids: DMatrix<f64>,
    pub assignments: AssignmentMatrix,
    pub shape: LayerShape,
    /// Zero-based subspace index.
    pub subspace: usize,
}

impl VqCodebook {
    pub fn k(&self) -> usize {
        self.centroids.ncols()
    }

    /// Rounds every centroid value through f32, matching what a container stores.
    pub fn round_to_storage(&mut self) {
        self.centroids.apply(|x| *x = f64::from(*x as f32));
    }

    pub fn validate(&self) -> Result<()> {
        if self.assignments.k() != self.k() || self.assignments.len() != self.shape.columns() {
            return Err(Error::ShapeMismatch(format!(
                "codebook with K={} and {} assignments does not fit shape {}",
                self.k(),
                self.assignments.len(),
                self.shape
            )));
        }
        if self.k() == 0 || self.k() > self.shape.columns() {
            return Err(Error::InvalidK {
                k: self.k(),
                max: self.shape.columns(),
            });
        }
        if self.centroids.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter("non-finite centroid".into()));
        }
        Ok(())
    }
}

/// Per-run k-means diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KmeansTrace {
    /// `||W - CΓ||_F²` after seeding and after every Lloyd iteration.
    pub loss: Vec<f64>,
    pub iterations: usize,
    /// True when the last iteration changed no assignment.
    pub converged: bool,
}

pub(crate) struct Lloyd {
    pub centroids: DMatrix<f64>,
    pub assignments: Vec<usize>,
    pub trace: KmeansTrace,
}

fn assign_all(points: &DMatrix<f64>, centroids: &DMatrix<f64>) -> (Vec<usize>, Vec<f64>) {
    (0..points.ncols())
        .map(|j| nearest(col(points, j), centroids))
        .unzip()
}

fn kmeans_pp(points: &DMatrix<f64>, k: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let n = points.ncols();
    let mut centroids = DMatrix::zeros(points.nrows(), k);
    let first = rng.random_range(0..n);
    col_mut(&mut centroids, 0).copy_from_slice(col(points, first));
    let mut best: Vec<f64> = (0..n)
        .map(|j| sq_dist(col(points, j), col(&centroids, 0)))
        .collect();
    for c in 1..k {
        let pick = match WeightedIndex::new(&best) {
            Ok(dist) => dist.sample(rng),
            // Every point already coincides with a center.
            Err(_) => rng.random_range(0..n),
        };
        col_mut(&mut centroids, c).copy_from_slice(col(points, pick));
        for (j, b) in best.iter_mut().enumerate() {
            let d = sq_dist(col(points, j), col(&centroids, c));
            if d < *b {
                *b = d;
            }
        }
    }
    centroids
}

/// Recomputes cluster means. An empty cluster is moved onto the point that
/// is currently farthest from its own centroid.
fn update_centroids(points: &DMatrix<f64>, assignments: &[usize], centroids: &mut DMatrix<f64>) {
    let k = centroids.ncols();
    let dim = points.nrows();
    let mut sums = DMatrix::<f64>::zeros(dim, k);
    let mut counts = vec![0usize; k];
    for (j, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, x) in col_mut(&mut sums, a).iter_mut().zip(col(points, j)) {
            *s += x;
        }
    }
    let mut taken = vec![false; points.ncols()];
    for c in 0..k {
        if counts[c] > 0 {
            let inv = counts[c] as f64;
            for (dst, s) in col_mut(centroids, c).iter_mut().zip(col(&sums, c)) {
                *dst = s / inv;
            }
        }
    }
    for c in (0..k).filter(|&c| counts[c] == 0) {
        let mut far = (usize::MAX, -1.0);
        for (j, &a) in assignments.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let d = sq_dist(col(points, j), col(centroids, a));
            if d > far.1 {
                far = (j, d);
            }
        }
        if far.0 != usize::MAX {
            taken[far.0] = true;
            let src = col(points, far.0).to_vec();
            col_mut(centroids, c).copy_from_slice(&src);
        }
    }
}

fn lloyd_once(points: &DMatrix<f64>, k: usize, opts: &KmeansOptions, rng: &mut impl Rng) -> Lloyd {
    let mut centroids = kmeans_pp(points, k, rng);
    let (mut assignments, dists) = assign_all(points, &centroids);
    let mut trace = KmeansTrace {
        loss: vec![dists.iter().sum()],
        ..Default::default()
    };
    for _ in 0..opts.max_iters {
        update_centroids(points, &assignments, &mut centroids);
        let (next, dists) = assign_all(points, &centroids);
        let loss: f64 = dists.iter().sum();
        let prev = *trace.loss.last().unwrap();
        trace.loss.push(loss);
        trace.iterations += 1;
        let changed = next != assignments;
        assignments = next;
        if !changed {
            trace.converged = true;
            break;
        }
        if prev > 0.0 && (prev - loss) / prev < opts.tol {
            break;
        }
    }
    Lloyd {
        centroids,
        assignments,
        trace,
    }
}

/// k-means over the columns of `points` in f64, shared with the DL initializer.
pub(crate) fn lloyd(points: &DMatrix<f64>, k: usize, opts: &KmeansOptions) -> Result<Lloyd> {
    opts.validate()?;
    if k == 0 || k > points.ncols() {
        return Err(Error::InvalidK {
            k,
            max: points.ncols(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<Lloyd> = None;
    for _ in 0..opts.restarts {
        let run = lloyd_once(points, k, opts, &mut rng);
        let better = best
            .as_ref()
            .is_none_or(|b| run.trace.loss.last() < b.trace.loss.last());
        if better {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

/// Clusters the columns of `w` into `k` centroids with seeded k-means++ and Lloyd iterations.
pub fn kmeans_cluster(
    w: &SubspaceMatrix,
    k: usize,
    opts: &KmeansOptions,
) -> Result<(VqCodebook, KmeansTrace)> {
    let fit = lloyd(&w.to_f64(), k, opts)?;
    let codebook = VqCodebook {
        centroids: fit.centroids,
        assignments: AssignmentMatrix::from_usize(&fit.assignments, k),
        shape: w.shape(),
        subspace: w.index(),
    };
    Ok((codebook, fit.trace))
}

/// `CΓ`: column `j` is the centroid assigned to sub-vector `j`.
pub fn vq_approximate(cb: &VqCodebook) -> Result<SubspaceMatrix> {
    cb.validate()?;
    let dim = cb.centroids.nrows();
    let c = cb.centroids.as_slice();
    let mut out = Vec::with_capacity(dim * cb.assignments.len());
    for &a in cb.assignments.indices() {
        let a = a as usize;
        out.extend(c[a * dim..(a + 1) * dim].iter().map(|&x| x as f32));
    }
    SubspaceMatrix::new(
        DMatrix::from_vec(dim, cb.assignments.len(), out),
        cb.shape,
        cb.subspace,
    )
}
