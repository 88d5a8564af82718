use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::omp::{column_mean, pursue};
use super::{DlCodebook, SparseCodes, SparseColumn};
use crate::error::{Error, Result};
use crate::linalg::{col, col_mut, nearest, norm, sq_dist};
use crate::model::SubspaceMatrix;
use crate::options::SolverOptions;
use crate::vq::{lloyd, AssignmentMatrix};

/// Objective values after each stage of one outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub after_sparse_coding: f64,
    pub after_dictionary_update: f64,
    pub after_assignment_update: f64,
    pub timings: StageTimings,
}

/// Wall-clock seconds per stage. Informational only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub sparse_coding: f64,
    pub dictionary_update: f64,
    pub assignment_update: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    /// `||W - DΛΓ||_F²` of the initial solution.
    pub initial: f64,
    /// `||C - D₀Λ₀||_F²` left by the dictionary fit on the k-means centroids.
    pub init_centroid_residual: f64,
    pub iterations: Vec<IterationRecord>,
    /// Least-squares refits that met a rank-deficient support.
    pub rank_deficient_fits: usize,
    /// Stages rolled back by the guard because they raised the objective.
    pub reverted_stages: usize,
    /// Stopped on the relative-improvement tolerance rather than the iteration cap.
    pub converged: bool,
}

impl SolveTrace {
    /// Every recorded objective in order: initial, then three per iteration.
    pub fn objectives(&self) -> Vec<f64> {
        std::iter::once(self.initial)
            .chain(self.iterations.iter().flat_map(|r| {
                [
                    r.after_sparse_coding,
                    r.after_dictionary_update,
                    r.after_assignment_update,
                ]
            }))
            .collect()
    }

    pub fn final_objective(&self) -> f64 {
        self.iterations
            .last()
            .map_or(self.initial, |r| r.after_assignment_update)
    }
}

/// Parts of a codebook the solver mutates, free of layer metadata.
#[derive(Clone)]
struct State {
    dictionary: DMatrix<f64>,
    codes: Vec<SparseColumn>,
    assign: Vec<usize>,
}

impl State {
    fn representatives(&self) -> DMatrix<f64> {
        let mut reps = DMatrix::zeros(self.dictionary.nrows(), self.codes.len());
        for (k, c) in self.codes.iter().enumerate() {
            col_mut(&mut reps, k).copy_from_slice(&c.combine(&self.dictionary));
        }
        reps
    }

    fn objective(&self, w: &DMatrix<f64>) -> f64 {
        total_error(w, &self.representatives(), &self.assign)
    }

    fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.codes.len()];
        for (j, &a) in self.assign.iter().enumerate() {
            out[a].push(j);
        }
        out
    }
}

fn total_error(w: &DMatrix<f64>, reps: &DMatrix<f64>, assign: &[usize]) -> f64 {
    assign
        .iter()
        .enumerate()
        .map(|(j, &a)| sq_dist(col(w, j), col(reps, a)))
        .sum()
}

fn cluster_error(w: &DMatrix<f64>, members: &[usize], rep: &[f64]) -> f64 {
    members.iter().map(|&j| sq_dist(col(w, j), rep)).sum()
}

/// Re-codes every non-empty cluster. Returns the number of rank-deficient refits.
fn code_clusters(w: &DMatrix<f64>, state: &mut State, alpha: usize, guard: bool) -> usize {
    let members = state.members();
    let dictionary = &state.dictionary;
    let results: Vec<Option<(SparseColumn, bool)>> = members
        .par_iter()
        .zip(state.codes.par_iter())
        .map(|(idx, old)| {
            if idx.is_empty() {
                return None;
            }
            let mean = column_mean(w, idx.iter().copied());
            let code = pursue(&mean, dictionary, alpha);
            let fresh = SparseColumn::from_code(&code);
            if guard {
                let before = cluster_error(w, idx, &old.combine(dictionary));
                let after = cluster_error(w, idx, &fresh.combine(dictionary));
                if after > before {
                    return None;
                }
            }
            Some((fresh, code.rank_deficient))
        })
        .collect();
    let mut deficient = 0;
    for (slot, r) in state.codes.iter_mut().zip(results) {
        if let Some((fresh, rd)) = r {
            *slot = fresh;
            deficient += usize::from(rd);
        }
    }
    deficient
}

fn fallback_atom(dim: usize, i: usize) -> Vec<f64> {
    let mut e = vec![0.0; dim];
    e[i % dim] = 1.0;
    e
}

/// One coordinate-descent sweep over the atoms in ascending order.
fn update_dictionary(w: &DMatrix<f64>, state: &mut State) {
    let dim = w.nrows();
    let cols = w.ncols();
    let reps = state.representatives();
    let mut residual = w.clone();
    for (j, &a) in state.assign.iter().enumerate() {
        for (e, r) in col_mut(&mut residual, j).iter_mut().zip(col(&reps, a)) {
            *e -= r;
        }
    }
    let mut reseeded = vec![false; cols];
    for i in 0..state.dictionary.ncols() {
        let weights: Vec<(usize, f64)> = state
            .assign
            .iter()
            .enumerate()
            .filter_map(|(j, &a)| {
                let g = state.codes[a].coefficient(i);
                (g != 0.0).then_some((j, g))
            })
            .collect();
        let atom = col(&state.dictionary, i).to_vec();

        // F = E_J + d_i g_J, accumulated straight into F gᵀ
        let mut direction = vec![0.0; dim];
        for &(j, g) in &weights {
            let e = col_mut(&mut residual, j);
            for ((ek, dk), acc) in e.iter_mut().zip(&atom).zip(direction.iter_mut()) {
                *ek += dk * g;
                *acc += *ek * g;
            }
        }
        let len = norm(&direction);
        let fresh = if weights.is_empty() || !(len > 0.0) {
            replacement_atom(w, &residual, &mut reseeded, i)
        } else {
            direction.iter().map(|x| x / len).collect()
        };
        for &(j, g) in &weights {
            for (ek, dk) in col_mut(&mut residual, j).iter_mut().zip(&fresh) {
                *ek -= dk * g;
            }
        }
        col_mut(&mut state.dictionary, i).copy_from_slice(&fresh);
    }
}

/// The normalized column of `W` with the largest current residual.
fn replacement_atom(
    w: &DMatrix<f64>,
    residual: &DMatrix<f64>,
    taken: &mut [bool],
    i: usize,
) -> Vec<f64> {
    let mut worst: Option<(usize, f64)> = None;
    for j in (0..w.ncols()).filter(|&j| !taken[j]) {
        let r = norm(col(residual, j));
        if worst.is_none_or(|(_, best)| r > best) {
            worst = Some((j, r));
        }
    }
    if let Some((j, _)) = worst {
        taken[j] = true;
        let n = norm(col(w, j));
        if n > 0.0 {
            return col(w, j).iter().map(|x| x / n).collect();
        }
    }
    fallback_atom(w.nrows(), i)
}

fn assign_nearest(w: &DMatrix<f64>, reps: &DMatrix<f64>) -> Vec<usize> {
    (0..w.ncols())
        .into_par_iter()
        .map(|j| nearest(col(w, j), reps).0)
        .collect()
}

/// Gives each empty cluster a new code fitted to the worst-served column
/// (taken only from clusters with at least two members) and moves that column
/// over when the new representative is strictly closer.
fn reseed_empty(w: &DMatrix<f64>, state: &mut State, alpha: usize) -> usize {
    let k = state.codes.len();
    let mut counts = vec![0usize; k];
    for &a in &state.assign {
        counts[a] += 1;
    }
    if counts.iter().all(|&c| c > 0) {
        return 0;
    }
    let reps = state.representatives();
    let mut dists: Vec<f64> = state
        .assign
        .iter()
        .enumerate()
        .map(|(j, &a)| sq_dist(col(w, j), col(&reps, a)))
        .collect();
    let mut taken = vec![false; w.ncols()];
    let mut deficient = 0;
    for i in 0..k {
        if counts[i] > 0 {
            continue;
        }
        let mut worst: Option<(usize, f64)> = None;
        for j in 0..w.ncols() {
            if taken[j] || counts[state.assign[j]] < 2 {
                continue;
            }
            if worst.is_none_or(|(_, d)| dists[j] > d) {
                worst = Some((j, dists[j]));
            }
        }
        let Some((j, dist)) = worst else { break };
        taken[j] = true;
        let code = pursue(col(w, j), &state.dictionary, alpha);
        deficient += usize::from(code.rank_deficient);
        let fresh = SparseColumn::from_code(&code);
        let rep = fresh.combine(&state.dictionary);
        let d = sq_dist(col(w, j), &rep);
        state.codes[i] = fresh;
        if d < dist {
            counts[state.assign[j]] -= 1;
            counts[i] += 1;
            state.assign[j] = i;
            dists[j] = d;
        }
    }
    deficient
}

fn check_params(cols: usize, k_dl: usize, l_dl: usize, alpha: usize) -> Result<()> {
    if k_dl == 0 || k_dl > cols {
        return Err(Error::InvalidK { k: k_dl, max: cols });
    }
    if l_dl == 0 {
        return Err(Error::InvalidParameter(
            "dictionary size must be >= 1".into(),
        ));
    }
    if alpha == 0 || alpha > l_dl {
        return Err(Error::InvalidParameter(format!(
            "sparsity must be in 1..={l_dl}, got {alpha}"
        )));
    }
    Ok(())
}

fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

struct Initial {
    state: State,
    centroid_residual: f64,
    rank_deficient: usize,
}

fn initialize(
    w: &DMatrix<f64>,
    k_dl: usize,
    l_dl: usize,
    alpha: usize,
    opts: &SolverOptions,
) -> Result<Initial> {
    let dim = w.nrows();
    let mut kopts = opts.kmeans;
    kopts.seed = opts.seed;
    let centroids = lloyd(w, k_dl, &kopts)?.centroids;

    // Starting dictionary: normalized centroids drawn at random, padded with
    // random directions when there are fewer centroids than atoms.
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_d1c7_0000_0001);
    let picks = index::sample(&mut rng, k_dl, l_dl.min(k_dl)).into_vec();
    let mut dictionary = DMatrix::zeros(dim, l_dl);
    for i in 0..l_dl {
        let atom = match picks.get(i) {
            Some(&c) if norm(col(&centroids, c)) > 0.0 => {
                let n = norm(col(&centroids, c));
                col(&centroids, c).iter().map(|x| x / n).collect()
            }
            _ => random_unit(dim, &mut rng),
        };
        col_mut(&mut dictionary, i).copy_from_slice(&atom);
    }

    let identity: Vec<usize> = (0..k_dl).collect();
    let mut fit = State {
        dictionary,
        codes: vec![SparseColumn::default(); k_dl],
        assign: identity,
    };
    let mut deficient = code_clusters(&centroids, &mut fit, alpha, false);
    for _ in 0..opts.init_iters {
        update_dictionary(&centroids, &mut fit);
        deficient += code_clusters(&centroids, &mut fit, alpha, opts.omp_guard);
    }
    let centroid_residual = fit.objective(&centroids);

    let reps = fit.representatives();
    let state = State {
        assign: assign_nearest(w, &reps),
        dictionary: fit.dictionary,
        codes: fit.codes,
    };
    Ok(Initial {
        state,
        centroid_residual,
        rank_deficient: deficient,
    })
}

fn into_codebook(state: State, alpha: usize, w: &SubspaceMatrix) -> DlCodebook {
    let k = state.codes.len();
    DlCodebook {
        codes: SparseCodes {
            atoms: state.dictionary.ncols(),
            columns: state.codes,
        },
        dictionary: state.dictionary,
        assignments: AssignmentMatrix::from_usize(&state.assign, k),
        alpha,
        shape: w.shape(),
        subspace: w.index(),
    }
}

fn from_codebook(cb: &DlCodebook, w: &SubspaceMatrix) -> Result<State> {
    cb.validate()?;
    if cb.dictionary.nrows() != w.dim() || cb.shape != w.shape() {
        return Err(Error::ShapeMismatch(format!(
            "codebook for {}x{} does not fit subspace matrix {}x{}",
            cb.dictionary.nrows(),
            cb.shape.columns(),
            w.dim(),
            w.ncols()
        )));
    }
    Ok(State {
        dictionary: cb.dictionary.clone(),
        codes: cb.codes.columns.clone(),
        assign: (0..cb.assignments.len())
            .map(|j| cb.assignments.get(j))
            .collect(),
    })
}

/// `||W - DΛΓ||_F²`
pub fn objective(w: &SubspaceMatrix, cb: &DlCodebook) -> Result<f64> {
    Ok(from_codebook(cb, w)?.objective(&w.to_f64()))
}

/// Initial codebook: k-means into `k_dl` clusters, a sparse dictionary fit of
/// the centroids, then nearest-representative assignment of every column.
pub fn init_solution(
    w: &SubspaceMatrix,
    k_dl: usize,
    l_dl: usize,
    alpha: usize,
    opts: &SolverOptions,
) -> Result<DlCodebook> {
    opts.validate()?;
    check_params(w.ncols(), k_dl, l_dl, alpha)?;
    let init = initialize(&w.to_f64(), k_dl, l_dl, alpha, opts)?;
    Ok(into_codebook(init.state, alpha, w))
}

/// Re-codes every non-empty cluster by orthogonal matching pursuit.
pub fn sparse_coding_update(
    w: &SubspaceMatrix,
    cb: &DlCodebook,
    guard: bool,
) -> Result<DlCodebook> {
    let mut state = from_codebook(cb, w)?;
    code_clusters(&w.to_f64(), &mut state, cb.alpha, guard);
    Ok(into_codebook(state, cb.alpha, w))
}

/// One sweep of per-atom coordinate descent; `Λ` and `Γ` are unchanged.
pub fn dictionary_update(w: &SubspaceMatrix, cb: &DlCodebook) -> Result<DlCodebook> {
    let mut state = from_codebook(cb, w)?;
    update_dictionary(&w.to_f64(), &mut state);
    Ok(into_codebook(state, cb.alpha, w))
}

/// Assigns every column to its nearest representative (ties to the lowest index).
pub fn assignment_update(w: &SubspaceMatrix, cb: &DlCodebook) -> Result<AssignmentMatrix> {
    from_codebook(cb, w)?;
    let assign = assign_nearest(&w.to_f64(), &cb.representatives());
    Ok(AssignmentMatrix::from_usize(&assign, cb.k()))
}

/// Runs the full alternating minimization from [`init_solution`].
pub fn solve(
    w: &SubspaceMatrix,
    k_dl: usize,
    l_dl: usize,
    alpha: usize,
    opts: &SolverOptions,
) -> Result<(DlCodebook, SolveTrace)> {
    opts.validate()?;
    check_params(w.ncols(), k_dl, l_dl, alpha)?;
    let data = w.to_f64();
    let init = initialize(&data, k_dl, l_dl, alpha, opts)?;
    let mut state = init.state;
    let mut current = state.objective(&data);
    let mut trace = SolveTrace {
        initial: current,
        init_centroid_residual: init.centroid_residual,
        rank_deficient_fits: init.rank_deficient,
        ..Default::default()
    };

    // Applies one stage; with the guard on, a stage that raises the objective is undone.
    let run_stage = |state: &mut State,
                     current: &mut f64,
                     trace: &mut SolveTrace,
                     f: &dyn Fn(&mut State) -> usize| {
        let start = Instant::now();
        let backup = opts.omp_guard.then(|| state.clone());
        trace.rank_deficient_fits += f(state);
        let value = state.objective(&data);
        match backup {
            Some(prev) if value > *current => {
                *state = prev;
                trace.reverted_stages += 1;
            }
            _ => *current = value,
        }
        (*current, start.elapsed().as_secs_f64())
    };

    for _ in 0..opts.max_iters {
        let before = current;
        let (after_sc, t_sc) = run_stage(&mut state, &mut current, &mut trace, &|s| {
            code_clusters(&data, s, alpha, opts.omp_guard)
        });
        let (after_du, t_du) = run_stage(&mut state, &mut current, &mut trace, &|s| {
            update_dictionary(&data, s);
            0
        });
        let (after_au, t_au) = run_stage(&mut state, &mut current, &mut trace, &|s| {
            s.assign = assign_nearest(&data, &s.representatives());
            reseed_empty(&data, s, alpha)
        });
        trace.iterations.push(IterationRecord {
            after_sparse_coding: after_sc,
            after_dictionary_update: after_du,
            after_assignment_update: after_au,
            timings: StageTimings {
                sparse_coding: t_sc,
                dictionary_update: t_du,
                assignment_update: t_au,
            },
        });
        if before <= 0.0 || (before - current) / before < opts.tol {
            trace.converged = true;
            break;
        }
    }
    Ok((into_codebook(state, alpha, w), trace))
}

/// `DΛΓ`: column `j` is the representative assigned to sub-vector `j`.
pub fn dl_approximate(cb: &DlCodebook) -> Result<SubspaceMatrix> {
    cb.validate()?;
    let reps = cb.representatives();
    let dim = reps.nrows();
    let mut out = Vec::with_capacity(dim * cb.assignments.len());
    for &a in cb.assignments.indices() {
        out.extend(col(&reps, a as usize).iter().map(|&x| x as f32));
    }
    SubspaceMatrix::new(
        DMatrix::from_vec(dim, cb.assignments.len(), out),
        cb.shape,
        cb.subspace,
    )
}
