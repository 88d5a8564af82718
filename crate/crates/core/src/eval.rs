//! Quantization error versus acceleration sweeps for VQ and DL codebooks.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dl::{self, dl_approximate};
use crate::error::{Error, Result};
use crate::format::{load_kernels, write_atomic, CodebookContainer, Codebooks};
use crate::model::{
    partition_kernels, quantization_error, ErrorReport, KernelSet, LayerShape, SubspaceMatrix,
    SubspacePartition,
};
use crate::options::{KmeansOptions, SolverOptions};
use crate::planner::{gain_at_equal_error, plan, ratio_f64, AccelPlan};
use crate::vq::{kmeans_cluster, vq_approximate};

/// Low-rank-plus-noise model for stand-in kernels: every kernel vector
/// across channels is `scale·(A z + noise·ε)` with a fixed `N x rank` factor `A`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticKernelSpec {
    pub rank: usize,
    pub noise: f64,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticKernels {
    pub kernels: KernelSet,
    /// Numerical rank of the `N x p²M` matrix of all kernel vectors.
    pub numerical_rank: usize,
    pub full_rank: bool,
}

pub fn generate_synthetic_kernels(
    spec: &SyntheticKernelSpec,
    shape: &LayerShape,
    seed: u64,
) -> Result<SyntheticKernels> {
    shape.validate()?;
    let n = shape.channels;
    if spec.rank == 0 || spec.rank > n {
        return Err(Error::InvalidParameter(format!(
            "rank must be in 1..={n}, got {}",
            spec.rank
        )));
    }
    if !(spec.noise >= 0.0) || !spec.noise.is_finite() || !spec.scale.is_finite() {
        return Err(Error::InvalidParameter(
            "noise must be finite and >= 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inv = 1.0 / (spec.rank as f64).sqrt();
    let factor = DMatrix::<f64>::from_fn(n, spec.rank, |_, _| {
        inv * rng.sample::<f64, _>(StandardNormal)
    });
    let cols = shape.columns();
    let mut vectors = DMatrix::<f64>::zeros(n, cols);
    for j in 0..cols {
        let z: Vec<f64> = (0..spec.rank).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..n {
            let mut x: f64 = (0..spec.rank).map(|r| factor[(i, r)] * z[r]).sum();
            if spec.noise > 0.0 {
                x += spec.noise * rng.sample::<f64, _>(StandardNormal);
            }
            vectors[(i, j)] = spec.scale * x;
        }
    }
    let mut weights = vec![0f32; shape.weight_count()];
    for j in 0..cols {
        let (k, u, v) = shape.column_slot(j);
        for i in 0..n {
            let p = shape.kernel_side;
            weights[((k * n + i) * p + u) * p + v] = vectors[(i, j)] as f32;
        }
    }
    let gram = &vectors * vectors.transpose();
    let eig = gram.symmetric_eigenvalues();
    let top = eig.iter().cloned().fold(0.0, f64::max);
    let numerical_rank = eig
        .iter()
        .filter(|&&l| l > 1e-10 * top && top > 0.0)
        .count();
    Ok(SyntheticKernels {
        kernels: KernelSet::new(*shape, weights)?,
        numerical_rank,
        full_rank: numerical_rank == n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Vq,
    Dl,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Vq => "vq",
            Method::Dl => "dl",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    File(PathBuf),
    Synthetic(SyntheticKernelSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Required for synthetic kernels; checked against the file otherwise.
    #[serde(default)]
    pub shape: Option<LayerShape>,
    #[serde(alias = "Nprime")]
    pub nprime: usize,
    #[serde(alias = "rhoGrid")]
    pub rho_grid: Vec<f64>,
    pub c: f64,
    pub alpha: usize,
    pub seeds: Vec<u64>,
    pub generator: Generator,
    #[serde(default = "both_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub solver: Option<SolverOptions>,
    #[serde(default)]
    pub kmeans: Option<KmeansOptions>,
}

fn both_methods() -> Vec<Method> {
    vec![Method::Vq, Method::Dl]
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rho_grid.is_empty() || self.rho_grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter(
                "rho_grid must be non-empty and strictly increasing".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidParameter("seeds must not be empty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidParameter("methods must not be empty".into()));
        }
        if matches!(self.generator, Generator::Synthetic(_)) && self.shape.is_none() {
            return Err(Error::InvalidParameter(
                "synthetic kernels need a shape".into(),
            ));
        }
        if let Some(s) = &self.solver {
            s.validate()?;
        }
        if let Some(k) = &self.kmeans {
            k.validate()?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One `(method, rho, seed, subspace)` cell; the CSV row schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub rho_target: f64,
    pub rho_achieved: f64,
    pub seed: u64,
    pub subspace: usize,
    pub mse: f64,
    pub relfrob: Option<f64>,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub alpha: usize,
    #[serde(rename = "T_muls")]
    pub t_muls: u64,
}

/// Per-cell values kept out of the CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellDiagnostics {
    pub sq_error: f64,
    pub energy: f64,
    /// DL only: objective of the initial solution and after the last iteration.
    pub dl_objectives: Option<(f64, f64)>,
    pub iterations: usize,
}

/// Layer-level aggregate over subspaces, then over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub rho_target: f64,
    pub rho_achieved: f64,
    pub n_seeds: usize,
    pub relfrob_mean: f64,
    pub relfrob_std: f64,
    pub mse_mean: f64,
    pub mse_std: f64,
    #[serde(rename = "T_muls")]
    pub t_muls: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub relfrob: f64,
    pub gain_percent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub diagnostics: Vec<CellDiagnostics>,
    pub summary: Vec<SummaryRow>,
    /// `None` when only one method ran or the curves could not be compared.
    pub gain: Option<Vec<GainRow>>,
    pub plans: Vec<AccelPlan>,
}

/// Per-seed layer errors: `(relFrob, mse)` with squared errors pooled over subspaces.
pub fn layer_errors(
    rows: &[SweepRow],
    diags: &[CellDiagnostics],
    method: Method,
    rho: f64,
) -> Vec<(u64, f64, f64)> {
    let mut per_seed: Vec<(u64, f64, f64, usize)> = Vec::new();
    for (row, d) in rows.iter().zip(diags) {
        if row.method != method || row.rho_target != rho {
            continue;
        }
        match per_seed.iter_mut().find(|e| e.0 == row.seed) {
            Some(e) => {
                e.1 += d.sq_error;
                e.2 += d.energy;
                e.3 += 1;
            }
            None => per_seed.push((row.seed, d.sq_error, d.energy, 1)),
        }
    }
    per_seed
        .into_iter()
        .map(|(seed, se, en, _)| (seed, if en > 0.0 { (se / en).sqrt() } else { 0.0 }, se))
        .collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub(crate) fn cell_seed(seed: u64, subspace: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (subspace as u64).wrapping_mul(0xd1b5_4a32_d192_ed03)
}

struct Cell<'a> {
    method: Method,
    plan: &'a AccelPlan,
    seed: u64,
    w: &'a SubspaceMatrix,
}

fn run_cell(cell: &Cell, cfg: &SweepConfig) -> Result<(SweepRow, CellDiagnostics)> {
    let p = cell.plan;
    let seed = cell_seed(cell.seed, cell.w.index());
    let (approx, k, l, alpha, t, rho, dl_obj, iterations) = match cell.method {
        Method::Vq => {
            let mut opts = cfg.kmeans.unwrap_or_default();
            opts.seed = seed;
            let (mut cb, trace) = kmeans_cluster(cell.w, p.k_vq, &opts)?;
            cb.round_to_storage();
            (
                vq_approximate(&cb)?,
                p.k_vq,
                0,
                0,
                p.cost.t_vq,
                p.cost.rho_vq,
                None,
                trace.iterations,
            )
        }
        Method::Dl => {
            let mut opts = cfg.solver.unwrap_or_default();
            opts.seed = seed;
            if let Some(k) = cfg.kmeans {
                opts.kmeans = k;
            }
            let (mut cb, trace) = dl::solve(cell.w, p.k_dl, p.l_dl, p.alpha, &opts)?;
            cb.round_to_storage();
            (
                dl_approximate(&cb)?,
                p.k_dl,
                p.l_dl,
                p.alpha,
                p.cost.t_dl,
                p.cost.rho_dl,
                Some((trace.initial, trace.final_objective())),
                trace.iterations.len(),
            )
        }
    };
    let err = quantization_error(cell.w, &approx)?;
    Ok((
        SweepRow {
            method: cell.method,
            rho_target: p.rho_target,
            rho_achieved: ratio_f64(rho),
            seed: cell.seed,
            subspace: cell.w.index(),
            mse: err.mse,
            relfrob: err.rel_frob,
            k,
            l,
            alpha,
            t_muls: t,
        },
        CellDiagnostics {
            sq_error: err.sq_error,
            energy: err.energy,
            dl_objectives: dl_obj,
            iterations,
        },
    ))
}

/// Runs every `(rho, seed, subspace, method)` cell on the current rayon pool.
/// Output order is fixed by the configuration, not by completion order.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let file_kernels = match &cfg.generator {
        Generator::File(path) => {
            let k = load_kernels(path)?;
            if let Some(s) = cfg.shape {
                if s != k.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "config shape {s} but file holds {}",
                        k.shape()
                    )));
                }
            }
            Some(k)
        }
        Generator::Synthetic(_) => None,
    };
    let shape = file_kernels
        .as_ref()
        .map_or_else(|| cfg.shape.unwrap(), |k| k.shape());
    let part = SubspacePartition::with_dim(shape.channels, cfg.nprime)?;
    let plans = cfg
        .rho_grid
        .iter()
        .map(|&rho| plan(&shape, cfg.nprime, rho, cfg.c, cfg.alpha))
        .collect::<Result<Vec<_>>>()?;

    let mut mats: Vec<Vec<SubspaceMatrix>> = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let kernels = match (&cfg.generator, &file_kernels) {
            (_, Some(k)) => k.clone(),
            (Generator::Synthetic(spec), None) => {
                generate_synthetic_kernels(spec, &shape, seed)?.kernels
            }
            (Generator::File(_), None) => unreachable!(),
        };
        mats.push(partition_kernels(&kernels, part)?);
    }

    let mut cells = Vec::new();
    for plan in &plans {
        for (si, &seed) in cfg.seeds.iter().enumerate() {
            for &method in &cfg.methods {
                for w in &mats[si] {
                    cells.push(Cell {
                        method,
                        plan,
                        seed,
                        w,
                    });
                }
            }
        }
    }
    let results = cells
        .par_iter()
        .map(|c| run_cell(c, cfg))
        .collect::<Result<Vec<_>>>()?;
    let (rows, diagnostics): (Vec<_>, Vec<_>) = results.into_iter().unzip();

    let count = (shape.channels * shape.columns()) as f64;
    let mut summary = Vec::new();
    for &method in &cfg.methods {
        for plan in &plans {
            let errs = layer_errors(&rows, &diagnostics, method, plan.rho_target);
            let rel: Vec<f64> = errs.iter().map(|e| e.1).collect();
            let mse: Vec<f64> = errs.iter().map(|e| e.2 / count).collect();
            let (relfrob_mean, relfrob_std) = mean_std(&rel);
            let (mse_mean, mse_std) = mean_std(&mse);
            let (rho, t) = match method {
                Method::Vq => (plan.cost.rho_vq, plan.cost.t_vq),
                Method::Dl => (plan.cost.rho_dl, plan.cost.t_dl),
            };
            summary.push(SummaryRow {
                method,
                rho_target: plan.rho_target,
                rho_achieved: ratio_f64(rho),
                n_seeds: errs.len(),
                relfrob_mean,
                relfrob_std,
                mse_mean,
                mse_std,
                t_muls: t,
            });
        }
    }

    let curve = |m: Method| -> Vec<(f64, f64)> {
        summary
            .iter()
            .filter(|r| r.method == m)
            .map(|r| (r.rho_achieved, r.relfrob_mean))
            .collect()
    };
    let gain = (cfg.methods.contains(&Method::Vq) && cfg.methods.contains(&Method::Dl))
        .then(|| gain_at_equal_error(&curve(Method::Vq), &curve(Method::Dl)).ok())
        .flatten()
        .map(|g| {
            g.into_iter()
                .map(|(relfrob, gain_percent)| GainRow {
                    relfrob,
                    gain_percent,
                })
                .collect()
        });

    Ok(SweepResult {
        rows,
        diagnostics,
        summary,
        gain,
        plans,
    })
}

/// Codebooks for one layer plus the plan and per-subspace iteration counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Compressed {
    pub container: CodebookContainer,
    pub plan: AccelPlan,
    pub iterations: Vec<usize>,
}

/// Plans and clusters every subspace of `kernels`; codebooks are rounded to storage precision.
pub fn compress_layer(
    kernels: &KernelSet,
    method: Method,
    nprime: usize,
    rho: f64,
    c: f64,
    alpha: usize,
    seed: u64,
) -> Result<Compressed> {
    let shape = kernels.shape();
    let p = plan(&shape, nprime, rho, c, alpha)?;
    let part = SubspacePartition::with_dim(shape.channels, nprime)?;
    let mats = partition_kernels(kernels, part)?;
    let (codebooks, iterations) = match method {
        Method::Vq => {
            let res = mats
                .par_iter()
                .map(|w| {
                    let (mut cb, t) = kmeans_cluster(
                        w,
                        p.k_vq,
                        &KmeansOptions::with_seed(cell_seed(seed, w.index())),
                    )?;
                    cb.round_to_storage();
                    Ok((cb, t.iterations))
                })
                .collect::<Result<Vec<_>>>()?;
            let (cbs, its): (Vec<_>, Vec<_>) = res.into_iter().unzip();
            (Codebooks::Vq(cbs), its)
        }
        Method::Dl => {
            let res = mats
                .par_iter()
                .map(|w| {
                    let opts = SolverOptions::with_seed(cell_seed(seed, w.index()));
                    let (mut cb, t) = dl::solve(w, p.k_dl, p.l_dl, p.alpha, &opts)?;
                    cb.round_to_storage();
                    Ok((cb, t.iterations.len()))
                })
                .collect::<Result<Vec<_>>>()?;
            let (cbs, its): (Vec<_>, Vec<_>) = res.into_iter().unzip();
            (Codebooks::Dl(cbs), its)
        }
    };
    Ok(Compressed {
        container: CodebookContainer {
            shape,
            partition: part,
            codebooks,
        },
        plan: p,
        iterations,
    })
}

pub fn approximations(codebooks: &Codebooks) -> Result<Vec<SubspaceMatrix>> {
    match codebooks {
        Codebooks::Vq(v) => v.iter().map(vq_approximate).collect(),
        Codebooks::Dl(v) => v.iter().map(dl_approximate).collect(),
    }
}

/// Per-subspace error of a container against the kernels it was built from.
pub fn container_errors(
    kernels: &KernelSet,
    container: &CodebookContainer,
) -> Result<Vec<ErrorReport>> {
    if kernels.shape() != container.shape {
        return Err(Error::ShapeMismatch(format!(
            "kernels are {} but codebook is for {}",
            kernels.shape(),
            container.shape
        )));
    }
    let mats = partition_kernels(kernels, container.partition)?;
    mats.iter()
        .zip(approximations(&container.codebooks)?)
        .map(|(w, a)| quantization_error(w, &a))
        .collect()
}

/// Squared errors and energies pooled over subspaces: `(mse, relFrob)`.
pub fn pooled_error(reports: &[ErrorReport]) -> (f64, Option<f64>) {
    let sq: f64 = reports.iter().map(|r| r.sq_error).sum();
    let en: f64 = reports.iter().map(|r| r.energy).sum();
    let count: usize = reports.iter().map(|r| r.count).sum();
    (sq / count as f64, (en > 0.0).then(|| (sq / en).sqrt()))
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

impl SweepResult {
    /// Writes `sweep.csv`, `summary.csv` and, when available, `gain.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
            let path = dir.join(name);
            write_atomic(&path, &bytes)?;
            written.push(path);
            Ok(())
        };
        put("sweep.csv", csv_bytes(&self.rows)?)?;
        put("summary.csv", csv_bytes(&self.summary)?)?;
        if let Some(g) = &self.gain {
            put("gain.csv", csv_bytes(g)?)?;
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_ranked() {
        let shape = LayerShape::new(8, 16, 3, 5).unwrap();
        let spec = SyntheticKernelSpec {
            rank: 4,
            noise: 0.0,
            scale: 1.0,
        };
        let a = generate_synthetic_kernels(&spec, &shape, 11).unwrap();
        let b = generate_synthetic_kernels(&spec, &shape, 11).unwrap();
        assert_eq!(a.kernels, b.kernels);
        assert_eq!(a.numerical_rank, 4);
        assert!(!a.full_rank);
        let noisy =
            generate_synthetic_kernels(&SyntheticKernelSpec { noise: 0.1, ..spec }, &shape, 11)
                .unwrap();
        assert!(noisy.full_rank);
    }

    #[test]
    fn synthetic_spec_checks() {
        let shape = LayerShape::new(2, 4, 1, 1).unwrap();
        let bad = SyntheticKernelSpec {
            rank: 5,
            noise: 0.0,
            scale: 1.0,
        };
        assert!(generate_synthetic_kernels(&bad, &shape, 0).is_err());
        let bad = SyntheticKernelSpec {
            rank: 1,
            noise: -1.0,
            scale: 1.0,
        };
        assert!(generate_synthetic_kernels(&bad, &shape, 0).is_err());
    }

    #[test]
    fn config_validation() {
        let json = r#"{"shape":{"M":8,"N":8,"p":1,"m":2},"Nprime":4,"rhoGrid":[4,2],"c":2,"alpha":1,
                       "seeds":[1],"generator":{"synthetic":{"rank":2,"noise":0.1}}}"#;
        let cfg: SweepConfig = serde_json::from_str(json).unwrap();
        assert!(cfg.validate().is_err());
        let cfg = SweepConfig {
            rho_grid: vec![2.0, 4.0],
            ..cfg
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.methods, vec![Method::Vq, Method::Dl]);
        assert!(SweepConfig {
            seeds: vec![],
            ..cfg
        }
        .validate()
        .is_err());
    }

    #[test]
    fn mean_and_spread() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
