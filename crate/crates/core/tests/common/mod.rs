#![allow(dead_code)]

use kernquant::conv::InputVolume;
use kernquant::{KernelSet, LayerShape, SubspaceMatrix};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_kernels(shape: LayerShape, rng: &mut ChaCha8Rng) -> KernelSet {
    let w = (0..shape.weight_count())
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    KernelSet::new(shape, w).unwrap()
}

pub fn random_volume(channels: usize, side: usize, rng: &mut ChaCha8Rng) -> InputVolume {
    let d = (0..channels * side * side)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    InputVolume::new(channels, side, d).unwrap()
}

/// A single-subspace matrix with `rows x (M)` entries from a `M x rows x 1 x 1` layer.
pub fn random_subspace(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> SubspaceMatrix {
    let shape = LayerShape::new(cols, rows, 1, 1).unwrap();
    let data = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0f32..1.0));
    SubspaceMatrix::new(data, shape, 0).unwrap()
}

/// Clustered points: `centers` random centers, each column a center plus small noise.
pub fn clustered_subspace(
    rows: usize,
    cols: usize,
    centers: usize,
    noise: f32,
    rng: &mut ChaCha8Rng,
) -> SubspaceMatrix {
    let c = DMatrix::from_fn(rows, centers, |_, _| rng.random_range(-1.0f32..1.0));
    let shape = LayerShape::new(cols, rows, 1, 1).unwrap();
    let mut data = DMatrix::zeros(rows, cols);
    for j in 0..cols {
        let k = rng.random_range(0..centers);
        for i in 0..rows {
            data[(i, j)] = c[(i, k)] + noise * rng.random_range(-1.0f32..1.0);
        }
    }
    SubspaceMatrix::new(data, shape, 0).unwrap()
}

/// Same-padded stride-1 cross-correlation, one multiplication per tap, in f64.
pub fn naive_conv(x: &InputVolume, k: &KernelSet, muls: &mut u64) -> Vec<f64> {
    let s = k.shape();
    let (m, p) = (s.input_side as isize, s.kernel_side as isize);
    let h = p / 2;
    let mut out = vec![0.0; s.kernels * s.input_side * s.input_side];
    for kk in 0..s.kernels {
        for r in 0..m {
            for c in 0..m {
                let mut acc = 0.0;
                for i in 0..s.channels {
                    for u in 0..p {
                        for v in 0..p {
                            *muls += 1;
                            let (rr, cc) = (r + u - h, c + v - h);
                            if rr < 0 || cc < 0 || rr >= m || cc >= m {
                                continue;
                            }
                            acc += f64::from(x.get(i, rr as usize, cc as usize))
                                * f64::from(k.get(kk, i, u as usize, v as usize));
                        }
                    }
                }
                out[(kk * s.input_side + r as usize) * s.input_side + c as usize] = acc;
            }
        }
    }
    out
}

/// Smallest `||w - D_S ξ||` over every support of size at most `alpha`.
pub fn best_subset_residual(w: &DVector<f64>, d: &DMatrix<f64>, alpha: usize) -> f64 {
    let l = d.ncols();
    let mut best = w.norm();
    for mask in 1u32..(1 << l) {
        if mask.count_ones() as usize > alpha {
            continue;
        }
        let idx: Vec<usize> = (0..l).filter(|i| mask & (1 << i) != 0).collect();
        let sub = d.select_columns(idx.iter());
        let svd = sub.clone().svd(true, true);
        let xi = svd.solve(w, 1e-12).unwrap();
        best = best.min((w - sub * xi).norm());
    }
    best
}

/// Index of the nearest column of `reps` to `w`, lowest index on ties.
pub fn brute_nearest(w: &[f64], reps: &DMatrix<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for k in 0..reps.ncols() {
        let d: f64 = w
            .iter()
            .enumerate()
            .map(|(i, x)| (x - reps[(i, k)]).powi(2))
            .sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

pub fn column_f64(w: &SubspaceMatrix, j: usize) -> Vec<f64> {
    w.column(j).iter().map(|&x| f64::from(x)).collect()
}
