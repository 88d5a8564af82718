//! Three evaluations of one convolutional layer (stride 1, zero "same"
//! padding, cross-correlation):
//!
//! * [`conv_direct`]: every input position against every kernel sub-vector,
//! * [`conv_vq`]: input against the centroids `C`, then scattered through `Γ`,
//! * [`conv_dl`]: input against the atoms `D`, combined through `Λ`, then scattered through `Γ`.
//!
//! All three compute the dot products of each input sub-vector with a set of
//! weight vectors at all `m²` positions and then add each product into the
//! output cells it contributes to. Multiplications are counted as they are
//! executed; the counts equal the closed forms in [`crate::planner`].

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dl::DlCodebook;
use crate::error::{Error, Result};
use crate::linalg::{col, dot};
use crate::model::{KernelSet, LayerShape, SubspacePartition};
use crate::vq::VqCodebook;

/// Scalar multiplication counter, safe to share across worker threads.
///
/// `total` follows the closed-form accounting (the DL combination stage is
/// charged `alpha` multiplications per representative); `actual` counts the
/// multiplications that were really needed.
#[derive(Debug, Default)]
pub struct MulCounter {
    total: AtomicU64,
    actual: AtomicU64,
}

impl MulCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.add_charged(n, n);
    }

    pub fn add_charged(&self, charged: u64, actual: u64) {
        self.total.fetch_add(charged, Ordering::Relaxed);
        self.actual.fetch_add(actual, Ordering::Relaxed);
    }

    pub fn total(&self) -> u64 {
        self.total.load(Ordering::Relaxed)
    }

    pub fn actual(&self) -> u64 {
        self.actual.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.total.store(0, Ordering::Relaxed);
        self.actual.store(0, Ordering::Relaxed);
    }
}

/// Input volume `[channel][row][col]`, `N x m x m`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputVolume {
    channels: usize,
    side: usize,
    data: Vec<f32>,
}

impl InputVolume {
    pub fn new(channels: usize, side: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || side == 0 || data.len() != channels * side * side {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {channels}x{side}x{side} volume",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("non-finite input value".into()));
        }
        Ok(Self {
            channels,
            side,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, r: usize, c: usize) -> f32 {
        self.data[(i * self.side + r) * self.side + c]
    }

    /// `N' x m²` matrix of input sub-vectors for channels `first..first+dim`;
    /// column `r·m + c` holds position `(r, c)`.
    fn patch_matrix(&self, first: usize, dim: usize) -> DMatrix<f64> {
        let m = self.side;
        DMatrix::from_fn(dim, m * m, |row, pos| {
            f64::from(self.get(first + row, pos / m, pos % m))
        })
    }
}

/// Output volume `[kernel][row][col]`, `M x m x m`, kept at accumulation precision.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputVolume {
    kernels: usize,
    side: usize,
    data: Vec<f64>,
}

impl OutputVolume {
    pub fn kernels(&self) -> usize {
        self.kernels
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, k: usize, r: usize, c: usize) -> f64 {
        self.data[(k * self.side + r) * self.side + c]
    }

    /// `max |a - b| / max |b|` with `other` as the reference.
    pub fn max_relative_deviation(&self, reference: &OutputVolume) -> Result<f64> {
        if self.kernels != reference.kernels || self.side != reference.side {
            return Err(Error::ShapeMismatch(
                "output volumes differ in shape".into(),
            ));
        }
        let scale = reference.data.iter().map(|x| x.abs()).fold(0.0, f64::max);
        let diff = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        Ok(if scale > 0.0 { diff / scale } else { diff })
    }
}

fn check_input(x: &InputVolume, shape: &LayerShape) -> Result<()> {
    shape.validate()?;
    if x.channels != shape.channels || x.side != shape.input_side {
        return Err(Error::ShapeMismatch(format!(
            "input volume {}x{}x{} does not fit layer {shape}",
            x.channels, x.side, x.side
        )));
    }
    Ok(())
}

/// Adds `scores[pos, rep(j)]` into every output cell that kernel slot `j`
/// reaches from input position `pos`.
fn scatter(
    shape: &LayerShape,
    scores: &DMatrix<f64>,
    rep: impl Fn(usize) -> usize,
    out: &mut [f64],
) {
    let m = shape.input_side as isize;
    let half = (shape.kernel_side / 2) as isize;
    for j in 0..shape.columns() {
        let (k, u, v) = shape.column_slot(j);
        let r = rep(j);
        let base = k * shape.input_side * shape.input_side;
        // output (i, jj) reads input (i + u - half, jj + v - half)
        for n in 0..m {
            let i = n - u as isize + half;
            if i < 0 || i >= m {
                continue;
            }
            for l in 0..m {
                let jj = l - v as isize + half;
                if jj < 0 || jj >= m {
                    continue;
                }
                out[base + (i * m + jj) as usize] += scores[((n * m + l) as usize, r)];
            }
        }
    }
}

/// `XᵀA` for the columns of `weights`, counting `N'` multiplications per dot product.
fn project(patches: &DMatrix<f64>, weights: &DMatrix<f64>, counter: &MulCounter) -> DMatrix<f64> {
    let positions = patches.ncols();
    let dim = patches.nrows() as u64;
    let mut scores = DMatrix::zeros(positions, weights.ncols());
    for r in 0..weights.ncols() {
        let w = col(weights, r);
        for pos in 0..positions {
            scores[(pos, r)] = dot(col(patches, pos), w);
        }
        counter.add(dim * positions as u64);
    }
    scores
}

fn finish(shape: &LayerShape, partials: Vec<Vec<f64>>) -> OutputVolume {
    let mut acc = vec![0f64; shape.kernels * shape.input_side * shape.input_side];
    for part in partials {
        for (a, p) in acc.iter_mut().zip(part) {
            *a += p;
        }
    }
    OutputVolume {
        kernels: shape.kernels,
        side: shape.input_side,
        data: acc,
    }
}

/// Exact layer: `m²·p²·M·N` multiplications.
pub fn conv_direct(
    x: &InputVolume,
    kernels: &KernelSet,
    counter: &MulCounter,
) -> Result<OutputVolume> {
    let shape = kernels.shape();
    check_input(x, &shape)?;
    let patches = x.patch_matrix(0, shape.channels);
    let weights = DMatrix::from_fn(shape.channels, shape.columns(), |i, j| {
        let (k, u, v) = shape.column_slot(j);
        f64::from(kernels.get(k, i, u, v))
    });
    let scores = project(&patches, &weights, counter);
    let mut out = vec![0f64; shape.kernels * shape.input_side * shape.input_side];
    scatter(&shape, &scores, |j| j, &mut out);
    Ok(finish(&shape, vec![out]))
}

fn check_subspaces(shape: &LayerShape, part: &SubspacePartition, count: usize) -> Result<()> {
    if part.channels() != shape.channels || count != part.count() {
        return Err(Error::ShapeMismatch(format!(
            "{count} codebooks for {} subspaces of a {}-channel layer",
            part.count(),
            shape.channels
        )));
    }
    Ok(())
}

/// VQ path: `S·m²·N'·K_vq` multiplications.
pub fn conv_vq(
    x: &InputVolume,
    shape: &LayerShape,
    part: &SubspacePartition,
    codebooks: &[VqCodebook],
    counter: &MulCounter,
) -> Result<OutputVolume> {
    check_input(x, shape)?;
    check_subspaces(shape, part, codebooks.len())?;
    for cb in codebooks {
        cb.validate()?;
        if cb.shape != *shape || cb.centroids.nrows() != part.dim() {
            return Err(Error::ShapeMismatch(format!(
                "VQ codebook for subspace {} does not fit layer {shape}",
                cb.subspace
            )));
        }
    }
    let partials = codebooks
        .par_iter()
        .enumerate()
        .map(|(s, cb)| {
            let patches = x.patch_matrix(s * part.dim(), part.dim());
            let scores = project(&patches, &cb.centroids, counter);
            let mut out = vec![0f64; shape.kernels * shape.input_side * shape.input_side];
            scatter(shape, &scores, |j| cb.assignments.get(j), &mut out);
            out
        })
        .collect();
    Ok(finish(shape, partials))
}

/// DL path: `m²·(N·L_dl + α·S·K_dl)` multiplications charged.
pub fn conv_dl(
    x: &InputVolume,
    shape: &LayerShape,
    part: &SubspacePartition,
    codebooks: &[DlCodebook],
    counter: &MulCounter,
) -> Result<OutputVolume> {
    check_input(x, shape)?;
    check_subspaces(shape, part, codebooks.len())?;
    for cb in codebooks {
        cb.validate()?;
        if cb.shape != *shape || cb.dictionary.nrows() != part.dim() {
            return Err(Error::ShapeMismatch(format!(
                "DL codebook for subspace {} does not fit layer {shape}",
                cb.subspace
            )));
        }
    }
    let positions = shape.input_side * shape.input_side;
    let partials = codebooks
        .par_iter()
        .enumerate()
        .map(|(s, cb)| {
            let patches = x.patch_matrix(s * part.dim(), part.dim());
            let atom_scores = project(&patches, &cb.dictionary, counter);
            let mut scores = DMatrix::zeros(positions, cb.k());
            for (r, code) in cb.codes.columns.iter().enumerate() {
                for pos in 0..positions {
                    scores[(pos, r)] = code
                        .indices
                        .iter()
                        .zip(&code.values)
                        .map(|(&i, &z)| z * atom_scores[(pos, i as usize)])
                        .sum();
                }
                counter.add_charged(
                    (cb.alpha * positions) as u64,
                    (code.nnz() * positions) as u64,
                );
            }
            let mut out = vec![0f64; shape.kernels * positions];
            scatter(shape, &scores, |j| cb.assignments.get(j), &mut out);
            out
        })
        .collect();
    Ok(finish(shape, partials))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::cost_original;

    #[test]
    fn pointwise_kernel_scales_input() {
        let shape = LayerShape::new(1, 1, 1, 3).unwrap();
        let k = KernelSet::new(shape, vec![2.5]).unwrap();
        let x = InputVolume::new(1, 3, (0..9).map(|v| v as f32).collect()).unwrap();
        let c = MulCounter::new();
        let y = conv_direct(&x, &k, &c).unwrap();
        assert_eq!(
            y.data(),
            x.data()
                .iter()
                .map(|&v| f64::from(v) * 2.5)
                .collect::<Vec<_>>()
        );
        assert_eq!(c.total(), cost_original(&shape));
    }

    #[test]
    fn delta_kernel_sums_channels() {
        let shape = LayerShape::new(2, 3, 3, 4).unwrap();
        let mut w = vec![0f32; shape.weight_count()];
        for k in 0..2 {
            for i in 0..3 {
                w[((k * 3 + i) * 3 + 1) * 3 + 1] = 1.0;
            }
        }
        let kernels = KernelSet::new(shape, w).unwrap();
        let x = InputVolume::new(3, 4, (0..48).map(|v| (v as f32) * 0.5 - 3.0).collect()).unwrap();
        let c = MulCounter::new();
        let y = conv_direct(&x, &kernels, &c).unwrap();
        for k in 0..2 {
            for r in 0..4 {
                for cc in 0..4 {
                    let s: f64 = (0..3).map(|i| f64::from(x.get(i, r, cc))).sum();
                    assert_eq!(y.get(k, r, cc), s);
                }
            }
        }
        assert_eq!(c.total(), 16 * 9 * 2 * 3);
    }

    #[test]
    fn mismatched_input_rejected() {
        let shape = LayerShape::new(1, 2, 1, 3).unwrap();
        let k = KernelSet::zeros(shape).unwrap();
        let x = InputVolume::new(3, 3, vec![0.0; 27]).unwrap();
        assert!(matches!(
            conv_direct(&x, &k, &MulCounter::new()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn counter_reset() {
        let c = MulCounter::new();
        c.add_charged(5, 3);
        assert_eq!((c.total(), c.actual()), (5, 3));
        c.reset();
        assert_eq!(c.total(), 0);
    }
}
