//! Layer and kernel representations, subspace partitioning and error metrics.
//!
//! A layer holds `M` kernels over `N` input channels with a `p x p` spatial
//! footprint. For product quantization the channel axis is split into `S`
//! contiguous blocks of `N'` channels; each block yields an `N' x p²M` matrix
//! whose columns are the kernel sub-vectors of that block.
//!
//! Column `j` of a [`SubspaceMatrix`] encodes the kernel/spatial slot
//! `j = k·p² + u·p + v`. Everything that consumes assignments (codebooks,
//! convolution paths, serialization) relies on this ordering.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of one convolutional layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerShape {
    /// Number of kernels (output channels).
    #[serde(rename = "M")]
    pub kernels: usize,
    /// Number of input channels.
    #[serde(rename = "N")]
    pub channels: usize,
    /// Spatial side of each kernel.
    #[serde(rename = "p")]
    pub kernel_side: usize,
    /// Spatial side of the input (and output) volume.
    #[serde(rename = "m")]
    pub input_side: usize,
}

impl LayerShape {
    pub fn new(
        kernels: usize,
        channels: usize,
        kernel_side: usize,
        input_side: usize,
    ) -> Result<Self> {
        let shape = Self {
            kernels,
            channels,
            kernel_side,
            input_side,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels == 0 || self.channels == 0 || self.kernel_side == 0 || self.input_side == 0
        {
            return Err(Error::InvalidShape(format!(
                "all dimensions must be >= 1, got {self}"
            )));
        }
        if self.kernel_side % 2 == 0 {
            return Err(Error::InvalidShape(format!(
                "kernel side p={} must be odd",
                self.kernel_side
            )));
        }
        if self.kernel_side > self.input_side {
            return Err(Error::InvalidShape(format!(
                "kernel side p={} exceeds input side m={}",
                self.kernel_side, self.input_side
            )));
        }
        Ok(())
    }

    /// Number of kernel sub-vectors per subspace, `p²M`.
    pub fn columns(&self) -> usize {
        self.kernel_side * self.kernel_side * self.kernels
    }

    /// Number of scalar weights, `M·N·p²`.
    pub fn weight_count(&self) -> usize {
        self.columns() * self.channels
    }

    /// Column index of kernel `k` at spatial slot `(u, v)`.
    #[inline]
    pub fn column_index(&self, k: usize, u: usize, v: usize) -> usize {
        (k * self.kernel_side + u) * self.kernel_side + v
    }

    /// Inverse of [`LayerShape::column_index`].
    #[inline]
    pub fn column_slot(&self, j: usize) -> (usize, usize, usize) {
        let p = self.kernel_side;
        (j / (p * p), (j / p) % p, j % p)
    }

    /// Parses `MxNxpxm`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<_> = text.split(['x', 'X']).collect();
        if parts.len() != 4 {
            return Err(Error::InvalidShape(format!(
                "expected MxNxpxm, got {text:?}"
            )));
        }
        let mut dims = [0usize; 4];
        for (d, part) in dims.iter_mut().zip(&parts) {
            *d = part
                .trim()
                .parse()
                .map_err(|_| Error::InvalidShape(format!("bad dimension {part:?} in {text:?}")))?;
        }
        Self::new(dims[0], dims[1], dims[2], dims[3])
    }
}

impl std::fmt::Display for LayerShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.kernels, self.channels, self.kernel_side, self.input_side
        )
    }
}

/// The kernel tensor of one layer, stored `[k][i][u][v]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSet {
    shape: LayerShape,
    weights: Vec<f32>,
}

impl KernelSet {
    pub fn new(shape: LayerShape, weights: Vec<f32>) -> Result<Self> {
        shape.validate()?;
        if weights.len() != shape.weight_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} weights supplied, shape {shape} needs {}",
                weights.len(),
                shape.weight_count()
            )));
        }
        if let Some(pos) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite weight at index {pos}"
            )));
        }
        Ok(Self { shape, weights })
    }

    pub fn zeros(shape: LayerShape) -> Result<Self> {
        Self::new(shape, vec![0.0; shape.weight_count()])
    }

    pub fn shape(&self) -> LayerShape {
        self.shape
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    #[inline]
    pub fn offset(&self, k: usize, i: usize, u: usize, v: usize) -> usize {
        let s = &self.shape;
        ((k * s.channels + i) * s.kernel_side + u) * s.kernel_side + v
    }

    #[inline]
    pub fn get(&self, k: usize, i: usize, u: usize, v: usize) -> f32 {
        self.weights[self.offset(k, i, u, v)]
    }

    pub fn into_weights(self) -> Vec<f32> {
        self.weights
    }
}

/// Split of the channel axis into `S` blocks of `N'` channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubspacePartition {
    subspaces: usize,
    dim: usize,
}

impl SubspacePartition {
    /// Partition of `channels` into blocks of `nprime`.
    pub fn with_dim(channels: usize, nprime: usize) -> Result<Self> {
        if nprime == 0 || channels % nprime != 0 {
            return Err(Error::NonDivisibleChannels {
                channels,
                by: nprime,
            });
        }
        Ok(Self {
            subspaces: channels / nprime,
            dim: nprime,
        })
    }

    /// Partition of `channels` into `subspaces` equal blocks.
    pub fn with_count(channels: usize, subspaces: usize) -> Result<Self> {
        if subspaces == 0 || channels % subspaces != 0 {
            return Err(Error::NonDivisibleChannels {
                channels,
                by: subspaces,
            });
        }
        Ok(Self {
            subspaces,
            dim: channels / subspaces,
        })
    }

    /// `S`
    pub fn count(&self) -> usize {
        self.subspaces
    }

    /// `N'`
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn channels(&self) -> usize {
        self.subspaces * self.dim
    }
}

/// The `N' x p²M` matrix of kernel sub-vectors for one subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceMatrix {
    data: DMatrix<f32>,
    shape: LayerShape,
    index: usize,
}

impl SubspaceMatrix {
    /// `index` is zero-based.
    pub fn new(data: DMatrix<f32>, shape: LayerShape, index: usize) -> Result<Self> {
        if data.ncols() != shape.columns() {
            return Err(Error::ShapeMismatch(format!(
                "subspace matrix has {} columns, shape {shape} needs {}",
                data.ncols(),
                shape.columns()
            )));
        }
        if data.nrows() == 0 {
            return Err(Error::ShapeMismatch("subspace matrix has no rows".into()));
        }
        Ok(Self { data, shape, index })
    }

    pub fn data(&self) -> &DMatrix<f32> {
        &self.data
    }

    pub fn shape(&self) -> LayerShape {
        self.shape
    }

    /// Zero-based subspace index.
    pub fn index(&self) -> usize {
        self.index
    }

    /// `N'`
    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    /// `p²M`
    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    pub fn column(&self, j: usize) -> &[f32] {
        let n = self.data.nrows();
        &self.data.as_slice()[j * n..(j + 1) * n]
    }

    /// Widened copy for solver arithmetic.
    pub fn to_f64(&self) -> DMatrix<f64> {
        self.data.map(f64::from)
    }

    /// Squared Frobenius norm accumulated in f64.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|&x| f64::from(x) * f64::from(x)).sum()
    }
}

/// Splits the kernels of a layer into `S` subspace matrices.
pub fn partition_kernels(
    kernels: &KernelSet,
    part: SubspacePartition,
) -> Result<Vec<SubspaceMatrix>> {
    let shape = kernels.shape();
    if part.channels() != shape.channels {
        return Err(Error::NonDivisibleChannels {
            channels: shape.channels,
            by: part.count(),
        });
    }
    let p = shape.kernel_side;
    let nprime = part.dim();
    (0..part.count())
        .map(|s| {
            let data = DMatrix::from_fn(nprime, shape.columns(), |r, j| {
                let k = j / (p * p);
                let u = (j / p) % p;
                let v = j % p;
                kernels.get(k, s * nprime + r, u, v)
            });
            SubspaceMatrix::new(data, shape, s)
        })
        .collect()
}

/// Inverse of [`partition_kernels`]; matrices must be in subspace order.
pub fn reconstruct_kernels(mats: &[SubspaceMatrix], shape: LayerShape) -> Result<KernelSet> {
    shape.validate()?;
    let Some(first) = mats.first() else {
        return Err(Error::ShapeMismatch("no subspace matrices supplied".into()));
    };
    let nprime = first.dim();
    if nprime * mats.len() != shape.channels {
        return Err(Error::ShapeMismatch(format!(
            "{} subspaces of dimension {nprime} do not cover N={}",
            mats.len(),
            shape.channels
        )));
    }
    let p = shape.kernel_side;
    let mut weights = vec![0f32; shape.weight_count()];
    for (s, mat) in mats.iter().enumerate() {
        if mat.dim() != nprime || mat.ncols() != shape.columns() || mat.index() != s {
            return Err(Error::ShapeMismatch(format!(
                "subspace {s}: got {}x{} (index {}), expected {nprime}x{}",
                mat.dim(),
                mat.ncols(),
                mat.index(),
                shape.columns()
            )));
        }
        for j in 0..shape.columns() {
            let (k, u, v) = shape.column_slot(j);
            for (r, &w) in mat.column(j).iter().enumerate() {
                let i = s * nprime + r;
                weights[((k * shape.channels + i) * p + u) * p + v] = w;
            }
        }
    }
    KernelSet::new(shape, weights)
}

/// Approximation error between a subspace matrix and its reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// `||W - Ŵ||_F² / (N'·p²M)`
    pub mse: f64,
    /// `||W - Ŵ||_F / ||W||_F`; `None` when `W` is zero.
    pub rel_frob: Option<f64>,
    /// `||W - Ŵ||_F²`
    pub sq_error: f64,
    /// `||W||_F²`
    pub energy: f64,
    /// Number of matrix entries compared.
    pub count: usize,
}

pub fn quantization_error(orig: &SubspaceMatrix, approx: &SubspaceMatrix) -> Result<ErrorReport> {
    if orig.data.shape() != approx.data.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            orig.data.shape(),
            approx.data.shape()
        )));
    }
    let (sq_error, energy) =
        orig.data
            .iter()
            .zip(approx.data.iter())
            .fold((0f64, 0f64), |(e, n), (&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                (e + d * d, n + f64::from(a) * f64::from(a))
            });
    let count = orig.data.len();
    Ok(ErrorReport {
        mse: sq_error / count as f64,
        rel_frob: (energy > 0.0).then(|| (sq_error / energy).sqrt()),
        sq_error,
        energy,
        count,
    })
}
