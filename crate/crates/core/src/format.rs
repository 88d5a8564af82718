//! On-disk formats.
//!
//! `KQZ1` tensor files: the magic `KQZ1`, four little-endian `u32` (`M, N, p, m`),
//! then `M·N·p·p` little-endian `f32` in `[k][i][u][v]` order. Input volumes
//! reuse the layout with `M = 1` and `p = m`. A JSON form with the same field
//! names and a nested `weights` array is accepted when reading.
//!
//! `KQC1` codebook containers: the magic, a `u8` method tag (0 = VQ, 1 = DL),
//! `M, N, p, m, N', S` as `u32`, per-subspace `K, L, alpha` as `u32` (L and
//! alpha are 0 for VQ), per-subspace payloads, and a trailing CRC-32 of every
//! preceding byte. A VQ payload is `C` (`N' x K` column-major `f32`) followed by
//! `Γ` (`p²M` `u32`); a DL payload is `D` (`N' x L` column-major `f32`), then for
//! each of the `K` codes a `u32` count with that many `u32` atom indices and
//! `f32` values, then `Γ`.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::conv::InputVolume;
use crate::dl::{DlCodebook, SparseCodes, SparseColumn};
use crate::error::{Error, Result};
use crate::model::{KernelSet, LayerShape, SubspacePartition};
use crate::vq::{AssignmentMatrix, VqCodebook};

pub const KQZ_MAGIC: &[u8; 4] = b"KQZ1";
pub const KQC_MAGIC: &[u8; 4] = b"KQC1";

/// Writes through a temporary file in the target directory and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Corrupt("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Corrupt("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

/// A raw `KQZ1` tensor before it is interpreted as kernels or a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: [usize; 4],
    pub values: Vec<f32>,
}

#[derive(Deserialize, Serialize)]
struct JsonTensor {
    #[serde(rename = "M")]
    m_out: usize,
    #[serde(rename = "N")]
    n: usize,
    p: usize,
    m: usize,
    weights: Vec<Vec<Vec<Vec<f32>>>>,
}

pub fn decode_kqz(bytes: &[u8]) -> Result<RawTensor> {
    if bytes.starts_with(KQZ_MAGIC) {
        let mut r = Reader::new(&bytes[4..]);
        let dims = [r.usize()?, r.usize()?, r.usize()?, r.usize()?];
        let count = dims[0]
            .checked_mul(dims[1])
            .and_then(|x| x.checked_mul(dims[2]))
            .and_then(|x| x.checked_mul(dims[2]))
            .ok_or_else(|| Error::Corrupt("tensor size overflow".into()))?;
        let values = r.f32s(count)?;
        if !r.finished() {
            return Err(Error::Corrupt("trailing bytes after tensor data".into()));
        }
        return Ok(RawTensor { dims, values });
    }
    let json: JsonTensor = serde_json::from_slice(bytes)
        .map_err(|e| Error::Corrupt(format!("neither KQZ1 nor JSON tensor: {e}")))?;
    let dims = [json.m_out, json.n, json.p, json.m];
    let mut values = Vec::with_capacity(dims[0] * dims[1] * dims[2] * dims[2]);
    let bad = || Error::ShapeMismatch("JSON weights do not match M, N, p".into());
    if json.weights.len() != dims[0] {
        return Err(bad());
    }
    for kernel in &json.weights {
        if kernel.len() != dims[1] {
            return Err(bad());
        }
        for channel in kernel {
            if channel.len() != dims[2] {
                return Err(bad());
            }
            for row in channel {
                if row.len() != dims[2] {
                    return Err(bad());
                }
                values.extend_from_slice(row);
            }
        }
    }
    Ok(RawTensor { dims, values })
}

pub fn encode_kqz(dims: [usize; 4], values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * values.len());
    out.extend_from_slice(KQZ_MAGIC);
    for d in dims {
        put_u32(&mut out, d);
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn kernels_from_raw(raw: RawTensor) -> Result<KernelSet> {
    let [m_out, n, p, m] = raw.dims;
    KernelSet::new(LayerShape::new(m_out, n, p, m)?, raw.values)
}

pub fn volume_from_raw(raw: RawTensor) -> Result<InputVolume> {
    let [m_out, n, p, m] = raw.dims;
    if m_out != 1 || p != m {
        return Err(Error::ShapeMismatch(format!(
            "a volume file needs M=1 and p=m, got M={m_out} p={p} m={m}"
        )));
    }
    InputVolume::new(n, m, raw.values)
}

pub fn load_kernels(path: &Path) -> Result<KernelSet> {
    kernels_from_raw(decode_kqz(&fs::read(path)?)?)
}

pub fn save_kernels(path: &Path, kernels: &KernelSet) -> Result<()> {
    let s = kernels.shape();
    write_atomic(
        path,
        &encode_kqz(
            [s.kernels, s.channels, s.kernel_side, s.input_side],
            kernels.weights(),
        ),
    )
}

pub fn load_volume(path: &Path) -> Result<InputVolume> {
    volume_from_raw(decode_kqz(&fs::read(path)?)?)
}

pub fn save_volume(path: &Path, x: &InputVolume) -> Result<()> {
    write_atomic(
        path,
        &encode_kqz([1, x.channels(), x.side(), x.side()], x.data()),
    )
}

/// Codebooks for every subspace of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Codebooks {
    Vq(Vec<VqCodebook>),
    Dl(Vec<DlCodebook>),
}

impl Codebooks {
    pub fn method(&self) -> &'static str {
        match self {
            Codebooks::Vq(_) => "vq",
            Codebooks::Dl(_) => "dl",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Codebooks::Vq(v) => v.len(),
            Codebooks::Dl(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Contents of a `KQC1` file.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookContainer {
    pub shape: LayerShape,
    pub partition: SubspacePartition,
    pub codebooks: Codebooks,
}

impl CodebookContainer {
    pub fn encode(&self) -> Vec<u8> {
        let s = &self.shape;
        let mut out = Vec::new();
        out.extend_from_slice(KQC_MAGIC);
        out.push(match self.codebooks {
            Codebooks::Vq(_) => 0,
            Codebooks::Dl(_) => 1,
        });
        for d in [
            s.kernels,
            s.channels,
            s.kernel_side,
            s.input_side,
            self.partition.dim(),
            self.partition.count(),
        ] {
            put_u32(&mut out, d);
        }
        match &self.codebooks {
            Codebooks::Vq(cbs) => {
                for cb in cbs {
                    put_u32(&mut out, cb.k());
                    put_u32(&mut out, 0);
                    put_u32(&mut out, 0);
                }
                for cb in cbs {
                    cb.centroids.iter().for_each(|&v| put_f32(&mut out, v));
                    cb.assignments
                        .indices()
                        .iter()
                        .for_each(|&a| put_u32(&mut out, a as usize));
                }
            }
            Codebooks::Dl(cbs) => {
                for cb in cbs {
                    put_u32(&mut out, cb.k());
                    put_u32(&mut out, cb.atoms());
                    put_u32(&mut out, cb.alpha);
                }
                for cb in cbs {
                    cb.dictionary.iter().for_each(|&v| put_f32(&mut out, v));
                    for c in &cb.codes.columns {
                        put_u32(&mut out, c.nnz());
                        c.indices
                            .iter()
                            .for_each(|&i| put_u32(&mut out, i as usize));
                        c.values.iter().for_each(|&v| put_f32(&mut out, v));
                    }
                    cb.assignments
                        .indices()
                        .iter()
                        .for_each(|&a| put_u32(&mut out, a as usize));
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || !bytes.starts_with(KQC_MAGIC) {
            return Err(Error::Corrupt("missing KQC1 magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Corrupt("CRC mismatch".into()));
        }
        let mut r = Reader::new(&body[4..]);
        let tag = r.u8()?;
        let shape = LayerShape::new(r.usize()?, r.usize()?, r.usize()?, r.usize()?)
            .map_err(|e| Error::Corrupt(format!("bad header shape: {e}")))?;
        let nprime = r.usize()?;
        let count = r.usize()?;
        let partition = SubspacePartition::with_dim(shape.channels, nprime)
            .map_err(|e| Error::Corrupt(format!("bad header partition: {e}")))?;
        if partition.count() != count {
            return Err(Error::Corrupt(format!(
                "header says S={count}, N/N' = {}",
                partition.count()
            )));
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            params.push((r.usize()?, r.usize()?, r.usize()?));
        }
        let cols = shape.columns();
        let assignments = |r: &mut Reader, k: usize| -> Result<AssignmentMatrix> {
            AssignmentMatrix::new(r.u32s(cols)?, k).map_err(|e| Error::Corrupt(e.to_string()))
        };
        let codebooks = match tag {
            0 => {
                let mut cbs = Vec::with_capacity(count);
                for (s, &(k, _, _)) in params.iter().enumerate() {
                    let c = r.f32s(nprime * k)?;
                    let cb = VqCodebook {
                        centroids: DMatrix::from_vec(
                            nprime,
                            k,
                            c.into_iter().map(f64::from).collect(),
                        ),
                        assignments: assignments(&mut r, k)?,
                        shape,
                        subspace: s,
                    };
                    cb.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
                    cbs.push(cb);
                }
                Codebooks::Vq(cbs)
            }
            1 => {
                let mut cbs = Vec::with_capacity(count);
                for (s, &(k, l, alpha)) in params.iter().enumerate() {
                    let d = r.f32s(nprime * l)?;
                    let mut columns = Vec::with_capacity(k);
                    for _ in 0..k {
                        let nnz = r.usize()?;
                        if nnz > alpha {
                            return Err(Error::Corrupt(format!(
                                "code with {nnz} entries exceeds alpha {alpha}"
                            )));
                        }
                        let indices = r.u32s(nnz)?;
                        let values = r.f32s(nnz)?.into_iter().map(f64::from).collect();
                        columns.push(SparseColumn { indices, values });
                    }
                    let cb = DlCodebook {
                        dictionary: DMatrix::from_vec(
                            nprime,
                            l,
                            d.into_iter().map(f64::from).collect(),
                        ),
                        codes: SparseCodes { atoms: l, columns },
                        assignments: assignments(&mut r, k)?,
                        alpha,
                        shape,
                        subspace: s,
                    };
                    cb.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
                    cbs.push(cb);
                }
                Codebooks::Dl(cbs)
            }
            other => return Err(Error::Corrupt(format!("unknown method tag {other}"))),
        };
        if !r.finished() {
            return Err(Error::Corrupt(
                "payload longer than header describes".into(),
            ));
        }
        Ok(Self {
            shape,
            partition,
            codebooks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_tensor_matches_binary() {
        let json = br#"{"M":1,"N":2,"p":1,"m":3,"weights":[[[[1.5]],[[-2.0]]]]}"#;
        let raw = decode_kqz(json).unwrap();
        assert_eq!(raw.dims, [1, 2, 1, 3]);
        let bin = encode_kqz(raw.dims, &raw.values);
        assert_eq!(decode_kqz(&bin).unwrap(), raw);
        let k = kernels_from_raw(raw).unwrap();
        assert_eq!(k.weights(), &[1.5, -2.0]);
    }

    #[test]
    fn truncated_tensor_is_corrupt() {
        let mut bin = encode_kqz([1, 1, 1, 1], &[1.0]);
        bin.pop();
        assert!(matches!(decode_kqz(&bin), Err(Error::Corrupt(_))));
        assert!(matches!(decode_kqz(b"nonsense"), Err(Error::Corrupt(_))));
    }

    #[test]
    fn json_with_wrong_extent_is_rejected() {
        let json = br#"{"M":1,"N":2,"p":1,"m":3,"weights":[[[[1.5]]]]}"#;
        assert!(matches!(decode_kqz(json), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn volume_needs_single_kernel_slot() {
        let raw = RawTensor {
            dims: [2, 1, 2, 2],
            values: vec![0.0; 8],
        };
        assert!(volume_from_raw(raw).is_err());
        let raw = RawTensor {
            dims: [1, 2, 4, 4],
            values: vec![0.0; 32],
        };
        assert_eq!(volume_from_raw(raw).unwrap().side(), 4);
    }

    #[test]
    fn vq_container_round_trip_and_crc() {
        let shape = LayerShape::new(2, 2, 1, 1).unwrap();
        let cb = VqCodebook {
            centroids: DMatrix::from_vec(1, 1, vec![0.25]),
            assignments: AssignmentMatrix::new(vec![0, 0], 1).unwrap(),
            shape,
            subspace: 0,
        };
        let mut second = cb.clone();
        second.subspace = 1;
        let container = CodebookContainer {
            shape,
            partition: SubspacePartition::with_dim(2, 1).unwrap(),
            codebooks: Codebooks::Vq(vec![cb, second]),
        };
        let mut bytes = container.encode();
        assert_eq!(CodebookContainer::decode(&bytes).unwrap(), container);
        bytes[10] ^= 0xff;
        assert!(matches!(
            CodebookContainer::decode(&bytes),
            Err(Error::Corrupt(_))
        ));
    }
}
