//! Patch-embedding sets and their binary interchange format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::emd::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PATCHEMB";
pub const HEADER_LEN: usize = 16;

/// One vector per image patch, all of the same dimension, none zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct PatchEmbeddingSet {
    dim: usize,
    data: Vec<f64>,
}

impl PatchEmbeddingSet {
    pub fn new(patches: Vec<Vec<f64>>) -> Result<Self> {
        let dim = patches.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::invalid("embedding set needs at least one patch of dimension >= 1"));
        }
        let mut data = Vec::with_capacity(patches.len() * dim);
        for (i, p) in patches.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::invalid(format!("patch {i} has dimension {}, expected {dim}", p.len())));
            }
            data.extend_from_slice(p);
        }
        Self::from_flat(patches.len(), dim, data)
    }

    pub fn from_flat(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || dim == 0 || data.len() != rows * dim {
            return Err(Error::invalid(format!(
                "embedding shape {rows}x{dim} does not match {} values",
                data.len()
            )));
        }
        for (i, p) in data.chunks(dim).enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("patch {i} has a non-finite component")));
            }
            if p.iter().all(|v| *v == 0.0) {
                return Err(Error::invalid(format!("patch {i} is the zero vector")));
            }
        }
        Ok(PatchEmbeddingSet { dim, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn patches(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    /// Header (magic, rows u32 LE, cols u32 LE) followed by row-major f32 LE values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(Error::invalid("embedding file lacks the PATCHEMB header"));
        }
        let rows = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let cols = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let body = &bytes[HEADER_LEN..];
        if rows.checked_mul(cols).and_then(|n| n.checked_mul(4)) != Some(body.len()) {
            return Err(Error::invalid(format!(
                "embedding header says {rows}x{cols} but body has {} bytes",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Self::from_flat(rows, cols, data)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

impl TryFrom<Vec<Vec<f64>>> for PatchEmbeddingSet {
    type Error = Error;

    fn try_from(v: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PatchEmbeddingSet> for Vec<Vec<f64>> {
    fn from(s: PatchEmbeddingSet) -> Self {
        s.patches().map(<[f64]>::to_vec).collect()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// `D[i][j] = 1 - cos(x_i, y_j)`, each entry clipped into [0, 2].
pub fn cosine_distance_matrix(x: &PatchEmbeddingSet, y: &PatchEmbeddingSet) -> Result<Matrix> {
    if x.dim() != y.dim() {
        return Err(Error::invalid(format!(
            "embedding dimensions differ: {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    let ny: Vec<f64> = y.patches().map(norm).collect();
    let mut data = Vec::with_capacity(x.len() * y.len());
    for xi in x.patches() {
        let nx = norm(xi);
        for (yj, nyj) in y.patches().zip(&ny) {
            let dot: f64 = xi.iter().zip(yj).map(|(a, b)| a * b).sum();
            data.push((1.0 - dot / (nx * nyj)).clamp(0.0, 2.0));
        }
    }
    Matrix::new(x.len(), y.len(), data)
}
