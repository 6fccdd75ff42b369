//! Labeled feature datasets and their binary file formats.
//!
//! Two layouts exist: flat sample lists (`OVSF`) used for training and
//! evaluation, and dense feature grids (`OVSG`) used for pixel-level concept
//! search. Features are stored as little-endian float32 on disk and in
//! memory, so a write/read round trip reproduces the dataset exactly.

use thiserror::Error;

use crate::taxonomy::{ConceptGraph, ConceptId};

#[derive(Error, Debug)]
pub enum DatasetError {
    #[error("bad magic {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated dataset: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("label {0} is not a concept of the bound graph")]
    UnknownLabel(u32),
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
}

/// Flat list of labeled feature vectors with a uniform dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    dim: usize,
    labels: Vec<ConceptId>,
    /// Row-major `len × dim` feature block.
    features: Vec<f32>,
}

impl FeatureDataset {
    pub fn new(dim: usize) -> Self {
        FeatureDataset {
            dim,
            labels: Vec::new(),
            features: Vec::new(),
        }
    }

    pub fn push(&mut self, label: ConceptId, feature: &[f64]) -> Result<(), DatasetError> {
        if feature.len() != self.dim {
            return Err(DatasetError::DimMismatch {
                expected: self.dim,
                got: feature.len(),
            });
        }
        self.labels.push(label);
        self.features.extend(feature.iter().map(|&v| v as f32));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self, i: usize) -> ConceptId {
        self.labels[i]
    }

    pub fn labels(&self) -> &[ConceptId] {
        &self.labels
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Copy sample `i` into an f64 buffer for numeric work.
    pub fn feature_into(&self, i: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.feature(i).iter().map(|&v| v as f64));
    }

    pub fn feature_f64(&self, i: usize) -> Vec<f64> {
        self.feature(i).iter().map(|&v| v as f64).collect()
    }

    /// Distinct labels in id order.
    pub fn distinct_labels(&self) -> Vec<ConceptId> {
        let mut labels = self.labels.clone();
        labels.sort_unstable();
        labels.dedup();
        labels
    }

    pub fn validate_labels(&self, graph: &ConceptGraph) -> Result<(), DatasetError> {
        for &l in &self.labels {
            if l.idx() >= graph.len() {
                return Err(DatasetError::UnknownLabel(l.0));
            }
        }
        Ok(())
    }

    /// Binary dump: magic `OVSF`, u32 version=1, u32 D, u64 count, then per
    /// sample u32 label id followed by D float32, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.len() * (4 + self.dim * 4));
        out.extend_from_slice(b"OVSF");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for i in 0..self.len() {
            out.extend_from_slice(&self.labels[i].0.to_le_bytes());
            for &v in self.feature(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        if bytes.len() < 20 {
            return Err(DatasetError::Truncated {
                expected: 20,
                got: bytes.len(),
            });
        }
        if &bytes[0..4] != b"OVSF" {
            return Err(DatasetError::BadMagic(bytes[0..4].to_vec()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != 1 {
            return Err(DatasetError::UnsupportedVersion(version));
        }
        let dim = u32_at(8) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let expected = 20 + count * (4 + dim * 4);
        if bytes.len() != expected {
            return Err(DatasetError::Truncated {
                expected,
                got: bytes.len(),
            });
        }
        let mut labels = Vec::with_capacity(count);
        let mut features = Vec::with_capacity(count * dim);
        let mut o = 20;
        for _ in 0..count {
            labels.push(ConceptId(u32_at(o)));
            o += 4;
            for _ in 0..dim {
                features.push(f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()));
                o += 4;
            }
        }
        Ok(FeatureDataset {
            dim,
            labels,
            features,
        })
    }
}

/// Dense H×W grid of labeled feature cells.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// Row-major H×W label ids.
    pub labels: Vec<u32>,
    /// Row-major H×W×D features.
    pub features: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, dim: usize) -> Self {
        FeatureGrid {
            height,
            width,
            dim,
            labels: vec![0; height * width],
            features: vec![0.0; height * width * dim],
        }
    }

    pub fn cell_feature(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.width + col) * self.dim;
        &self.features[i..i + self.dim]
    }

    pub fn cell_label(&self, row: usize, col: usize) -> ConceptId {
        ConceptId(self.labels[row * self.width + col])
    }

    pub fn set_cell(&mut self, row: usize, col: usize, label: ConceptId, feature: &[f64]) {
        assert_eq!(feature.len(), self.dim);
        self.labels[row * self.width + col] = label.0;
        let i = (row * self.width + col) * self.dim;
        for (slot, &v) in self.features[i..i + self.dim].iter_mut().zip(feature) {
            *slot = v as f32;
        }
    }

    /// Binary dump: magic `OVSG`, u32 version=1, u32 H, u32 W, u32 D, then
    /// H×W u32 labels, then H×W×D float32 features, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(20 + self.labels.len() * 4 + self.features.len() * 4);
        out.extend_from_slice(b"OVSG");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for &l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for &v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        if bytes.len() < 20 {
            return Err(DatasetError::Truncated {
                expected: 20,
                got: bytes.len(),
            });
        }
        if &bytes[0..4] != b"OVSG" {
            return Err(DatasetError::BadMagic(bytes[0..4].to_vec()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != 1 {
            return Err(DatasetError::UnsupportedVersion(version));
        }
        let height = u32_at(8) as usize;
        let width = u32_at(12) as usize;
        let dim = u32_at(16) as usize;
        let cells = height * width;
        let expected = 20 + cells * 4 + cells * dim * 4;
        if bytes.len() != expected {
            return Err(DatasetError::Truncated {
                expected,
                got: bytes.len(),
            });
        }
        let mut labels = Vec::with_capacity(cells);
        let mut o = 20;
        for _ in 0..cells {
            labels.push(u32_at(o));
            o += 4;
        }
        let mut features = Vec::with_capacity(cells * dim);
        for _ in 0..cells * dim {
            features.push(f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()));
            o += 4;
        }
        Ok(FeatureGrid {
            height,
            width,
            dim,
            labels,
            features,
        })
    }
}
