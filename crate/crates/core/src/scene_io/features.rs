//! `SPLF` feature tables and JSON query sets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SPLF_MAGIC: &[u8; 4] = b"SPLF";

/// Row-major `rows x dim` float32 matrix; row `k` is the feature of global mask `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    data: Vec<f32>,
}

impl FeatureTable {
    /// Build a table, rejecting non-finite entries and zero-norm rows.
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data("feature dimension must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Data(format!(
                "{} values do not form rows of dimension {dim}",
                data.len()
            )));
        }
        for (k, row) in data.chunks_exact(dim).enumerate() {
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!("feature row {k} has non-finite entry {j}")));
            }
            if norm(row) == 0.0 {
                return Err(Error::Data(format!("feature row {k} has zero norm")));
            }
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

pub fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

pub fn encode_features(table: &FeatureTable) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + table.data.len() * 4);
    out.extend_from_slice(SPLF_MAGIC);
    out.extend_from_slice(&(table.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(table.dim as u32).to_le_bytes());
    for v in &table.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_features(bytes: &[u8]) -> Result<FeatureTable> {
    if bytes.len() < 12 || &bytes[..4] != SPLF_MAGIC {
        return Err(Error::Format("feature file does not start with SPLF magic".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as u64;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
    let expected = rows * dim * 4;
    let found = (bytes.len() - 12) as u64;
    if found != expected {
        return Err(Error::Length { expected, found });
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureTable::new(dim as usize, data)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureTable> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_features(&bytes)
}

pub fn save_features(table: &FeatureTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_features(table)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryTask {
    ObjectSelection,
    SemanticSegmentation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub name: String,
    pub embedding: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    pub task: QueryTask,
    pub entries: Vec<QueryEntry>,
}

impl QuerySet {
    /// L2-normalize every embedding and check the dimension.
    pub fn normalized(mut self, dim: usize) -> Result<Self> {
        for e in &mut self.entries {
            if e.embedding.len() != dim {
                return Err(Error::Dimension(format!(
                    "query '{}' has dimension {}, expected {dim}",
                    e.name,
                    e.embedding.len()
                )));
            }
            if e.embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("query '{}' has non-finite entries", e.name)));
            }
            let n = norm(&e.embedding);
            if n == 0.0 {
                return Err(Error::Data(format!("query '{}' has zero norm", e.name)));
            }
            for v in &mut e.embedding {
                *v = ((*v as f64) / n) as f32;
            }
        }
        Ok(self)
    }
}

/// Load a query file and normalize it against the feature dimension.
pub fn load_queries(path: impl AsRef<Path>, dim: usize) -> Result<QuerySet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let set: QuerySet = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("query file {}: {e}", path.display())))?;
    set.normalized(dim)
}

pub fn save_queries(set: &QuerySet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(set).expect("queries serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
