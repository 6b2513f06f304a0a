//! Model checkpoints: a JSON manifest next to one little-endian `f64` file
//! per parameter tensor.

use std::fs;
use std::path::Path;

use celltopic_core::model::{ModelDims, ModelParams, TrainConfig};
use celltopic_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io::{atomic_write, read_json, write_json};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dims: ModelDims,
    pub config: TrainConfig,
    /// Model vocabulary after variable-gene selection.
    pub gene_names: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: TrainConfig,
    pub gene_names: Vec<String>,
}

fn encode(m: &Matrix) -> Vec<u8> {
    m.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode(bytes: &[u8], rows: usize, cols: usize, what: &str) -> Result<Matrix> {
    if bytes.len() != rows * cols * 8 {
        return Err(CliError::Data(format!("{what}: expected {} bytes, found {}", rows * cols * 8, bytes.len())));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
    Matrix::new(rows, cols, data).map_err(|e| CliError::Data(format!("{what}: {e}")))
}

pub fn save(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut tensors = Vec::new();
    for (name, m) in ckpt.params.tensors() {
        let file = format!("{name}.bin");
        atomic_write(&dir.join(&file), &encode(m))?;
        tensors.push(TensorEntry { name: name.into(), file, rows: m.rows(), cols: m.cols() });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dims: ckpt.params.dims,
        config: ckpt.config.clone(),
        gene_names: ckpt.gene_names.clone(),
        tensors,
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CliError::Data(format!("unsupported checkpoint version {}", manifest.format_version)));
    }
    let mut mats = Vec::new();
    for (entry, expected) in manifest.tensors.iter().zip(celltopic_core::model::TENSOR_NAMES) {
        if entry.name != expected {
            return Err(CliError::Data(format!("checkpoint tensor {:?} where {expected:?} was expected", entry.name)));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        mats.push(decode(&bytes, entry.rows, entry.cols, &entry.name)?);
    }
    let params = ModelParams::from_tensors(manifest.dims, mats).map_err(|e| CliError::Data(e.to_string()))?;
    if manifest.gene_names.len() != manifest.dims.n_genes {
        return Err(CliError::Data(format!(
            "checkpoint lists {} genes for a {}-gene model",
            manifest.gene_names.len(),
            manifest.dims.n_genes
        )));
    }
    Ok(Checkpoint { params, config: manifest.config, gene_names: manifest.gene_names })
}
