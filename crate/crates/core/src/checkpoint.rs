//! Versioned checkpoints: a JSON index plus one `HSNF` file per parameter.
//!
//! ```text
//! <dir>/checkpoint.json      index (version, extents, arch, train config, tensor table)
//! <dir>/tensors/<name>.hsnf  f64 payload of each parameter
//! ```
//!
//! A checkpoint is written into a sibling staging directory and renamed into
//! place, so a failed save never leaves a readable partial checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ArchConfig, HyperParams, TrainConfig};
use crate::data::feature::{read_feature, write_feature, Precision};
use crate::error::{Error, Result};
use crate::model::HsnModel;
use crate::params::Group;

pub const FORMAT_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "checkpoint.json";
const TENSOR_DIR: &str = "tensors";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub group: Group,
    /// Relative to the checkpoint directory.
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub version: u32,
    pub hyper: HyperParams,
    pub arch: ArchConfig,
    /// The configuration the weights were trained with, if any.
    pub train: Option<TrainConfig>,
    pub tensors: Vec<TensorRecord>,
}

fn staging_path(dir: &Path) -> PathBuf {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    dir.with_file_name(format!(".{name}.partial"))
}

fn write_all(model: &HsnModel, train: Option<&TrainConfig>, dir: &Path) -> Result<()> {
    let tensor_dir = dir.join(TENSOR_DIR);
    fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;
    let mut tensors = Vec::with_capacity(model.store.len());
    for entry in model.store.entries() {
        let file = format!("{TENSOR_DIR}/{}.hsnf", entry.name);
        write_feature(&dir.join(&file), &entry.value, Precision::F64)?;
        tensors.push(TensorRecord {
            name: entry.name.clone(),
            group: entry.group,
            file,
            shape: entry.value.shape().to_vec(),
        });
    }
    let index = CheckpointIndex {
        version: FORMAT_VERSION,
        hyper: model.hyper.clone(),
        arch: model.arch.clone(),
        train: train.cloned(),
        tensors,
    };
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    let path = dir.join(INDEX_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Writes `model` to `dir`, replacing any checkpoint already there, and
/// returns the index path.
pub fn save(model: &HsnModel, train: Option<&TrainConfig>, dir: &Path) -> Result<PathBuf> {
    let staging = staging_path(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    if let Err(e) = write_all(model, train, &staging) {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.join(INDEX_FILE))
}

impl CheckpointIndex {
    /// Parses an index document and checks its version and tensor table.
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let index: CheckpointIndex = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if index.version != FORMAT_VERSION {
            return Err(format!("checkpoint version {} (supported: {FORMAT_VERSION})", index.version));
        }
        for t in &index.tensors {
            let relative = Path::new(&t.file);
            if relative.is_absolute() || relative.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
                return Err(format!("tensor {}: file {:?} escapes the checkpoint directory", t.name, t.file));
            }
        }
        Ok(index)
    }
}

pub fn read_index(path: &Path) -> Result<CheckpointIndex> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CheckpointIndex::parse(&text).map_err(|msg| Error::Parse {
        path: path.to_path_buf(),
        msg,
    })
}

/// Accepts either the index file or the directory holding it.
pub fn load(path: &Path) -> Result<(HsnModel, Option<TrainConfig>)> {
    let index_path = if path.is_dir() {
        path.join(INDEX_FILE)
    } else {
        path.to_path_buf()
    };
    let root = index_path.parent().unwrap_or(Path::new("."));
    let index = read_index(&index_path)?;
    let mut model = HsnModel::new(index.hyper.clone(), index.arch.clone())?;
    let expected = model.store.len();
    if index.tensors.len() != expected {
        return Err(Error::invalid(format!(
            "checkpoint lists {} tensors, model has {expected}",
            index.tensors.len()
        )));
    }
    for record in &index.tensors {
        let id = model
            .store
            .find(&record.name)
            .ok_or_else(|| Error::invalid(format!("tensor {}: not a parameter of this model", record.name)))?;
        let value = read_feature(&root.join(&record.file))?;
        let want = model.store.get(id).shape().to_vec();
        if value.shape() != want.as_slice() {
            return Err(Error::invalid(format!(
                "tensor {}: checkpoint shape {:?}, model expects {want:?}",
                record.name,
                value.shape()
            )));
        }
        *model.store.get_mut(id) = value;
    }
    Ok((model, index.train))
}
