//! On-disk layout of a run:
//!
//! ```text
//! <out>/seed-<s>/checkpoints/<role>.bin   ordered tensor snapshots
//! <out>/seed-<s>/checkpoints/manifest.json
//! <out>/seed-<s>/logs/<role>.csv
//! <out>/seed-<s>/embeddings/{teacher,student}.bin
//! <out>/seed-<s>/metrics.json
//! ```
//!
//! Every file is written to a temporary sibling first and then renamed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::metrics::RunMetrics;
use crate::models::{save_parameters, ModelSpec, Parameters};
use crate::tensor::snapshot::write_matrix;
use crate::tensor::Matrix;

/// Checkpoints written for a full run, in manifest order.
pub const CHECKPOINT_ROLES: [&str; 5] = ["mlp-expert", "gcn-expert", "projector", "reference", "student"];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub role: String,
    pub file: String,
    pub tensors: usize,
    pub spec: ModelSpec,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub checkpoints: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(config_hash: &str, seed: u64) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            seed,
            checkpoints: Vec::new(),
        }
    }

    /// Writes the snapshot for one model and records it.
    pub fn add<M: Parameters + ?Sized>(
        &mut self,
        dir: &Path,
        role: &str,
        model: &M,
        spec: ModelSpec,
        best_epoch: Option<usize>,
    ) -> Result<(), PipelineError> {
        let file = format!("{role}.bin");
        let mut bytes = Vec::new();
        save_parameters(model, &mut bytes)?;
        write_atomic(&dir.join("checkpoints").join(&file), &bytes)?;
        self.checkpoints.push(ManifestEntry {
            role: role.to_string(),
            file,
            tensors: model.params().len(),
            spec,
            best_epoch,
        });
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        write_json(&dir.join("checkpoints").join("manifest.json"), self)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Artifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let err = |message: String| PipelineError::Artifact {
        path: path.to_path_buf(),
        message,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| err(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| err(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub(crate) fn write_embedding(path: &Path, m: &Matrix) -> Result<(), PipelineError> {
    let mut bytes = Vec::new();
    write_matrix(&mut bytes, m)?;
    write_atomic(path, &bytes)
}

/// Test-split metrics of one seed, for the student and the vanilla model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub student: RunMetrics,
    pub vanilla: RunMetrics,
}

pub fn read_seed_metrics(dir: &Path) -> Result<SeedMetrics, PipelineError> {
    let path = dir.join("metrics.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Artifact {
        path,
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b/file.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        let names: Vec<_> = fs::read_dir(p.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }
}
