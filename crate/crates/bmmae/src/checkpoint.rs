//! Checkpoint directories: `manifest.json` describing every tensor and
//! `params.bin` holding the tensors back to back as little-endian f32.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use bmmae_core::model::{ModelConfig, ModelState};
use bmmae_core::params::Parameters;
use bmmae_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const FORMAT: &str = "bmmae-checkpoint";
/// Name prefix of task-head tensors in fine-tuned checkpoints.
pub const HEAD_PREFIX: &str = "head.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into `params.bin`.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// Task metadata such as the head kind, subset or survival cut points.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

/// Writes every tensor of `params` in visiting order.
pub fn save_checkpoint<P: Parameters<f32>>(
    dir: &Path,
    config: &ModelConfig,
    params: &P,
    extra: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    params.visit("", &mut |name, t| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: [t.rows(), t.cols()],
            offset: blob.len() as u64,
        });
        blob.extend(t.as_slice().iter().flat_map(|x| x.to_le_bytes()));
    });
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        dtype: "f32".into(),
        config: config.clone(),
        tensors,
        extra,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    let mp = dir.join(MANIFEST_FILE);
    fs::write(&mp, json).map_err(|e| Error::io(format!("writing {}", mp.display()), e))?;
    let bp = dir.join(PARAMS_FILE);
    fs::write(&bp, blob).map_err(|e| Error::io(format!("writing {}", bp.display()), e))
}

/// A loaded checkpoint: manifest plus named tensors.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    tensors: BTreeMap<String, Tensor<f32>>,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mp = dir.join(MANIFEST_FILE);
    let raw = fs::read(&mp).map_err(|e| Error::io(format!("reading {}", mp.display()), e))?;
    let malformed = |message: String| CheckpointError::MalformedManifest {
        path: mp.clone(),
        message,
    };
    let manifest: Manifest = serde_json::from_slice(&raw).map_err(|e| malformed(e.to_string()))?;
    if manifest.format != FORMAT || manifest.dtype != "f32" {
        return Err(malformed(format!(
            "unsupported format {} / dtype {}",
            manifest.format, manifest.dtype
        ))
        .into());
    }
    manifest
        .config
        .validate()
        .map_err(|e| malformed(e.to_string()))?;
    let bp = dir.join(PARAMS_FILE);
    let blob = fs::read(&bp).map_err(|e| Error::io(format!("reading {}", bp.display()), e))?;
    let mut expected = 0u64;
    let mut tensors = BTreeMap::new();
    for entry in &manifest.tensors {
        if entry.offset != expected {
            return Err(malformed(format!("tensor `{}` is not contiguous", entry.name)).into());
        }
        let len = (entry.shape[0] * entry.shape[1]) as u64;
        expected += 4 * len;
        if expected > blob.len() as u64 {
            return Err(CheckpointError::BlobMismatch {
                expected,
                actual: blob.len() as u64,
            }
            .into());
        }
        let bytes = &blob[entry.offset as usize..expected as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if tensors
            .insert(
                entry.name.clone(),
                Tensor::from_vec(entry.shape[0], entry.shape[1], data),
            )
            .is_some()
        {
            return Err(malformed(format!("duplicate tensor `{}`", entry.name)).into());
        }
    }
    if expected != blob.len() as u64 {
        return Err(CheckpointError::BlobMismatch {
            expected,
            actual: blob.len() as u64,
        }
        .into());
    }
    Ok(Checkpoint { manifest, tensors })
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.manifest.config
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Copies tensors named `prefix + name` into `params`. Every parameter
    /// must be present with a matching shape; with `exclusive`, any other
    /// checkpoint tensor under `prefix` outside `ignore` is an error.
    fn restore<P: Parameters<f32>>(
        &self,
        params: &mut P,
        prefix: &str,
        ignore: Option<&str>,
    ) -> Result<()> {
        let mut used = std::collections::BTreeSet::new();
        let mut failure: Option<CheckpointError> = None;
        params.visit_mut("", &mut |name, t| {
            if failure.is_some() {
                return;
            }
            let key = format!("{prefix}{name}");
            match self.tensors.get(&key) {
                None => failure = Some(CheckpointError::MissingParameter(key)),
                Some(src) if src.shape() != t.shape() => {
                    failure = Some(CheckpointError::WidthMismatch {
                        name: key,
                        expected: t.shape(),
                        found: src.shape(),
                    })
                }
                Some(src) => {
                    *t = src.clone();
                    used.insert(key);
                }
            }
        });
        if let Some(f) = failure {
            return Err(f.into());
        }
        for name in self.tensors.keys() {
            let ours = name.starts_with(prefix) && !ignore.is_some_and(|ig| name.starts_with(ig));
            if ours && !used.contains(name) {
                return Err(CheckpointError::UnknownParameter(name.clone()).into());
            }
        }
        Ok(())
    }

    /// Rebuilds the model. With `expected`, the checkpoint must fit that
    /// configuration's shapes; masking hyperparameters may differ.
    pub fn model(&self, expected: Option<&ModelConfig>) -> Result<(ModelConfig, ModelState<f32>)> {
        let config = expected
            .cloned()
            .unwrap_or_else(|| self.manifest.config.clone());
        if let Some(e) = expected {
            if e.input_shape != self.manifest.config.input_shape
                || e.patch != self.manifest.config.patch
            {
                return Err(CheckpointError::ConfigMismatch(format!(
                    "checkpoint expects {:?} volumes with patch {}, run uses {:?} with patch {}",
                    self.manifest.config.input_shape,
                    self.manifest.config.patch,
                    e.input_shape,
                    e.patch
                ))
                .into());
            }
        }
        let mut state = ModelState::zeros(&config);
        self.restore(&mut state, "", Some(HEAD_PREFIX))?;
        Ok((config, state))
    }

    /// Restores a task head stored under [`HEAD_PREFIX`].
    pub fn head<P: Parameters<f32>>(&self, head: &mut P) -> Result<()> {
        self.restore(head, HEAD_PREFIX, None)
    }
}
