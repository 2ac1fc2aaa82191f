//! Checkpoints: a JSON manifest naming every tensor with its shape and
//! byte offset, plus a little-endian `f64` blob next to it.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use posegraph_core::{ModelConfig, PoseNet};
use serde::{Deserialize, Serialize};

use crate::config::SCHEMA_VERSION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

/// Adam moments of one parameter; both have the parameter's shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerEntry {
    pub name: String,
    pub step: u64,
    pub m_offset: u64,
    pub v_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub model: ModelConfig,
    /// Training epochs completed when saved.
    pub epochs_completed: usize,
    pub blob: String,
    pub params: Vec<TensorEntry>,
    pub buffers: Vec<TensorEntry>,
    pub optimizer: Vec<OptimizerEntry>,
}

/// Blob path for a manifest path: same name with a `.bin` extension.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn push(blob: &mut Vec<u8>, values: &[f64]) -> u64 {
    let offset = blob.len() as u64;
    for v in values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    offset
}

pub fn save(model: &PoseNet, epochs_completed: usize, path: &Path) -> Result<()> {
    let mut blob = Vec::new();
    let mut params = Vec::new();
    let mut optimizer = Vec::new();
    for p in model.store.params() {
        params.push(TensorEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            offset: push(&mut blob, p.tensor.data()),
        });
        optimizer.push(OptimizerEntry {
            name: p.name.clone(),
            step: p.t,
            m_offset: push(&mut blob, &p.m),
            v_offset: push(&mut blob, &p.v),
        });
    }
    let buffers = model
        .store
        .buffers()
        .iter()
        .map(|b| TensorEntry {
            name: b.name.clone(),
            shape: b.tensor.shape().to_vec(),
            offset: push(&mut blob, b.tensor.data()),
        })
        .collect();
    let bin = blob_path(path);
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        model: model.config.clone(),
        epochs_completed,
        blob: bin
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .context("checkpoint path has no file name")?,
        params,
        buffers,
        optimizer,
    };
    std::fs::write(&bin, &blob).with_context(|| format!("writing {}", bin.display()))?;
    std::fs::write(path, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_values(blob: &[u8], offset: u64, len: usize, what: &str) -> Result<Vec<f64>> {
    let start = usize::try_from(offset)?;
    let end = start + len * 8;
    ensure!(end <= blob.len(), "{what}: bytes {start}..{end} past the end of a {}-byte blob", blob.len());
    Ok(blob[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing checkpoint {}", path.display()))?;
    ensure!(
        m.schema_version == SCHEMA_VERSION,
        "{}: unsupported schema_version {}",
        path.display(),
        m.schema_version
    );
    Ok(m)
}

/// Restores a model with its optimizer state; returns it with the number
/// of completed epochs.
pub fn load(path: &Path) -> Result<(PoseNet, usize)> {
    let m = read_manifest(path)?;
    let bin = path.with_file_name(&m.blob);
    let blob = std::fs::read(&bin).with_context(|| format!("reading {}", bin.display()))?;
    let mut model = PoseNet::new(m.model.clone(), 0).with_context(|| format!("{}: model config", path.display()))?;
    ensure!(
        m.params.len() == model.store.len() && m.buffers.len() == model.store.buffers().len(),
        "{}: {} parameters / {} buffers, the configured model has {} / {}",
        path.display(),
        m.params.len(),
        m.buffers.len(),
        model.store.len(),
        model.store.buffers().len()
    );
    for e in &m.params {
        let Some(id) = model.store.find(&e.name) else {
            bail!("{}: unknown parameter {}", path.display(), e.name);
        };
        let p = model.store.get_mut(id);
        ensure!(p.tensor.shape() == e.shape.as_slice(), "{}: shape mismatch", e.name);
        let values = read_values(&blob, e.offset, p.tensor.numel(), &e.name)?;
        p.tensor.data_mut().copy_from_slice(&values);
    }
    for o in &m.optimizer {
        let Some(id) = model.store.find(&o.name) else {
            bail!("{}: optimizer state for unknown parameter {}", path.display(), o.name);
        };
        let p = model.store.get_mut(id);
        let n = p.tensor.numel();
        p.m = read_values(&blob, o.m_offset, n, &o.name)?;
        p.v = read_values(&blob, o.v_offset, n, &o.name)?;
        p.t = o.step;
    }
    for e in &m.buffers {
        let Some(id) = model.store.find_buffer(&e.name) else {
            bail!("{}: unknown buffer {}", path.display(), e.name);
        };
        let b = model.store.buffer_mut(id);
        ensure!(b.shape() == e.shape.as_slice(), "{}: shape mismatch", e.name);
        let values = read_values(&blob, e.offset, b.numel(), &e.name)?;
        b.data_mut().copy_from_slice(&values);
    }
    Ok((model, m.epochs_completed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use posegraph_core::Tensor;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut model = PoseNet::new(ModelConfig::default(), 5).unwrap();
        for (i, p) in model.store.params_mut().iter_mut().enumerate() {
            p.t = i as u64;
            p.m.iter_mut().for_each(|v| *v = 0.25);
        }
        save(&model, 7, &path).unwrap();
        let (back, epochs) = load(&path).unwrap();
        assert_eq!(epochs, 7);
        assert_eq!(back.store, model.store);
        let x = Tensor::new(&[1, 3, 64, 64], (0..3 * 64 * 64).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let a = model.predict(&x).unwrap();
        let b = back.predict(&x).unwrap();
        assert_eq!(a.heatmaps.max_abs_diff(&b.heatmaps).unwrap(), 0.0);
        assert_eq!(a.tags.max_abs_diff(&b.tags).unwrap(), 0.0);
    }

    #[test]
    fn truncated_blob_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save(&PoseNet::new(ModelConfig::default(), 1).unwrap(), 0, &path).unwrap();
        let bin = blob_path(&path);
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() / 2]).unwrap();
        let err = load(&path).unwrap_err();
        assert!(format!("{err:#}").contains("past the end"), "{err:#}");
    }
}
