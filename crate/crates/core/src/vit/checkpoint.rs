//! Checkpoint container: `manifest.json` (format tag, config, step, training
//! state and a tensor index) next to `tensors.bin`, one little-endian blob.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ViTParams;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub const FORMAT: &str = "seqcomp-ckpt/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub step: u64,
    pub spent: f64,
    /// Configuration the checkpoint was produced with.
    pub config: serde_json::Value,
    /// Free-form training state (optimizer step count, data position, ...).
    pub state: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Named tensors plus metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint<F: Real> {
    pub step: u64,
    pub spent: f64,
    pub config: serde_json::Value,
    pub state: serde_json::Value,
    pub tensors: Vec<(String, Tensor<F>)>,
}

impl<F: Real> Checkpoint<F> {
    pub fn new(step: u64, spent: f64, config: serde_json::Value, state: serde_json::Value) -> Self {
        Self { step, spent, config, state, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor<F>) {
        self.tensors.push((name.into(), t.clone()));
    }

    /// Adds every parameter as `<prefix>.<name>`.
    pub fn push_params(&mut self, prefix: &str, params: &ViTParams<F>) {
        for (name, t) in params.named() {
            self.push(format!("{prefix}.{name}"), t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.tensors.iter().any(|(n, _)| n.starts_with(&p))
    }

    /// Rebuilds parameters stored under `prefix` using `template` for layout
    /// and shapes.
    pub fn params(&self, prefix: &str, template: &ViTParams<F>) -> Result<ViTParams<F>> {
        let slots = template
            .named()
            .into_iter()
            .map(|(name, t)| {
                let full = format!("{prefix}.{name}");
                let v = self.get(&full).ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor '{full}'")))?;
                if v.shape() != t.shape() {
                    return Err(Error::shape("checkpoint", format!("{full}: stored {:?}, expected {:?}", v.shape(), t.shape())));
                }
                Ok(v.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        ViTParams::from_slots(template, slots)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), dtype: F::DTYPE.to_string(), offset: blob.len() as u64 });
            for &v in t.data() {
                match F::DTYPE {
                    "f32" => blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                    _ => blob.extend_from_slice(&v.as_f64().to_le_bytes()),
                }
            }
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            step: self.step,
            spent: self.spent,
            config: self.config.clone(),
            state: self.state.clone(),
            tensors: entries,
        };
        let blob_path = dir.join(BLOB_FILE);
        fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
        // The manifest goes last so a readable manifest implies a complete blob.
        let mpath = dir.join(MANIFEST_FILE);
        let mut f = fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
        f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes()).map_err(|e| Error::io(&mpath, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        if !mpath.is_file() {
            return Err(Error::MissingCheckpoint(dir.to_path_buf()));
        }
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT {
            return Err(Error::invalid(format!("unsupported checkpoint format '{}'", manifest.format)));
        }
        let bpath = dir.join(BLOB_FILE);
        let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let width = match e.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(Error::invalid(format!("tensor '{}' has unknown dtype '{other}'", e.name))),
            };
            let start = e.offset as usize;
            let bytes = blob
                .get(start..start + n * width)
                .ok_or_else(|| Error::invalid(format!("tensor '{}' extends past the end of {BLOB_FILE}", e.name)))?;
            let data = bytes
                .chunks_exact(width)
                .map(|c| match width {
                    4 => F::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
                    _ => F::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
                })
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        Ok(Self { step: manifest.step, spent: manifest.spent, config: manifest.config, state: manifest.state, tensors })
    }
}
