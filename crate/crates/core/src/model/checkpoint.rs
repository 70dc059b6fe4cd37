//! Checkpoint directories: `manifest.json` describing every tensor plus
//! `weights.bin` holding the raw little-endian values in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub frozen: bool,
    /// Byte offset into `weights.bin`.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    /// Free-form echo of the run configuration.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub manifest: Manifest,
    pub params: ParamStore<T>,
}

impl<T: Real> Checkpoint<T> {
    /// Overwrites the values of same-named parameters in `store`. Every
    /// parameter of `store` must be present with the same shape.
    pub fn restore_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for p in store.iter_mut() {
            let src = self.params.by_name(&p.name).ok_or_else(|| {
                Error::Input(format!("checkpoint lacks parameter `{}`", p.name))
            })?;
            if src.tensor.shape() != p.tensor.shape() {
                return Err(Error::Shape {
                    op: "restore",
                    left: p.tensor.shape().to_vec(),
                    right: src.tensor.shape().to_vec(),
                });
            }
            p.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }
}

/// Writes `dir` atomically: the files go to a sibling temp directory that is
/// renamed into place, replacing any previous checkpoint.
pub fn save_checkpoint<T: Real>(
    dir: &Path,
    config: &serde_json::Value,
    store: &ParamStore<T>,
) -> Result<()> {
    let mut weights = Vec::with_capacity(store.numel() * T::BYTES);
    let mut tensors = Vec::with_capacity(store.len());
    for p in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            group: p.group,
            frozen: p.frozen,
            offset: weights.len(),
        });
        for &v in p.tensor.data() {
            v.write_le(&mut weights);
        }
    }
    let manifest = Manifest {
        dtype: T::DTYPE.to_string(),
        config: config.clone(),
        tensors,
    };

    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Input(format!("bad checkpoint path {}", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = sibling(dir, &format!(".{name}.tmp"));
    let old = sibling(dir, &format!(".{name}.old"));
    for stale in [&tmp, &old] {
        if stale.exists() {
            fs::remove_dir_all(stale).map_err(|e| Error::io(stale, e))?;
        }
    }
    fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mpath = tmp.join("manifest.json");
    fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    let wpath = tmp.join("weights.bin");
    fs::write(&wpath, &weights).map_err(|e| Error::io(&wpath, e))?;

    if dir.exists() {
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

fn sibling(dir: &Path, name: &str) -> PathBuf {
    dir.with_file_name(name)
}

/// Reads a checkpoint written with either `f32` or `f64` values into `T`.
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<Checkpoint<T>> {
    let mpath = dir.join("manifest.json");
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    let wpath = dir.join("weights.bin");
    let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let width = match manifest.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Input(format!("unsupported dtype `{other}`"))),
    };
    let mut params = ParamStore::new();
    for t in &manifest.tensors {
        let n: usize = t.shape.iter().product();
        let end = t.offset + n * width;
        let raw = bytes.get(t.offset..end).ok_or_else(|| {
            Error::Input(format!("weights.bin too short for `{}`", t.name))
        })?;
        let data = raw
            .chunks_exact(width)
            .map(|c| {
                if width == 4 {
                    T::lit(f32::read_le(c) as f64)
                } else {
                    T::lit(f64::read_le(c))
                }
            })
            .collect();
        params.add(t.name.clone(), t.group, t.frozen, Tensor::new(t.shape.clone(), data)?)?;
    }
    Ok(Checkpoint { manifest, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f32>::new();
        let vals = vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.25e-7, 1e30, -2.0];
        s.add("a", ParamGroup::Head, false, Tensor::new([2, 3], vals.clone()).unwrap())
            .unwrap();
        s.add("b", ParamGroup::Router, true, Tensor::new([1], vec![0.1f32]).unwrap())
            .unwrap();
        let path = dir.path().join("ckpt");
        let cfg = serde_json::json!({"seed": 1});
        save_checkpoint(&path, &cfg, &s).unwrap();
        // second save replaces the first
        save_checkpoint(&path, &cfg, &s).unwrap();
        let c = load_checkpoint::<f32>(&path).unwrap();
        let a = c.params.by_name("a").unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.tensor.data()), bits(&vals));
        assert!(c.params.by_name("b").unwrap().frozen);
        assert_eq!(c.manifest.config, cfg);
    }
}
