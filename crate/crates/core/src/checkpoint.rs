//! On-disk tensor bundles.
//!
//! A checkpoint is a directory with `manifest.json` (names, shapes, dtype,
//! offsets and free-form metadata) and `params.bin`, the little-endian `f32`
//! data of every tensor concatenated in manifest order. Writes go to a
//! sibling temporary directory that is renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `params.bin`.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub tensors: Vec<TensorRecord>,
    pub meta: serde_json::Value,
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    dir.with_file_name(name)
}

/// Writes `tensors` and `meta` to `dir`, replacing any previous checkpoint
/// there only once the new one is complete.
pub fn save(dir: &Path, tensors: &[(String, &Tensor<f32>)], meta: serde_json::Value) -> Result<()> {
    let tmp = sibling(dir, ".partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    let mut records = Vec::with_capacity(tensors.len());
    let mut bin = Vec::new();
    for (name, t) in tensors {
        records.push(TensorRecord {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32le".into(),
            offset: bin.len() as u64,
        });
        for v in t.data() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        tensors: records,
        meta,
    };
    let mut f = fs::File::create(tmp.join(PARAMS))?;
    f.write_all(&bin)?;
    f.sync_all()?;
    fs::write(tmp.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;

    let old = sibling(dir, ".old");
    if dir.exists() {
        if old.exists() {
            fs::remove_dir_all(&old)?;
        }
        fs::rename(dir, &old)?;
    }
    fs::rename(&tmp, dir)?;
    if old.exists() {
        fs::remove_dir_all(&old)?;
    }
    Ok(())
}

/// Reads every tensor back, in manifest order, with the metadata.
pub fn load(dir: &Path) -> Result<(Vec<(String, Tensor<f32>)>, serde_json::Value)> {
    let manifest: Manifest = serde_json::from_slice(
        &fs::read(dir.join(MANIFEST))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(MANIFEST).display())))?,
    )?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let bin = fs::read(dir.join(PARAMS))?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for r in manifest.tensors {
        if r.dtype != "f32le" {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", r.name, r.dtype)));
        }
        let n: usize = r.shape.iter().product();
        let start = r.offset as usize;
        let end = start + 4 * n;
        let bytes = bin
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("{}: data out of range", r.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((r.name, Tensor::new(r.shape, data)?));
    }
    Ok((out, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let a = Tensor::new(vec![2, 2], vec![1.0f32, -0.0, f32::MIN_POSITIVE, 1e-38]).unwrap();
        let b = Tensor::scalar(std::f32::consts::PI);
        let meta = serde_json::json!({"step": 7});
        save(&path, &[("a".into(), &a), ("b".into(), &b)], meta.clone()).unwrap();
        let (t, m) = load(&path).unwrap();
        assert_eq!(m, meta);
        assert_eq!(t[0].0, "a");
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&t[0].1), bits(&a));
        assert_eq!(t[1].1.shape(), &[] as &[usize]);
        assert_eq!(bits(&t[1].1), bits(&b));
    }

    #[test]
    fn overwrite_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let a = Tensor::from_vec(vec![1.0f32; 4]);
        save(&path, &[("a".into(), &a)], serde_json::Value::Null).unwrap();
        let c = Tensor::from_vec(vec![2.0f32; 4]);
        save(&path, &[("a".into(), &c)], serde_json::Value::Null).unwrap();
        assert_eq!(load(&path).unwrap().0[0].1, c);
        assert!(!sibling(&path, ".partial").exists());
        fs::write(path.join(PARAMS), [0u8; 3]).unwrap();
        assert!(load(&path).is_err());
        assert!(load(&dir.path().join("absent")).is_err());
    }
}
