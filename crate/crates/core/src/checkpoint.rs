//! Checkpoint directories: a text manifest plus one binary blob per tensor.
//!
//! Blob layout: `u32 ndim`, `ndim × u32 dims`, then little-endian `f32` data.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParameters, NamedTensor, Provenance, Role};
use crate::raster::KeyValues;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.txt";
const FORMAT: &str = "terra-ssl-checkpoint-v1";

/// Bookkeeping stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: usize,
    pub metrics: BTreeMap<String, f64>,
}

fn blob_name(i: usize, name: &str) -> String {
    format!("t{i:03}_{name}.bin")
}

pub fn save_checkpoint(params: &ModelParameters<f32>, meta: &CheckpointMeta, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut kv = KeyValues::default();
    kv.push("format", FORMAT);
    kv.push("config", toml::to_string(&params.config).unwrap().trim().replace('\n', ";"));
    kv.push("config_hash", params.config_hash());
    kv.push("provenance", params.provenance());
    kv.push("epoch", meta.epoch);
    kv.push("step", meta.step);
    for (k, v) in &meta.metrics {
        kv.push(format!("metric.{k}"), format!("{v:?}"));
    }
    for (i, t) in params.tensors.iter().enumerate() {
        let file = blob_name(i, &t.name);
        kv.push("tensor", format!("{}:{}:{}", t.name, t.role.as_str(), file));
        let mut bytes = Vec::with_capacity(4 + 4 * t.shape.len() + 4 * t.data.len());
        bytes.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            bytes.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let p = dir.join(file);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    kv.write(&dir.join(CHECKPOINT_MANIFEST))
}

fn read_blob(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::format(path, "truncated tensor blob"))
    };
    let ndim = word(0)? as usize;
    let shape: Vec<usize> = (0..ndim).map(|i| word(1 + i).map(|d| d as usize)).collect::<Result<_>>()?;
    let numel: usize = shape.iter().product();
    let start = 4 * (1 + ndim);
    if bytes.len() != start + 4 * numel {
        return Err(Error::format(path, format!("blob holds {} bytes, shape needs {}", bytes.len(), start + 4 * numel)));
    }
    let data = bytes[start..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((shape, data))
}

/// Loads a checkpoint; when `expected` is given its config must match.
pub fn load_checkpoint(dir: &Path, expected: Option<&ModelConfig>) -> Result<(ModelParameters<f32>, CheckpointMeta)> {
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    if !dir.is_dir() {
        return Err(Error::Missing(dir.to_path_buf()));
    }
    let kv = KeyValues::read(&mpath)?;
    if kv.require("format", &mpath)? != FORMAT {
        return Err(Error::format(&mpath, "unknown checkpoint format"));
    }
    let config: ModelConfig = toml::from_str(&kv.require("config", &mpath)?.replace(';', "\n"))
        .map_err(|e| Error::format(&mpath, format!("bad config: {e}")))?;
    let stored_hash = kv.require("config_hash", &mpath)?;
    if stored_hash != config.hash() {
        return Err(Error::format(&mpath, "config hash does not match stored config"));
    }
    if let Some(exp) = expected {
        if exp.hash() != stored_hash {
            return Err(Error::Config(format!(
                "checkpoint {} was built for a different model config",
                dir.display()
            )));
        }
    }
    let provenance: Provenance = kv.require("provenance", &mpath)?.parse()?;
    let mut meta = CheckpointMeta { epoch: kv.parse("epoch", &mpath)?, step: kv.parse("step", &mpath)?, ..Default::default() };
    let mut tensors = Vec::new();
    for (k, v) in &kv.0 {
        if let Some(name) = k.strip_prefix("metric.") {
            let x: f64 = v.parse().map_err(|_| Error::format(&mpath, format!("bad metric `{name}`")))?;
            meta.metrics.insert(name.to_string(), x);
        } else if k == "tensor" {
            let mut parts = v.splitn(3, ':');
            let (name, role, file) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => return Err(Error::format(&mpath, format!("bad tensor record `{v}`"))),
            };
            let role = Role::parse(role).ok_or_else(|| Error::format(&mpath, format!("unknown role `{role}`")))?;
            let (shape, data) = read_blob(&dir.join(file))?;
            tensors.push(NamedTensor { name: name.to_string(), shape, role, data });
        }
    }
    let params = ModelParameters::from_parts(config, provenance, tensors)?;
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn roundtrip_is_bit_exact() {
        let cfg = ModelConfig { base_width: 4, depth: 2, se_reduction: 2, ..Default::default() };
        let mut p = build_model(&cfg, 9).unwrap();
        p.set_provenance(Provenance::TerrainPretrained).unwrap();
        let mut meta = CheckpointMeta { epoch: 3, step: 40, ..Default::default() };
        meta.metrics.insert("val_loss".into(), 0.1 + 0.2);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&p, &meta, dir.path()).unwrap();
        let (q, m) = load_checkpoint(dir.path(), Some(&cfg)).unwrap();
        assert_eq!(m, meta);
        assert_eq!(q.provenance(), Provenance::TerrainPretrained);
        for (a, b) in p.tensors.iter().zip(&q.tensors) {
            assert_eq!(a.name, b.name);
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let other = ModelConfig { base_width: 8, ..cfg.clone() };
        assert!(matches!(load_checkpoint(dir.path(), Some(&other)), Err(Error::Config(_))));
        assert!(matches!(load_checkpoint(&dir.path().join("nope"), None), Err(Error::Missing(_))));
    }
}
