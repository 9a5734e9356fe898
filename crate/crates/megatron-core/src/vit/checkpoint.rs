//! Binary parameter checkpoints.
//!
//! Layout: magic, format version, JSON-encoded `ModelConfig`, then each
//! tensor as (name, shape, little-endian f64 data) in the stable order of
//! [`Params::named_views`]. Round-trips are value-exact because the raw f64
//! bit patterns are preserved.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use super::{ModelConfig, Params, VitModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MGTNCKPT";
const VERSION: u32 = 1;

pub fn save_checkpoint(model: &VitModel, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config())?;
    buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    buf.extend_from_slice(&cfg);
    let tensors = model.params().named_views();
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, view) in tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u64).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(view.ndim() as u64).to_le_bytes());
        for &d in view.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in view.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<VitModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
        if *cur + n > bytes.len() {
            return Err(Error::Input(format!(
                "checkpoint {} is truncated",
                path.display()
            )));
        }
        let s = &bytes[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };
    if take(&mut cur, 8)? != MAGIC {
        return Err(Error::Input(format!(
            "{} is not a parameter checkpoint",
            path.display()
        )));
    }
    let ver = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
    if ver != VERSION {
        return Err(Error::Input(format!(
            "checkpoint format version {ver} unsupported (expected {VERSION})"
        )));
    }
    let read_u64 = |cur: &mut usize| -> Result<u64> {
        Ok(u64::from_le_bytes(take(cur, 8)?.try_into().unwrap()))
    };
    let cfg_len = read_u64(&mut cur)? as usize;
    let config: ModelConfig = serde_json::from_slice(take(&mut cur, cfg_len)?)?;
    config.validate()?;
    let n_tensors = read_u64(&mut cur)? as usize;
    let mut tensors: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    for _ in 0..n_tensors {
        let name_len = read_u64(&mut cur)? as usize;
        let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
            .map_err(|_| Error::Input("checkpoint tensor name is not UTF-8".into()))?;
        let ndim = read_u64(&mut cur)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut cur)? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = take(&mut cur, count * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Input(format!("tensor {name}: {e}")))?;
        tensors.insert(name, arr);
    }
    if cur != bytes.len() {
        return Err(Error::Input(format!(
            "checkpoint {} has trailing bytes",
            path.display()
        )));
    }
    let params = Params::from_named(&config, tensors)?;
    VitModel::new(config, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_is_value_exact() {
        let cfg = ModelConfig {
            n_layers: 2,
            ..ModelConfig::default()
        };
        let model = VitModel::init(cfg, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(model.config(), loaded.config());
        assert_eq!(model.params(), loaded.params());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPT____").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        let err = load_checkpoint(Path::new("/nonexistent/m.ckpt")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }
}
