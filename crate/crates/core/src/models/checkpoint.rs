//! Checkpoint container: named f64 arrays plus a JSON metadata block.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{AptError, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: &str = "aptbench-ckpt/1";
const META_KEY: &str = "aptbench";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: String,
    pub kind: String,
    pub dataset_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub arch: serde_json::Value,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl CheckpointMeta {
    pub fn new(kind: &str, dataset_id: &str, config_hash: &str, seed: u64, arch: serde_json::Value) -> Self {
        Self {
            format_version: FORMAT_VERSION.to_string(),
            kind: kind.to_string(),
            dataset_id: dataset_id.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            arch,
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> AptError {
    AptError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| AptError::io(dir, e))?;
    }
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = ckpt
        .params
        .iter()
        .map(|(k, t)| {
            let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (k.to_string(), raw, t.shape().to_vec())
        })
        .collect();
    let mut views = Vec::with_capacity(bytes.len());
    for (k, raw, shape) in &bytes {
        let v = TensorView::new(Dtype::F64, shape.clone(), raw).map_err(|e| ckpt_err(path, e.to_string()))?;
        views.push((k.clone(), v));
    }
    let mut meta = std::collections::HashMap::new();
    meta.insert(META_KEY.to_string(), serde_json::to_string(&ckpt.meta)?);
    safetensors::serialize_to_file(views, &Some(meta), path).map_err(|e| ckpt_err(path, e.to_string()))
}

/// Load a checkpoint; when `expected_hash` is given the stored config hash must match.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| AptError::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| ckpt_err(path, "missing metadata block"))?;
    let meta: CheckpointMeta = serde_json::from_str(meta_json).map_err(|e| ckpt_err(path, e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(ckpt_err(
            path,
            format!("format version `{}` unsupported (expected `{FORMAT_VERSION}`)", meta.format_version),
        ));
    }
    if let Some(h) = expected_hash {
        if meta.config_hash != h {
            return Err(ckpt_err(
                path,
                format!("config hash {} does not match expected {h}", meta.config_hash),
            ));
        }
    }
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    let mut params = ParamSet::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(ckpt_err(path, format!("tensor `{name}` is not f64")));
        }
        let data = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.insert(name, Tensor::new(view.shape().to_vec(), data));
    }
    Ok(Checkpoint { meta, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        params.insert("a.weight", Tensor::randn(&[3, 4], 1.0, &mut rng));
        params.insert("b", Tensor::new(vec![2], vec![f64::MIN_POSITIVE, -0.0]));
        Checkpoint {
            meta: CheckpointMeta::new("test", "shapes10", "abc", 7, serde_json::json!({"w": 3})),
            params,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.safetensors");
        let c = sample();
        save_checkpoint(&p, &c).unwrap();
        let back = load_checkpoint(&p, Some("abc")).unwrap();
        assert_eq!(back.meta, c.meta);
        for ((ka, ta), (kb, tb)) in c.params.iter().zip(back.params.iter()) {
            assert_eq!(ka, kb);
            assert_eq!(ta.shape(), tb.shape());
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn hash_and_version_mismatch_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.safetensors");
        let mut c = sample();
        save_checkpoint(&p, &c).unwrap();
        assert!(matches!(
            load_checkpoint(&p, Some("other")),
            Err(AptError::Checkpoint { .. })
        ));
        c.meta.format_version = "aptbench-ckpt/0".into();
        save_checkpoint(&p, &c).unwrap();
        assert!(matches!(load_checkpoint(&p, None), Err(AptError::Checkpoint { .. })));
    }
}
