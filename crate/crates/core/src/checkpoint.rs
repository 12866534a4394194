//! Checkpoint format: JSON manifest + raw little-endian f32 payload.
//!
//! ```text
//! bytes 0..8   magic "RSEGCKPT"
//! bytes 8..16  u64 LE manifest length M
//! bytes 16..16+M  manifest JSON (see [`CheckpointManifest`])
//! rest         tensor payload, f32 LE, in manifest order
//! ```
//!
//! Save-load-save is byte-identical; loading validates tensor names and
//! shapes against the live parameter store.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use refseg_nn::{ParamStore, Scalar};

use crate::config::RunConfig;
use crate::error::{CoreError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RSEGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub dtype: String,
    pub config_hash: String,
    /// Verbatim config snapshot of the run that produced the checkpoint.
    pub config_toml: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    store: &ParamStore<T>,
    config: &RunConfig,
) -> Result<()> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0u64;
    for (id, entry) in store.iter() {
        let value = store.value(id);
        let len = value.len() as u64;
        tensors.push(TensorEntry {
            name: entry.name.clone(),
            shape: value.shape().to_vec(),
            offset,
            len,
        });
        for &v in value.iter() {
            payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
        offset += len;
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        dtype: "f32".to_string(),
        config_hash: config.hash(),
        config_toml: config.to_toml_string(),
        tensors,
    };
    let manifest_json = serde_json::to_vec(&manifest)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    f.write_all(&manifest_json)?;
    f.write_all(&payload)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<(CheckpointManifest, Vec<f32>)> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| CoreError::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CoreError::Checkpoint("bad magic".to_string()));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let mlen = u64::from_le_bytes(len_bytes) as usize;
    let mut mjson = vec![0u8; mlen];
    f.read_exact(&mut mjson)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&mjson)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(CoreError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            manifest.format_version
        )));
    }
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    if rest.len() % 4 != 0 {
        return Err(CoreError::Checkpoint("truncated payload".to_string()));
    }
    let payload: Vec<f32> = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((manifest, payload))
}

/// The config a checkpoint was trained with.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let (manifest, _) = read_manifest(path)?;
    RunConfig::from_toml_str(&manifest.config_toml)
}

/// Load tensor values into an existing (freshly built) parameter store.
/// Every stored tensor must exist with the same shape; mismatches name the
/// offending tensor.
pub fn load_into_store<T: Scalar>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    let (manifest, payload) = read_manifest(path)?;
    for entry in &manifest.tensors {
        let id = store.find(&entry.name).ok_or_else(|| {
            CoreError::Checkpoint(format!("tensor '{}' not present in model", entry.name))
        })?;
        let value = store.value_mut(id);
        if value.shape() != entry.shape.as_slice() {
            return Err(CoreError::Checkpoint(format!(
                "tensor '{}': shape {:?} in checkpoint vs {:?} in model",
                entry.name,
                entry.shape,
                value.shape()
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.len as usize;
        if end > payload.len() {
            return Err(CoreError::Checkpoint(format!(
                "tensor '{}' exceeds payload",
                entry.name
            )));
        }
        for (dst, &src) in value.iter_mut().zip(payload[start..end].iter()) {
            *dst = T::from_f32(src);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelCfg;
    use crate::model::RefSegModel;

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            model: ModelCfg {
                dim: 8,
                queries: 2,
                enc_layers: 1,
                dec_layers: 1,
                heads: 2,
                tile: 8,
                ffn_dim: 16,
                text_layers: 1,
                dyn_channels: 4,
                stage_channels: [4, 8, 8, 8],
                mask_trunk_channels: [4, 4, 8, 8, 8],
                gn_groups: 4,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = tiny_cfg();
        let mut ps = ParamStore::<f32>::new();
        let _model = RefSegModel::build(&mut ps, &cfg.model, 3);
        let dir = std::env::temp_dir().join(format!("refseg-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.ckpt");
        let p2 = dir.join("b.ckpt");
        save_checkpoint(&p1, &ps, &cfg).unwrap();
        let mut ps2 = ParamStore::<f32>::new();
        let _m2 = RefSegModel::build(&mut ps2, &cfg.model, 999); // different init
        load_into_store(&p1, &mut ps2).unwrap();
        save_checkpoint(&p2, &ps2, &cfg).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2, "round trip must be byte-identical");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let cfg = tiny_cfg();
        let mut ps = ParamStore::<f32>::new();
        let _model = RefSegModel::build(&mut ps, &cfg.model, 3);
        let dir = std::env::temp_dir().join(format!("refseg-ckpt2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("a.ckpt");
        save_checkpoint(&p, &ps, &cfg).unwrap();
        // model with a different query count: query_pos shape differs
        let mut cfg2 = tiny_cfg();
        cfg2.model.queries = 3;
        let mut ps2 = ParamStore::<f32>::new();
        let _m2 = RefSegModel::build(&mut ps2, &cfg2.model, 3);
        let err = load_into_store(&p, &mut ps2).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("det.query_pos"), "unhelpful error: {msg}");
        std::fs::remove_dir_all(&dir).ok();
    }
}
