//! Run configuration: TOML schema, flat-key overrides and config hashing.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusCfg;
use crate::error::{CoreError, Result};
use crate::vocab;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelCfg {
    /// Shared channel dimension C.
    pub dim: usize,
    /// Object query count N.
    pub queries: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    /// Attention tile size (tokens per streamed key block).
    pub tile: usize,
    pub ffn_dim: usize,
    pub text_layers: usize,
    pub vocab: usize,
    pub max_text_len: usize,
    /// Channels of the dynamic-conv hidden layers.
    pub dyn_channels: usize,
    /// Visual encoder stage widths (strides 4/8/16/32).
    pub stage_channels: [usize; 4],
    /// Mask-encoder trunk widths (strides 2/4/8/16/32).
    pub mask_trunk_channels: [usize; 5],
    pub gn_groups: usize,
    /// Add 2-d sine position encodings to fusion queries and mask-ref keys.
    pub fusion_pos_enc: bool,
    /// Multiway order: mask references before the language reference.
    pub mask_ref_first: bool,
    /// Supervise every decoder layer, not just the last.
    pub aux_loss: bool,
}

impl Default for ModelCfg {
    fn default() -> Self {
        ModelCfg {
            dim: 64,
            queries: 300,
            enc_layers: 6,
            dec_layers: 6,
            heads: 8,
            tile: 64,
            ffn_dim: 256,
            text_layers: 2,
            vocab: vocab::VOCAB_SIZE,
            max_text_len: vocab::MAX_TEXT_LEN,
            dyn_channels: 8,
            stage_channels: [32, 64, 96, 128],
            mask_trunk_channels: [16, 16, 32, 48, 64],
            gn_groups: 8,
            fusion_pos_enc: true,
            mask_ref_first: true,
            aux_loss: true,
        }
    }
}

impl ModelCfg {
    /// Length of one dynamic-conv kernel vector under this config.
    pub fn kernel_len(&self) -> usize {
        let cin = self.dim + 2;
        let ch = self.dyn_channels;
        (cin * ch + ch) + (ch * ch + ch) + (ch + 1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossCfg {
    pub lambda_cls: f64,
    pub lambda_giou: f64,
    pub lambda_l1: f64,
    pub lambda_mask: f64,
    pub lambda_dice: f64,
    /// Positives per ground truth.
    pub topk: usize,
    /// OTA-style dynamic k estimation instead of fixed top-k.
    pub dynamic_k: bool,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Normalize the classification term by k (positive count) vs by N.
    pub normalize_cls_by_k: bool,
}

impl Default for LossCfg {
    fn default() -> Self {
        LossCfg {
            lambda_cls: 2.0,
            lambda_giou: 2.0,
            lambda_l1: 5.0,
            lambda_mask: 2.0,
            lambda_dice: 5.0,
            topk: 4,
            dynamic_k: false,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            normalize_cls_by_k: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCfg {
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Steps of the image-level stage (RIS + FSS).
    pub image_steps: u64,
    /// Steps of the video-level stage (VOS + RVOS + pseudo-videos).
    pub video_steps: u64,
    /// Fraction of each stage after which the learning rate drops x0.1.
    pub lr_drop_frac: f64,
    pub grad_clip: f64,
    /// Task sampling ratios for the image stage.
    pub ratios_image: BTreeMap<String, f64>,
    /// Task sampling ratios for the video stage (PSEUDO mixes pseudo-videos
    /// built from RIS stills).
    pub ratios_video: BTreeMap<String, f64>,
    pub log_every: u64,
    /// Freeze the text encoder during the video stage.
    pub freeze_text_in_video_stage: bool,
}

impl Default for TrainCfg {
    fn default() -> Self {
        let mut ratios_image = BTreeMap::new();
        ratios_image.insert("RIS".to_string(), 1.0);
        ratios_image.insert("FSS".to_string(), 1.0);
        let mut ratios_video = BTreeMap::new();
        ratios_video.insert("VOS".to_string(), 1.0);
        ratios_video.insert("RVOS".to_string(), 1.0);
        ratios_video.insert("PSEUDO".to_string(), 0.5);
        TrainCfg {
            seed: 7,
            lr: 3e-4,
            weight_decay: 0.05,
            image_steps: 1600,
            video_steps: 2400,
            lr_drop_frac: 0.8,
            grad_clip: 1.0,
            ratios_image,
            ratios_video,
            log_every: 50,
            freeze_text_in_video_stage: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InferCfg {
    /// Score threshold for VOS-style propagation.
    pub sigma_vos: f64,
    /// Score threshold for RVOS-style propagation.
    pub sigma_rvos: f64,
    /// Anchor the first confident RVOS frame as a persistent reference.
    pub rvos_anchor_first_confident: bool,
    /// Use the first-frame reference during propagation.
    pub use_first_ref: bool,
    /// Use the previous-frame reference during propagation.
    pub use_prev_ref: bool,
    /// Use mask references at all for RVOS (off = language only).
    pub rvos_use_mask_ref: bool,
    pub mask_threshold: f64,
}

impl Default for InferCfg {
    fn default() -> Self {
        InferCfg {
            sigma_vos: 0.4,
            sigma_rvos: 0.3,
            rvos_anchor_first_confident: true,
            use_first_ref: true,
            use_prev_ref: true,
            rvos_use_mask_ref: true,
            mask_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelCfg,
    pub loss: LossCfg,
    pub train: TrainCfg,
    pub infer: InferCfg,
    pub data: CorpusCfg,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| CoreError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex digest of the canonical TOML form; embedded in checkpoints,
    /// metric reports and logs.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml_string().as_bytes());
        let out = hasher.finalize();
        out.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Apply a flat `section.key=value` override (CLI mirror of config keys).
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec.split_once('=').ok_or_else(|| {
            CoreError::Config(format!("override '{spec}' must look like key.path=value"))
        })?;
        let mut doc: toml::Value = toml::from_str(&self.to_toml_string())
            .map_err(|e| CoreError::Config(e.to_string()))?;
        let parts: Vec<&str> = path.split('.').collect();
        let (last, sections) = parts.split_last().unwrap();
        let mut node = &mut doc;
        for part in sections {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(*part))
                .ok_or_else(|| CoreError::Config(format!("unknown section '{part}'")))?;
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| CoreError::Config(format!("'{path}' is not inside a table")))?;
        let parsed: toml::Value = value
            .parse::<i64>()
            .map(toml::Value::Integer)
            .or_else(|_| value.parse::<f64>().map(toml::Value::Float))
            .or_else(|_| value.parse::<bool>().map(toml::Value::Boolean))
            .unwrap_or_else(|_| toml::Value::String(value.to_string()));
        table.insert(last.to_string(), parsed);
        *self = doc
            .try_into()
            .map_err(|e: toml::de::Error| CoreError::Config(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trip_and_hash_stability() {
        let cfg = RunConfig::default();
        let s = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&s).unwrap();
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn kernel_length_matches_layer_spec() {
        let cfg = ModelCfg::default();
        // (66*8+8) + (8*8+8) + (8*1+1) = 536 + 72 + 9
        assert_eq!(cfg.kernel_len(), 617);
    }

    #[test]
    fn overrides_change_hash() {
        let mut cfg = RunConfig::default();
        let h0 = cfg.hash();
        cfg.apply_override("model.queries=100").unwrap();
        assert_eq!(cfg.model.queries, 100);
        assert_ne!(cfg.hash(), h0);
        cfg.apply_override("infer.sigma_vos=0.25").unwrap();
        assert!((cfg.infer.sigma_vos - 0.25).abs() < 1e-12);
        cfg.apply_override("model.mask_ref_first=false").unwrap();
        assert!(!cfg.model.mask_ref_first);
        assert!(cfg.apply_override("bogus").is_err());
    }
}
