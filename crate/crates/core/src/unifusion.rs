//! Multi-scale reference fusion: cross-attention from current-frame tokens
//! to reference tokens, modulated by zero-initialized scale/shift/gate
//! parameters regressed from the pooled reference keys, injected residually.
//!
//! One parameter set serves every pyramid level and every reference
//! modality; multiway fusion applies the module once per reference,
//! sequentially. Because the modulation head starts at exactly zero, the
//! module is an exact identity until training moves it.

use refseg_nn::layers::Linear;
use refseg_nn::ops::AttentionCfg;
use refseg_nn::{ParamStore, Scalar, Session, Var};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelCfg;
use crate::encoders::{posenc_leaf, FeaturePyramid, LanguageFeatures, MaskReferenceFeatures};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefKind {
    Mask,
    Language,
}

/// Key/value tokens of one reference at one pyramid level.
pub struct LevelKV {
    pub keys: Var,
    pub values: Var,
    pub valid: Vec<bool>,
    /// Token grid of mask references (used for position encodings).
    pub grid: Option<(usize, usize)>,
}

/// One reference, resolved per level. Mask references carry distinct
/// key/value sequences per level (frame features as keys, mask-conditioned
/// features as values); a language reference reuses one sequence everywhere.
pub struct ReferenceKV {
    pub kind: RefKind,
    levels: Vec<LevelKV>,
}

impl ReferenceKV {
    pub fn from_mask_features(m: &MaskReferenceFeatures) -> Self {
        let levels = (0..3)
            .map(|l| {
                let n = m.hw[l].0 * m.hw[l].1;
                LevelKV {
                    keys: m.frame_tokens[l],
                    values: m.mask_tokens[l],
                    valid: vec![true; n],
                    grid: Some(m.hw[l]),
                }
            })
            .collect();
        ReferenceKV {
            kind: RefKind::Mask,
            levels,
        }
    }

    pub fn from_language(l: &LanguageFeatures) -> Self {
        ReferenceKV {
            kind: RefKind::Language,
            levels: vec![LevelKV {
                keys: l.tokens,
                values: l.tokens,
                valid: l.valid.clone(),
                grid: None,
            }],
        }
    }

    /// Concatenate several mask references (the n-shot support stack).
    pub fn concat_mask_refs<T: Scalar>(
        s: &Session<'_, T>,
        refs: &[&MaskReferenceFeatures],
    ) -> Result<Self> {
        if refs.is_empty() {
            return Err(CoreError::EmptySupports);
        }
        let t = &s.tape;
        let levels = (0..3)
            .map(|l| {
                let keys: Vec<Var> = refs.iter().map(|r| r.frame_tokens[l]).collect();
                let values: Vec<Var> = refs.iter().map(|r| r.mask_tokens[l]).collect();
                let total: usize = refs.iter().map(|r| r.hw[l].0 * r.hw[l].1).sum();
                LevelKV {
                    keys: t.concat(&keys, 0),
                    values: t.concat(&values, 0),
                    valid: vec![true; total],
                    grid: None, // concatenated grids lose a single layout
                }
            })
            .collect();
        Ok(ReferenceKV {
            kind: RefKind::Mask,
            levels,
        })
    }

    /// The level entry used when fusing pyramid level `li` (0 = stride 8).
    pub fn level(&self, li: usize) -> &LevelKV {
        if self.levels.len() == 1 {
            &self.levels[0]
        } else {
            &self.levels[li]
        }
    }
}

pub struct UniFusion {
    proj_q: Linear,
    proj_k: Linear,
    proj_v: Linear,
    proj_out: Linear,
    /// Zero-initialized regressor: pooled keys -> (gamma, beta, alpha).
    modulation: Linear,
    pub heads: usize,
    pub tile: usize,
    pub use_pos: bool,
    dim: usize,
}

impl UniFusion {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelCfg) -> Self {
        let c = cfg.dim;
        UniFusion {
            proj_q: Linear::new(ps, rng, "fusion.q", c, c),
            proj_k: Linear::new(ps, rng, "fusion.k", c, c),
            proj_v: Linear::new(ps, rng, "fusion.v", c, c),
            proj_out: Linear::new(ps, rng, "fusion.out", c, c),
            modulation: Linear::zeroed(ps, "fusion.modulation", c, 3 * c),
            heads: cfg.heads,
            tile: cfg.tile,
            use_pos: cfg.fusion_pos_enc,
            dim: c,
        }
    }

    /// Fuse one level's tokens with one reference.
    ///
    /// `F' = F + alpha ⊙ (O(1 + gamma) + beta)` where `O` is the attended
    /// output and `(gamma, beta, alpha)` are regressed from the mean over
    /// valid reference keys.
    pub fn unifuse_level<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        f_tokens: Var,
        grid: (usize, usize),
        kv: &LevelKV,
    ) -> Result<Var> {
        if kv.valid.iter().all(|v| !v) {
            return Err(CoreError::NoValidKeys);
        }
        let t = &s.tape;
        let c = self.dim;
        let q_in = if self.use_pos {
            let pe = posenc_leaf(s, grid.0, grid.1, c);
            t.add(f_tokens, pe)
        } else {
            f_tokens
        };
        let k_in = match (self.use_pos, kv.grid) {
            (true, Some((kh, kw))) => {
                let pe = posenc_leaf(s, kh, kw, c);
                t.add(kv.keys, pe)
            }
            _ => kv.keys,
        };
        let q = self.proj_q.forward(s, q_in);
        let k = self.proj_k.forward(s, k_in);
        let v = self.proj_v.forward(s, kv.values);
        let attended = t.attention(
            q,
            k,
            v,
            AttentionCfg {
                heads: self.heads,
                tile: self.tile,
            },
            Some(&kv.valid),
        );
        let o = self.proj_out.forward(s, attended);

        let pooled = t.mean_rows_masked(kv.keys, &kv.valid);
        let pooled = t.reshape(pooled, &[1, c]);
        let mods = self.modulation.forward(s, pooled);
        let gamma = t.reshape(t.slice_axis_op(mods, 1, 0, c), &[c]);
        let beta = t.reshape(t.slice_axis_op(mods, 1, c, 2 * c), &[c]);
        let alpha = t.reshape(t.slice_axis_op(mods, 1, 2 * c, 3 * c), &[c]);

        let scaled = t.add(o, t.mul_row(o, gamma));
        let shifted = t.add_row(scaled, beta);
        let gated = t.mul_row(shifted, alpha);
        Ok(t.add(f_tokens, gated))
    }

    /// Apply every reference to pyramid levels 2..4, sequentially in list
    /// order, with this single shared parameter set. Level 1 passes through.
    pub fn fuse_pyramid<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        pyramid: &FeaturePyramid,
        refs: &[&ReferenceKV],
    ) -> Result<FeaturePyramid> {
        if refs.is_empty() {
            return Err(CoreError::EmptyReferences);
        }
        let t = &s.tape;
        let mut levels = [pyramid.levels[0]; 4];
        for li in 0..3 {
            let (h, w) = pyramid.hw[li + 1];
            let mut tokens = t.chw_to_tokens(pyramid.levels[li + 1]);
            for r in refs {
                tokens = self.unifuse_level(s, tokens, (h, w), r.level(li))?;
            }
            levels[li + 1] = t.tokens_to_chw(tokens, h, w);
        }
        Ok(FeaturePyramid {
            levels,
            hw: pyramid.hw,
        })
    }
}
