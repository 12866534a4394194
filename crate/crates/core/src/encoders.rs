//! The three reference-task encoders: a strided-conv visual encoder that
//! emits a 4-level pyramid, a mask encoder producing mask-conditioned
//! reference features, and a token-level text encoder.
//!
//! One visual encoder instance serves both the current and the reference
//! frame (shared weights), mirroring the two-frame similarity setup the
//! architecture builds on.

use ndarray::{Array3, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use refseg_nn::layers::{Conv2d, Embedding, FeedForward, GroupNorm, LayerNorm, Linear};
use refseg_nn::ops::AttentionCfg;
use refseg_nn::{ParamStore, Scalar, Session, Var};

use crate::config::ModelCfg;
use crate::error::{CoreError, Result};
use crate::mask::BinaryMask;
use crate::posenc;

/// Multi-scale features of one frame: levels at strides 4/8/16/32, all
/// projected to the shared dim C.
pub struct FeaturePyramid {
    pub levels: [Var; 4],
    pub hw: [(usize, usize); 4],
}

/// Mask-conditioned reference features at strides 8/16/32, flattened to
/// token sequences. `frame_tokens` come from the plain frame pyramid and do
/// not read the mask.
pub struct MaskReferenceFeatures {
    pub frame_tokens: [Var; 3],
    pub mask_tokens: [Var; 3],
    pub hw: [(usize, usize); 3],
}

/// Token-level language features with per-position validity.
pub struct LanguageFeatures {
    pub tokens: Var,
    pub valid: Vec<bool>,
}

pub(crate) fn image_to_leaf<T: Scalar>(s: &Session<'_, T>, image: &Array3<f32>) -> Var {
    let shape = image.shape().to_vec();
    let data: Vec<T> = image.iter().map(|&v| T::from_f32(v)).collect();
    s.tape
        .leaf(ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap())
}

fn mask_channel<T: Scalar>(mask: &BinaryMask) -> ArrayD<T> {
    let (h, w) = mask.dims();
    let data: Vec<T> = mask.grid().iter().map(|&v| T::from_usize(v as usize)).collect();
    ArrayD::from_shape_vec(IxDyn(&[1, h, w]), data).unwrap()
}

/// Conv -> GroupNorm -> ReLU.
struct ConvBlock {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvBlock {
    fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(ps, rng, &format!("{name}.conv"), cin, cout, k, stride, k / 2),
            norm: GroupNorm::new(ps, &format!("{name}.gn"), cout, groups),
        }
    }

    fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: Var) -> Var {
        let x = self.conv.forward(s, x);
        let x = self.norm.forward(s, x);
        s.tape.relu(x)
    }
}

/// Two 3x3 convs with a residual connection.
pub(crate) struct ResBlock {
    conv1: Conv2d,
    gn1: GroupNorm,
    conv2: Conv2d,
    gn2: GroupNorm,
}

impl ResBlock {
    pub(crate) fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ch: usize,
        groups: usize,
    ) -> Self {
        ResBlock {
            conv1: Conv2d::new(ps, rng, &format!("{name}.conv1"), ch, ch, 3, 1, 1),
            gn1: GroupNorm::new(ps, &format!("{name}.gn1"), ch, groups),
            conv2: Conv2d::new(ps, rng, &format!("{name}.conv2"), ch, ch, 3, 1, 1),
            gn2: GroupNorm::new(ps, &format!("{name}.gn2"), ch, groups),
        }
    }

    pub(crate) fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: Var) -> Var {
        let h = self.conv1.forward(s, x);
        let h = self.gn1.forward(s, h);
        let h = s.tape.relu(h);
        let h = self.conv2.forward(s, h);
        let h = self.gn2.forward(s, h);
        let sum = s.tape.add(h, x);
        s.tape.relu(sum)
    }
}

/// 4-stage strided conv net; stage outputs are projected to C laterally.
pub struct VisualEncoder {
    stem1: ConvBlock,
    stem2: ConvBlock,
    res1: ResBlock,
    downs: Vec<ConvBlock>,
    res: Vec<ResBlock>,
    laterals: Vec<Conv2d>,
}

impl VisualEncoder {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelCfg) -> Self {
        let chs = cfg.stage_channels;
        let g = cfg.gn_groups;
        let stem1 = ConvBlock::new(ps, rng, "visual.stem1", 3, chs[0], 3, 2, g);
        let stem2 = ConvBlock::new(ps, rng, "visual.stem2", chs[0], chs[0], 3, 2, g);
        let res1 = ResBlock::new(ps, rng, "visual.res1", chs[0], g);
        let mut downs = Vec::new();
        let mut res = Vec::new();
        for l in 1..4 {
            downs.push(ConvBlock::new(
                ps,
                rng,
                &format!("visual.down{}", l + 1),
                chs[l - 1],
                chs[l],
                3,
                2,
                g,
            ));
            res.push(ResBlock::new(
                ps,
                rng,
                &format!("visual.res{}", l + 1),
                chs[l],
                g,
            ));
        }
        let laterals = (0..4)
            .map(|l| {
                Conv2d::new(
                    ps,
                    rng,
                    &format!("visual.lateral{}", l + 1),
                    chs[l],
                    cfg.dim,
                    1,
                    1,
                    0,
                )
            })
            .collect();
        VisualEncoder {
            stem1,
            stem2,
            res1,
            downs,
            res,
            laterals,
        }
    }

    /// Extract the 4-level pyramid of one frame.
    pub fn encode_frame<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        image: &Array3<f32>,
    ) -> Result<FeaturePyramid> {
        let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
        if c != 3 || h == 0 || w == 0 {
            return Err(CoreError::TaskPrecondition(format!(
                "expected [3,H,W] image with positive dims, got [{c},{h},{w}]"
            )));
        }
        let x = image_to_leaf(s, image);
        let x = self.stem1.forward(s, x);
        let x = self.stem2.forward(s, x);
        let s1 = self.res1.forward(s, x);
        let mut stages = vec![s1];
        for l in 0..3 {
            let d = self.downs[l].forward(s, *stages.last().unwrap());
            stages.push(self.res[l].forward(s, d));
        }
        let mut levels = Vec::with_capacity(4);
        let mut hw = Vec::with_capacity(4);
        for (l, stage) in stages.iter().enumerate() {
            let p = self.laterals[l].forward(s, *stage);
            let shape = s.tape.shape(p);
            hw.push((shape[1], shape[2]));
            levels.push(p);
        }
        Ok(FeaturePyramid {
            levels: [levels[0], levels[1], levels[2], levels[3]],
            hw: [hw[0], hw[1], hw[2], hw[3]],
        })
    }
}

/// Channel-then-spatial attention gate.
pub(crate) struct Cbam {
    mlp1: Linear,
    mlp2: Linear,
    spatial: Conv2d,
}

impl Cbam {
    fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, ch: usize) -> Self {
        let hidden = (ch / 4).max(4);
        Cbam {
            mlp1: Linear::new(ps, rng, &format!("{name}.mlp1"), ch, hidden),
            mlp2: Linear::new(ps, rng, &format!("{name}.mlp2"), hidden, ch),
            spatial: Conv2d::new(ps, rng, &format!("{name}.spatial"), 2, 1, 3, 1, 1),
        }
    }

    fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: Var) -> Var {
        let t = &s.tape;
        let ch = t.shape(x)[0];
        // channel gate from pooled descriptors through the shared MLP
        let mean = t.reshape(t.mean_spatial(x), &[1, ch]);
        let maxv = t.reshape(t.max_spatial(x), &[1, ch]);
        let a = self.mlp2.forward(s, t.relu(self.mlp1.forward(s, mean)));
        let b = self.mlp2.forward(s, t.relu(self.mlp1.forward(s, maxv)));
        let gate = t.reshape(t.sigmoid(t.add(a, b)), &[ch]);
        let x = t.mul_channel(x, gate);
        // spatial gate from channelwise statistics
        let shape = t.shape(x);
        let (h, w) = (shape[1], shape[2]);
        let smean = t.reshape(t.mean_channelwise(x), &[1, h, w]);
        let smax = t.reshape(t.max_channelwise(x), &[1, h, w]);
        let stacked = t.concat(&[smean, smax], 0);
        let sgate = t.sigmoid(self.spatial.forward(s, stacked));
        let sgate = t.reshape(sgate, &[h, w]);
        t.mul_spatial(x, sgate)
    }
}

/// Lightweight trunk over (frame ⊕ mask), merged with the reference frame's
/// pyramid levels and refined by two residual blocks and a CBAM gate.
pub struct MaskEncoder {
    trunk: Vec<ConvBlock>,
    laterals: Vec<Conv2d>,
    res1: ResBlock,
    res2: ResBlock,
    cbam: Cbam,
    proj: Conv2d,
}

impl MaskEncoder {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelCfg) -> Self {
        let tc = cfg.mask_trunk_channels;
        let g = cfg.gn_groups.min(8);
        let mut trunk = Vec::new();
        let mut cin = 4;
        for (i, &cout) in tc.iter().enumerate() {
            let groups = if cout % g == 0 { g } else { 1 };
            trunk.push(ConvBlock::new(
                ps,
                rng,
                &format!("maskenc.trunk{i}"),
                cin,
                cout,
                3,
                2,
                groups,
            ));
            cin = cout;
        }
        // trunk levels at strides 8/16/32 join pyramid levels 2..4
        let laterals = (0..3)
            .map(|l| {
                Conv2d::new(
                    ps,
                    rng,
                    &format!("maskenc.lateral{}", l + 2),
                    tc[l + 2] + cfg.dim,
                    cfg.dim,
                    1,
                    1,
                    0,
                )
            })
            .collect();
        MaskEncoder {
            trunk,
            laterals,
            res1: ResBlock::new(ps, rng, "maskenc.res1", cfg.dim, cfg.gn_groups),
            res2: ResBlock::new(ps, rng, "maskenc.res2", cfg.dim, cfg.gn_groups),
            cbam: Cbam::new(ps, rng, "maskenc.cbam", cfg.dim),
            proj: Conv2d::new(ps, rng, "maskenc.proj", cfg.dim, cfg.dim, 1, 1, 0),
        }
    }

    /// Encode a reference (frame, mask) pair against the frame's pyramid.
    pub fn encode_mask_reference<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        ref_image: &Array3<f32>,
        ref_mask: &BinaryMask,
        ref_pyramid: &FeaturePyramid,
    ) -> Result<MaskReferenceFeatures> {
        let (h, w) = (ref_image.shape()[1], ref_image.shape()[2]);
        if ref_mask.dims() != (h, w) {
            return Err(CoreError::TaskPrecondition(format!(
                "reference mask {:?} does not match image ({h},{w})",
                ref_mask.dims()
            )));
        }
        let t = &s.tape;
        let img = image_to_leaf(s, ref_image);
        let m = t.leaf(mask_channel::<T>(ref_mask));
        let mut x = t.concat(&[img, m], 0);
        let mut taps = Vec::new();
        for (i, block) in self.trunk.iter().enumerate() {
            x = block.forward(s, x);
            if i >= 2 {
                taps.push(x);
            }
        }
        let mut frame_tokens = Vec::new();
        let mut mask_tokens = Vec::new();
        let mut hws = Vec::new();
        for l in 0..3 {
            let plevel = ref_pyramid.levels[l + 1];
            let (ph, pw) = ref_pyramid.hw[l + 1];
            let cat = t.concat(&[taps[l], plevel], 0);
            let y = self.laterals[l].forward(s, cat);
            let y = self.res1.forward(s, y);
            let y = self.res2.forward(s, y);
            let y = self.cbam.forward(s, y);
            let y = self.proj.forward(s, y);
            frame_tokens.push(t.chw_to_tokens(plevel));
            mask_tokens.push(t.chw_to_tokens(y));
            hws.push((ph, pw));
        }
        Ok(MaskReferenceFeatures {
            frame_tokens: [frame_tokens[0], frame_tokens[1], frame_tokens[2]],
            mask_tokens: [mask_tokens[0], mask_tokens[1], mask_tokens[2]],
            hw: [hws[0], hws[1], hws[2]],
        })
    }
}

struct TextLayer {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    ffn: FeedForward,
}

/// Embedding + learned positions + a small pre-LN self-attention stack.
pub struct TextEncoder {
    embed: Embedding,
    pos: refseg_nn::ParamId,
    layers: Vec<TextLayer>,
    final_ln: LayerNorm,
    proj: Linear,
    heads: usize,
    tile: usize,
    vocab: usize,
    max_len: usize,
}

impl TextEncoder {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelCfg) -> Self {
        let c = cfg.dim;
        let embed = Embedding::new(ps, rng, "text.embed", cfg.vocab, c);
        let pos = ps.add(
            "text.pos".to_string(),
            refseg_nn::init::normal(rng, &[cfg.max_text_len, c], 0.02),
        );
        let layers = (0..cfg.text_layers)
            .map(|i| {
                let name = format!("text.layer{i}");
                TextLayer {
                    ln1: LayerNorm::new(ps, &format!("{name}.ln1"), c),
                    q: Linear::new(ps, rng, &format!("{name}.q"), c, c),
                    k: Linear::new(ps, rng, &format!("{name}.k"), c, c),
                    v: Linear::new(ps, rng, &format!("{name}.v"), c, c),
                    out: Linear::new(ps, rng, &format!("{name}.out"), c, c),
                    ln2: LayerNorm::new(ps, &format!("{name}.ln2"), c),
                    ffn: FeedForward::new(ps, rng, &format!("{name}.ffn"), c, cfg.ffn_dim),
                }
            })
            .collect();
        TextEncoder {
            embed,
            pos,
            layers,
            final_ln: LayerNorm::new(ps, "text.final_ln", c),
            proj: Linear::new(ps, rng, "text.proj", c, c),
            heads: cfg.heads,
            tile: cfg.tile,
            vocab: cfg.vocab,
            max_len: cfg.max_text_len,
        }
    }

    pub fn encode_text<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        token_ids: &[usize],
    ) -> Result<LanguageFeatures> {
        if token_ids.is_empty() || token_ids.len() > self.max_len {
            return Err(CoreError::TaskPrecondition(format!(
                "text length {} outside 1..={}",
                token_ids.len(),
                self.max_len
            )));
        }
        for &id in token_ids {
            if id >= self.vocab {
                return Err(CoreError::TokenOutOfVocab {
                    id,
                    vocab: self.vocab,
                });
            }
        }
        let valid: Vec<bool> = token_ids.iter().map(|&t| t != crate::vocab::PAD).collect();
        if valid.iter().all(|v| !v) {
            return Err(CoreError::NoValidKeys);
        }
        let t = &s.tape;
        let l = token_ids.len();
        let emb = self.embed.forward(s, token_ids);
        let pos = t.slice_axis_op(s.param(self.pos), 0, 0, l);
        let mut x = t.add(emb, pos);
        let cfg = AttentionCfg {
            heads: self.heads,
            tile: self.tile,
        };
        for layer in &self.layers {
            let h = layer.ln1.forward(s, x);
            let attn = t.attention(
                layer.q.forward(s, h),
                layer.k.forward(s, h),
                layer.v.forward(s, h),
                cfg,
                Some(&valid),
            );
            let attn = layer.out.forward(s, attn);
            x = t.add(x, attn);
            let f = layer.ffn.forward(s, layer.ln2.forward(s, x));
            x = t.add(x, f);
        }
        let tokens = self.proj.forward(s, self.final_ln.forward(s, x));
        Ok(LanguageFeatures { tokens, valid })
    }
}

/// Flatten pyramid levels 2..4 into token sequences with their grid sizes.
pub fn pyramid_tokens<T: Scalar>(
    s: &Session<'_, T>,
    pyramid: &FeaturePyramid,
) -> ([Var; 3], [(usize, usize); 3]) {
    let t = &s.tape;
    (
        [
            t.chw_to_tokens(pyramid.levels[1]),
            t.chw_to_tokens(pyramid.levels[2]),
            t.chw_to_tokens(pyramid.levels[3]),
        ],
        [pyramid.hw[1], pyramid.hw[2], pyramid.hw[3]],
    )
}

/// Tape constant holding the 2-d sine encoding of a grid.
pub fn posenc_leaf<T: Scalar>(s: &Session<'_, T>, h: usize, w: usize, c: usize) -> Var {
    s.tape.leaf(posenc::sine_2d::<T>(h, w, c).into_dyn())
}
