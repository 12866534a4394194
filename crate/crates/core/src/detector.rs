//! Unified transformer head: dense multi-scale encoder, query decoder,
//! prediction heads, FPN-like mask decoder and dynamic-convolution masks.

use ndarray::{Array3, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use refseg_nn::layers::{Conv2d, FeedForward, LayerNorm, Linear, Mlp};
use refseg_nn::ops::AttentionCfg;
use refseg_nn::{init, ParamId, ParamStore, Scalar, Session, Var};

use crate::config::ModelCfg;
use crate::encoders::{posenc_leaf, FeaturePyramid};

struct EncLayer {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    ffn: FeedForward,
}

struct DecLayer {
    ln_sa: LayerNorm,
    sa_q: Linear,
    sa_k: Linear,
    sa_v: Linear,
    sa_out: Linear,
    ln_ca: LayerNorm,
    ca_q: Linear,
    ca_k: Linear,
    ca_v: Linear,
    ca_out: Linear,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Encoder output: the refined token sequence plus its positional table and
/// the per-level refined maps for the mask decoder.
pub struct EncodedMemory {
    pub tokens: Var,
    pub pos: Var,
    pub level_maps: [Var; 3],
    pub hw: [(usize, usize); 3],
}

/// Raw per-query predictions (pre-sigmoid score logits).
pub struct DetectionHead {
    pub score_logits: Var,
    pub boxes: Var,
    pub kernels: Var,
}

pub struct Detector {
    level_embed: ParamId,
    enc_layers: Vec<EncLayer>,
    enc_final_ln: LayerNorm,
    query_pos: ParamId,
    dec_layers: Vec<DecLayer>,
    dec_final_ln: LayerNorm,
    cls_head: Linear,
    box_head: Mlp,
    kernel_head: Linear,
    fpn_laterals: [Conv2d; 4],
    fpn_out: Conv2d,
    pub n_queries: usize,
    dim: usize,
    heads: usize,
    tile: usize,
    dyn_channels: usize,
}

impl Detector {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelCfg) -> Self {
        let c = cfg.dim;
        let enc_layers = (0..cfg.enc_layers)
            .map(|i| {
                let n = format!("det.enc{i}");
                EncLayer {
                    ln1: LayerNorm::new(ps, &format!("{n}.ln1"), c),
                    q: Linear::new(ps, rng, &format!("{n}.q"), c, c),
                    k: Linear::new(ps, rng, &format!("{n}.k"), c, c),
                    v: Linear::new(ps, rng, &format!("{n}.v"), c, c),
                    out: Linear::new(ps, rng, &format!("{n}.out"), c, c),
                    ln2: LayerNorm::new(ps, &format!("{n}.ln2"), c),
                    ffn: FeedForward::new(ps, rng, &format!("{n}.ffn"), c, cfg.ffn_dim),
                }
            })
            .collect();
        let dec_layers = (0..cfg.dec_layers)
            .map(|i| {
                let n = format!("det.dec{i}");
                DecLayer {
                    ln_sa: LayerNorm::new(ps, &format!("{n}.ln_sa"), c),
                    sa_q: Linear::new(ps, rng, &format!("{n}.sa_q"), c, c),
                    sa_k: Linear::new(ps, rng, &format!("{n}.sa_k"), c, c),
                    sa_v: Linear::new(ps, rng, &format!("{n}.sa_v"), c, c),
                    sa_out: Linear::new(ps, rng, &format!("{n}.sa_out"), c, c),
                    ln_ca: LayerNorm::new(ps, &format!("{n}.ln_ca"), c),
                    ca_q: Linear::new(ps, rng, &format!("{n}.ca_q"), c, c),
                    ca_k: Linear::new(ps, rng, &format!("{n}.ca_k"), c, c),
                    ca_v: Linear::new(ps, rng, &format!("{n}.ca_v"), c, c),
                    ca_out: Linear::new(ps, rng, &format!("{n}.ca_out"), c, c),
                    ln_ffn: LayerNorm::new(ps, &format!("{n}.ln_ffn"), c),
                    ffn: FeedForward::new(ps, rng, &format!("{n}.ffn"), c, cfg.ffn_dim),
                }
            })
            .collect();
        let level_embed = ps.add("det.level_embed".to_string(), init::normal(rng, &[3, c], 1.0));
        let query_pos = ps.add(
            "det.query_pos".to_string(),
            init::normal(rng, &[cfg.queries, c], 1.0),
        );
        let cls_head = Linear::new(ps, rng, "det.cls_head", c, 1);
        // focal-style prior so untrained queries start near score 0.01
        let prior = -(99.0f64).ln();
        ps.value_mut(cls_head.b)[0] = T::from_f64(prior);
        let box_head = Mlp::new(ps, rng, "det.box_head", &[c, c, c, 4]);
        let kernel_head = Linear::new(ps, rng, "det.kernel_head", c, cfg.kernel_len());
        let fpn_laterals = [
            Conv2d::new(ps, rng, "det.fpn_lat4", c, c, 1, 1, 0),
            Conv2d::new(ps, rng, "det.fpn_lat8", c, c, 1, 1, 0),
            Conv2d::new(ps, rng, "det.fpn_lat16", c, c, 1, 1, 0),
            Conv2d::new(ps, rng, "det.fpn_lat32", c, c, 1, 1, 0),
        ];
        let fpn_out = Conv2d::new(ps, rng, "det.fpn_out", c, c, 3, 1, 1);
        Detector {
            level_embed,
            enc_layers,
            enc_final_ln: LayerNorm::new(ps, "det.enc_final_ln", c),
            query_pos,
            dec_layers,
            dec_final_ln: LayerNorm::new(ps, "det.dec_final_ln", c),
            cls_head,
            box_head,
            kernel_head,
            fpn_laterals,
            fpn_out,
            n_queries: cfg.queries,
            dim: c,
            heads: cfg.heads,
            tile: cfg.tile,
            dyn_channels: cfg.dyn_channels,
        }
    }

    fn attn_cfg(&self) -> AttentionCfg {
        AttentionCfg {
            heads: self.heads,
            tile: self.tile,
        }
    }

    /// Dense self-attention over the concatenated level-2..4 token sequence
    /// with level embeddings and 2-d sine position encodings.
    pub fn encode_multiscale<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        fused: &FeaturePyramid,
    ) -> EncodedMemory {
        let t = &s.tape;
        let c = self.dim;
        let mut token_parts = Vec::new();
        let mut pos_parts = Vec::new();
        let mut hw = Vec::new();
        for li in 0..3 {
            let (h, w) = fused.hw[li + 1];
            token_parts.push(t.chw_to_tokens(fused.levels[li + 1]));
            let pe = posenc_leaf(s, h, w, c);
            let le = t.reshape(
                t.slice_axis_op(s.param(self.level_embed), 0, li, li + 1),
                &[c],
            );
            pos_parts.push(t.add_row(pe, le));
            hw.push((h, w));
        }
        let mut x = t.concat(&token_parts, 0);
        let pos = t.concat(&pos_parts, 0);
        for layer in &self.enc_layers {
            let h = layer.ln1.forward(s, x);
            let hp = t.add(h, pos);
            let attn = t.attention(
                layer.q.forward(s, hp),
                layer.k.forward(s, hp),
                layer.v.forward(s, h),
                self.attn_cfg(),
                None,
            );
            x = t.add(x, layer.out.forward(s, attn));
            let f = layer.ffn.forward(s, layer.ln2.forward(s, x));
            x = t.add(x, f);
        }
        let tokens = self.enc_final_ln.forward(s, x);
        // slice refined tokens back into per-level maps
        let mut level_maps = Vec::new();
        let mut start = 0;
        for &(h, w) in &hw {
            let n = h * w;
            let sl = t.slice_axis_op(tokens, 0, start, start + n);
            level_maps.push(t.tokens_to_chw(sl, h, w));
            start += n;
        }
        EncodedMemory {
            tokens,
            pos,
            level_maps: [level_maps[0], level_maps[1], level_maps[2]],
            hw: [hw[0], hw[1], hw[2]],
        }
    }

    /// Iterative query refinement; returns every layer's normalized output
    /// (last entry = final queries) for auxiliary supervision.
    pub fn decode_queries<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        memory: &EncodedMemory,
    ) -> Vec<Var> {
        let t = &s.tape;
        let n = self.n_queries;
        let c = self.dim;
        let qpos = s.param(self.query_pos);
        let mut q = t.leaf(ArrayD::zeros(IxDyn(&[n, c])));
        let keys = t.add(memory.tokens, memory.pos);
        let mut outputs = Vec::with_capacity(self.dec_layers.len());
        for layer in &self.dec_layers {
            let h = layer.ln_sa.forward(s, q);
            let hp = t.add(h, qpos);
            let sa = t.attention(
                layer.sa_q.forward(s, hp),
                layer.sa_k.forward(s, hp),
                layer.sa_v.forward(s, h),
                self.attn_cfg(),
                None,
            );
            q = t.add(q, layer.sa_out.forward(s, sa));
            let h = layer.ln_ca.forward(s, q);
            let hp = t.add(h, qpos);
            let ca = t.attention(
                layer.ca_q.forward(s, hp),
                layer.ca_k.forward(s, keys),
                layer.ca_v.forward(s, memory.tokens),
                self.attn_cfg(),
                None,
            );
            q = t.add(q, layer.ca_out.forward(s, ca));
            let f = layer.ffn.forward(s, layer.ln_ffn.forward(s, q));
            q = t.add(q, f);
            outputs.push(self.dec_final_ln.forward(s, q));
        }
        outputs
    }

    /// Class / box / kernel heads over refined queries.
    pub fn predict_heads<T: Scalar>(&self, s: &Session<'_, T>, q_obj: Var) -> DetectionHead {
        let t = &s.tape;
        DetectionHead {
            score_logits: self.cls_head.forward(s, q_obj),
            boxes: t.sigmoid(self.box_head.forward(s, q_obj)),
            kernels: self.kernel_head.forward(s, q_obj),
        }
    }

    /// FPN-style top-down merge of the encoder maps, ending at stride 4 with
    /// the reference-agnostic `F_1` lateral added in.
    pub fn build_seg_features<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        memory: &EncodedMemory,
        f1: Var,
        f1_hw: (usize, usize),
    ) -> Var {
        let t = &s.tape;
        let p32 = self.fpn_laterals[3].forward(s, memory.level_maps[2]);
        let p16 = t.add(
            self.fpn_laterals[2].forward(s, memory.level_maps[1]),
            up_to(s, p32, memory.hw[1]),
        );
        let p8 = t.add(
            self.fpn_laterals[1].forward(s, memory.level_maps[0]),
            up_to(s, p16, memory.hw[0]),
        );
        let p4 = t.add(self.fpn_laterals[0].forward(s, f1), up_to(s, p8, f1_hw));
        self.fpn_out.forward(s, p4)
    }

    /// Decode one query's mask: three 1x1 conv layers whose weights come
    /// from the kernel vector, applied to `F_seg` ⊕ a 2-channel coordinate
    /// map, then sigmoid and 4x bilinear upsampling.
    ///
    /// Returns `(stride-4 logits, full-resolution soft mask)`.
    pub fn dynamic_conv_mask<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        f_seg: Var,
        kernel: Var,
        out_hw: (usize, usize),
    ) -> (Var, Var) {
        let t = &s.tape;
        let shape = t.shape(f_seg);
        let (h4, w4) = (shape[1], shape[2]);
        let cin = self.dim + 2;
        let ch = self.dyn_channels;
        let expect = (cin * ch + ch) + (ch * ch + ch) + (ch + 1);
        assert_eq!(
            t.shape(kernel)[0],
            expect,
            "kernel vector length does not match the dynamic-conv layer spec"
        );
        let coords = t.leaf(coord_map::<T>(h4, w4));
        let x = t.concat(&[f_seg, coords], 0);
        let tokens = t.chw_to_tokens(x);

        let mut off = 0;
        let mut take = |len: usize| {
            let sl = t.slice_axis_op(kernel, 0, off, off + len);
            off += len;
            sl
        };
        let w1 = t.reshape(take(cin * ch), &[cin, ch]);
        let b1 = take(ch);
        let w2 = t.reshape(take(ch * ch), &[ch, ch]);
        let b2 = take(ch);
        let w3 = t.reshape(take(ch), &[ch, 1]);
        let b3 = take(1);

        let h = t.relu(t.add_row(t.matmul(tokens, w1), b1));
        let h = t.relu(t.add_row(t.matmul(h, w2), b2));
        let logits = t.add_row(t.matmul(h, w3), b3);
        let logits4 = t.tokens_to_chw(logits, h4, w4);
        let soft4 = t.sigmoid(logits4);
        let up = t.upsample_bilinear(soft4, 4);
        let up_shape = t.shape(up);
        let soft = if up_shape[1] != out_hw.0 || up_shape[2] != out_hw.1 {
            let c1 = t.slice_axis_op(up, 1, 0, out_hw.0);
            t.slice_axis_op(c1, 2, 0, out_hw.1)
        } else {
            up
        };
        (logits4, soft)
    }
}

/// Nearest 2x upsample cropped to the target grid (handles odd sizes).
fn up_to<T: Scalar>(s: &Session<'_, T>, x: Var, target: (usize, usize)) -> Var {
    let t = &s.tape;
    let up = t.upsample_nearest2(x);
    let shape = t.shape(up);
    if shape[1] == target.0 && shape[2] == target.1 {
        return up;
    }
    let c1 = t.slice_axis_op(up, 1, 0, target.0);
    t.slice_axis_op(c1, 2, 0, target.1)
}

/// Normalized coordinate channels in `[-1, 1]`, x then y.
fn coord_map<T: Scalar>(h: usize, w: usize) -> ArrayD<T> {
    let mut m = Array3::<T>::zeros((2, h, w));
    for i in 0..h {
        for j in 0..w {
            m[[0, i, j]] = T::from_f64(if w > 1 {
                2.0 * j as f64 / (w - 1) as f64 - 1.0
            } else {
                0.0
            });
            m[[1, i, j]] = T::from_f64(if h > 1 {
                2.0 * i as f64 / (h - 1) as f64 - 1.0
            } else {
                0.0
            });
        }
    }
    m.into_dyn()
}
