//! Full model assembly: encoders + fusion + detector, with owned
//! (detached) reference features for online video inference.

use ndarray::{Array3, ArrayD};

use refseg_nn::{ParamStore, Scalar, Session, Var};

use crate::config::ModelCfg;
use crate::detector::{DetectionHead, Detector};
use crate::encoders::{
    FeaturePyramid, LanguageFeatures, MaskEncoder, MaskReferenceFeatures, TextEncoder,
    VisualEncoder,
};
use crate::error::Result;
use crate::mask::BinaryMask;
use crate::unifusion::{ReferenceKV, UniFusion};

pub struct RefSegModel {
    pub cfg: ModelCfg,
    pub visual: VisualEncoder,
    pub mask_enc: MaskEncoder,
    pub text_enc: TextEncoder,
    pub fusion: UniFusion,
    pub detector: Detector,
}

impl RefSegModel {
    /// Deterministic construction: the parameter registration order and the
    /// init stream depend only on (cfg, seed).
    pub fn build<T: Scalar>(ps: &mut ParamStore<T>, cfg: &ModelCfg, seed: u64) -> Self {
        let mut rng = refseg_nn::rng::child(seed, 0x6d6f64); // model-init stream
        RefSegModel {
            cfg: cfg.clone(),
            visual: VisualEncoder::new(ps, &mut rng, cfg),
            mask_enc: MaskEncoder::new(ps, &mut rng, cfg),
            text_enc: TextEncoder::new(ps, &mut rng, cfg),
            fusion: UniFusion::new(ps, &mut rng, cfg),
            detector: Detector::new(ps, &mut rng, cfg),
        }
    }
}

/// Reference inputs for one forward pass, in fusion order.
pub enum RefInput<'a, T: Scalar> {
    Lang(&'a [usize]),
    /// Reference frame + its annotated (or predicted) mask.
    Mask {
        image: &'a Array3<f32>,
        mask: &'a BinaryMask,
    },
    /// Several mask references concatenated into one key/value sequence
    /// (the n-shot support stack).
    MaskSet(&'a [(Array3<f32>, BinaryMask)]),
    /// Pre-encoded mask reference (video propagation fast path).
    OwnedMask(&'a OwnedMaskRef<T>),
    /// Pre-encoded language reference.
    OwnedLang(&'a OwnedLangRef<T>),
}

/// Detached mask-reference features, kept across frames during propagation.
#[derive(Clone)]
pub struct OwnedMaskRef<T: Scalar> {
    pub frame_tokens: [ArrayD<T>; 3],
    pub mask_tokens: [ArrayD<T>; 3],
    pub hw: [(usize, usize); 3],
}

#[derive(Clone)]
pub struct OwnedLangRef<T: Scalar> {
    pub tokens: ArrayD<T>,
    pub valid: Vec<bool>,
}

/// Everything the heads produced for one frame.
pub struct ModelOutputs {
    /// Per-decoder-layer heads; the last entry is the final prediction.
    pub layers: Vec<DetectionHead>,
    pub f_seg: Var,
    pub image_hw: (usize, usize),
}

/// Plain score/box values pulled off the tape for matching and selection.
pub struct DetectionValues {
    pub scores: Vec<f64>,
    pub boxes: Vec<[f64; 4]>,
}

impl RefSegModel {
    /// Encode reference inputs into fusion-ready key/value bundles.
    pub fn encode_refs<'a, T: Scalar>(
        &self,
        s: &Session<'a, T>,
        refs: &[RefInput<'_, T>],
    ) -> Result<Vec<ReferenceKV>> {
        let mut out = Vec::with_capacity(refs.len());
        for r in refs {
            out.push(match r {
                RefInput::Lang(tokens) => {
                    let lang = self.text_enc.encode_text(s, tokens)?;
                    ReferenceKV::from_language(&lang)
                }
                RefInput::Mask { image, mask } => {
                    let feats = self.encode_mask_pair(s, image, mask)?;
                    ReferenceKV::from_mask_features(&feats)
                }
                RefInput::MaskSet(supports) => {
                    let mut all = Vec::with_capacity(supports.len());
                    for (img, m) in supports.iter() {
                        all.push(self.encode_mask_pair(s, img, m)?);
                    }
                    let refs: Vec<&MaskReferenceFeatures> = all.iter().collect();
                    ReferenceKV::concat_mask_refs(s, &refs)?
                }
                RefInput::OwnedMask(owned) => load_mask_ref(s, owned),
                RefInput::OwnedLang(owned) => load_lang_ref(s, owned),
            });
        }
        Ok(out)
    }

    fn encode_mask_pair<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        image: &Array3<f32>,
        mask: &BinaryMask,
    ) -> Result<MaskReferenceFeatures> {
        let pyramid = self.visual.encode_frame(s, image)?;
        self.mask_enc
            .encode_mask_reference(s, image, mask, &pyramid)
    }

    /// Full forward pass for one frame with the given references.
    pub fn detect<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        image: &Array3<f32>,
        refs: &[ReferenceKV],
    ) -> Result<ModelOutputs> {
        let pyramid = self.visual.encode_frame(s, image)?;
        self.detect_with_pyramid(s, &pyramid, image, refs)
    }

    /// Same as [`RefSegModel::detect`] but reusing an already-encoded
    /// pyramid (multi-object propagation encodes each frame once).
    pub fn detect_with_pyramid<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        pyramid: &FeaturePyramid,
        image: &Array3<f32>,
        refs: &[ReferenceKV],
    ) -> Result<ModelOutputs> {
        let refs_ref: Vec<&ReferenceKV> = refs.iter().collect();
        let fused = self.fusion.fuse_pyramid(s, pyramid, &refs_ref)?;
        let memory = self.detector.encode_multiscale(s, &fused);
        let dec_outs = self.detector.decode_queries(s, &memory);
        let layers: Vec<DetectionHead> = if self.cfg.aux_loss {
            dec_outs
                .iter()
                .map(|&q| self.detector.predict_heads(s, q))
                .collect()
        } else {
            vec![self.detector.predict_heads(s, *dec_outs.last().unwrap())]
        };
        let f_seg = self
            .detector
            .build_seg_features(s, &memory, fused.levels[0], fused.hw[0]);
        Ok(ModelOutputs {
            layers,
            f_seg,
            image_hw: (image.shape()[1], image.shape()[2]),
        })
    }

    /// Decode the mask of query `qi` from the final (or given) layer.
    pub fn decode_query_mask<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        outputs: &ModelOutputs,
        layer: usize,
        qi: usize,
    ) -> (Var, Var) {
        let head = &outputs.layers[layer];
        let t = &s.tape;
        let kernel = t.reshape(
            t.slice_axis_op(head.kernels, 0, qi, qi + 1),
            &[self.cfg.kernel_len()],
        );
        self.detector
            .dynamic_conv_mask(s, outputs.f_seg, kernel, outputs.image_hw)
    }

    /// Pull score/box values for one layer off the tape.
    pub fn detection_values<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        outputs: &ModelOutputs,
        layer: usize,
    ) -> DetectionValues {
        let head = &outputs.layers[layer];
        let t = &s.tape;
        let logits = t.value(head.score_logits);
        let boxes = t.value(head.boxes);
        let n = logits.shape()[0];
        let scores: Vec<f64> = (0..n)
            .map(|i| {
                let x = logits[[i, 0]].to_f64();
                1.0 / (1.0 + (-x).exp())
            })
            .collect();
        let boxes: Vec<[f64; 4]> = (0..n)
            .map(|i| {
                [
                    boxes[[i, 0]].to_f64(),
                    boxes[[i, 1]].to_f64(),
                    boxes[[i, 2]].to_f64(),
                    boxes[[i, 3]].to_f64(),
                ]
            })
            .collect();
        DetectionValues { scores, boxes }
    }

    /// Encode a mask reference and detach it for reuse across frames.
    pub fn encode_mask_ref_owned<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        image: &Array3<f32>,
        mask: &BinaryMask,
    ) -> Result<OwnedMaskRef<T>> {
        let s = Session::eval(store);
        let feats = self.encode_mask_pair(&s, image, mask)?;
        let t = &s.tape;
        Ok(OwnedMaskRef {
            frame_tokens: [
                t.array(feats.frame_tokens[0]),
                t.array(feats.frame_tokens[1]),
                t.array(feats.frame_tokens[2]),
            ],
            mask_tokens: [
                t.array(feats.mask_tokens[0]),
                t.array(feats.mask_tokens[1]),
                t.array(feats.mask_tokens[2]),
            ],
            hw: feats.hw,
        })
    }

    /// Encode a language reference once per video.
    pub fn encode_lang_owned<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tokens: &[usize],
    ) -> Result<OwnedLangRef<T>> {
        let s = Session::eval(store);
        let lang = self.text_enc.encode_text(&s, tokens)?;
        Ok(OwnedLangRef {
            tokens: s.tape.array(lang.tokens),
            valid: lang.valid,
        })
    }
}

fn load_mask_ref<T: Scalar>(s: &Session<'_, T>, owned: &OwnedMaskRef<T>) -> ReferenceKV {
    let t = &s.tape;
    let feats = MaskReferenceFeatures {
        frame_tokens: [
            t.leaf(owned.frame_tokens[0].clone()),
            t.leaf(owned.frame_tokens[1].clone()),
            t.leaf(owned.frame_tokens[2].clone()),
        ],
        mask_tokens: [
            t.leaf(owned.mask_tokens[0].clone()),
            t.leaf(owned.mask_tokens[1].clone()),
            t.leaf(owned.mask_tokens[2].clone()),
        ],
        hw: owned.hw,
    };
    ReferenceKV::from_mask_features(&feats)
}

fn load_lang_ref<T: Scalar>(s: &Session<'_, T>, owned: &OwnedLangRef<T>) -> ReferenceKV {
    let lang = LanguageFeatures {
        tokens: s.tape.leaf(owned.tokens.clone()),
        valid: owned.valid.clone(),
    };
    ReferenceKV::from_language(&lang)
}
