//! Task-time execution: single-image prediction, n-shot episodes, online
//! frame-by-frame video propagation and multi-object soft-aggregation.

use ndarray::{Array2, Array3};

use refseg_nn::{ParamStore, Scalar, Session};

use crate::config::InferCfg;
use crate::error::{CoreError, Result};
use crate::mask::BinaryMask;
use crate::model::{ModelOutputs, OwnedMaskRef, RefInput, RefSegModel};
use crate::tasks::TaskKind;

/// Prediction for one single-object video.
#[derive(Debug, Clone)]
pub struct VideoPrediction {
    pub masks: Vec<BinaryMask>,
    pub scores: Vec<f64>,
    /// Peak number of retained mask references (constant-memory contract).
    pub peak_mask_refs: usize,
}

/// Prediction for a multi-object video after soft-aggregation.
#[derive(Debug, Clone)]
pub struct MultiVideoPrediction {
    pub per_object: Vec<VideoPrediction>,
}

pub struct InferenceEngine<'a, T: Scalar> {
    pub model: &'a RefSegModel,
    pub store: &'a ParamStore<T>,
    pub cfg: InferCfg,
}

impl<'a, T: Scalar> InferenceEngine<'a, T> {
    pub fn new(model: &'a RefSegModel, store: &'a ParamStore<T>, cfg: InferCfg) -> Self {
        InferenceEngine { model, store, cfg }
    }

    /// Single forward pass; the argmax-score query's mask is returned,
    /// thresholded at `mask_threshold`.
    pub fn segment_image(
        &self,
        image: &Array3<f32>,
        refs: &[RefInput<'_, T>],
    ) -> Result<(BinaryMask, f64)> {
        let s = Session::eval(self.store);
        let kv = self.model.encode_refs(&s, refs)?;
        let out = self.model.detect(&s, image, &kv)?;
        Ok(self.best_query_mask(&s, &out))
    }

    fn best_query_mask(&self, s: &Session<'_, T>, out: &ModelOutputs) -> (BinaryMask, f64) {
        let last = out.layers.len() - 1;
        let vals = self.model.detection_values(s, out, last);
        let (best, score) = vals
            .scores
            .iter()
            .enumerate()
            .map(|(i, &v)| (i, v))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .expect("at least one query");
        let (_, soft) = self.model.decode_query_mask(s, out, last, best);
        let mask = soft_to_mask(&s.tape.value(soft), self.cfg.mask_threshold as f32);
        (mask, score)
    }

    /// Soft (probability) mask of the best query, for aggregation.
    fn best_query_soft(&self, s: &Session<'_, T>, out: &ModelOutputs) -> (Array2<f32>, f64) {
        let last = out.layers.len() - 1;
        let vals = self.model.detection_values(s, out, last);
        let (best, score) = vals
            .scores
            .iter()
            .enumerate()
            .map(|(i, &v)| (i, v))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .expect("at least one query");
        let (_, soft) = self.model.decode_query_mask(s, out, last, best);
        let v = s.tape.value(soft);
        let (h, w) = (v.shape()[1], v.shape()[2]);
        let mut m = Array2::<f32>::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                m[[i, j]] = v[[0, i, j]].to_f64() as f32;
            }
        }
        (m, score)
    }

    /// n-shot episode: all supports' keys and values are concatenated into
    /// one reference before fusion.
    pub fn segment_fewshot(
        &self,
        query_image: &Array3<f32>,
        supports: &[(Array3<f32>, BinaryMask)],
    ) -> Result<(BinaryMask, f64)> {
        if supports.is_empty() {
            return Err(CoreError::EmptySupports);
        }
        self.segment_image(query_image, &[RefInput::MaskSet(supports)])
    }

    /// Online single-object propagation.
    ///
    /// VOS: references are the (annotated) first frame and the previous
    /// confident frame. RVOS: the language reference plus, once confident,
    /// an anchored first reference and the previous confident frame; frames
    /// scoring below sigma emit empty masks and do not update references.
    pub fn propagate_video(
        &self,
        frames: &[Array3<f32>],
        task: TaskKind,
        language_tokens: Option<&[usize]>,
        first_mask: Option<&BinaryMask>,
    ) -> Result<VideoPrediction> {
        if frames.is_empty() {
            return Err(CoreError::EmptyVideo);
        }
        match task {
            TaskKind::Vos => {
                let first = first_mask.ok_or_else(|| {
                    CoreError::TaskPrecondition("VOS requires a first-frame mask".into())
                })?;
                self.propagate_vos(frames, first)
            }
            TaskKind::Rvos => {
                let tokens = language_tokens.ok_or_else(|| {
                    CoreError::TaskPrecondition("RVOS requires language tokens".into())
                })?;
                if first_mask.is_some() {
                    return Err(CoreError::TaskPrecondition(
                        "RVOS inference must not receive a first-frame mask".into(),
                    ));
                }
                self.propagate_rvos(frames, tokens)
            }
            other => Err(CoreError::TaskPrecondition(format!(
                "propagate_video expects VOS or RVOS, got {}",
                other.name()
            ))),
        }
    }

    fn propagate_vos(
        &self,
        frames: &[Array3<f32>],
        first_mask: &BinaryMask,
    ) -> Result<VideoPrediction> {
        let sigma = self.cfg.sigma_vos;
        let first_ref = self
            .model
            .encode_mask_ref_owned(self.store, &frames[0], first_mask)?;
        let mut prev_ref = first_ref.clone();
        let mut masks = Vec::with_capacity(frames.len());
        let mut scores = Vec::with_capacity(frames.len());
        let mut peak = 0usize;
        for frame in frames {
            let mut refs: Vec<RefInput<'_, T>> = Vec::new();
            if self.cfg.use_first_ref {
                refs.push(RefInput::OwnedMask(&first_ref));
            }
            if self.cfg.use_prev_ref {
                refs.push(RefInput::OwnedMask(&prev_ref));
            }
            if refs.is_empty() {
                return Err(CoreError::TaskPrecondition(
                    "propagation needs at least one of first/prev references".into(),
                ));
            }
            peak = peak.max(ref_count(self.cfg.use_first_ref, self.cfg.use_prev_ref));
            let s = Session::eval(self.store);
            let kv = self.model.encode_refs(&s, &refs)?;
            let out = self.model.detect(&s, frame, &kv)?;
            let (mask, score) = self.best_query_mask(&s, &out);
            drop(s);
            if score >= sigma {
                if !mask.is_empty() {
                    prev_ref = self.model.encode_mask_ref_owned(self.store, frame, &mask)?;
                }
                masks.push(mask);
            } else {
                // below threshold: emit empty, keep the last confident reference
                let (h, w) = mask.dims();
                masks.push(BinaryMask::zeros(h, w));
            }
            scores.push(score);
        }
        Ok(VideoPrediction {
            masks,
            scores,
            peak_mask_refs: peak,
        })
    }

    fn propagate_rvos(&self, frames: &[Array3<f32>], tokens: &[usize]) -> Result<VideoPrediction> {
        let sigma = self.cfg.sigma_rvos;
        let lang = self.model.encode_lang_owned(self.store, tokens)?;
        let mut anchor_ref: Option<OwnedMaskRef<T>> = None;
        let mut prev_ref: Option<OwnedMaskRef<T>> = None;
        let mut masks = Vec::with_capacity(frames.len());
        let mut scores = Vec::with_capacity(frames.len());
        let mut peak = 0usize;
        for frame in frames {
            let mut refs: Vec<RefInput<'_, T>> = Vec::new();
            if self.cfg.rvos_use_mask_ref {
                // mask references precede the language reference by default
                if let Some(a) = &anchor_ref {
                    refs.push(RefInput::OwnedMask(a));
                }
                if let Some(p) = &prev_ref {
                    refs.push(RefInput::OwnedMask(p));
                }
            }
            if self.model.cfg.mask_ref_first {
                refs.push(RefInput::OwnedLang(&lang));
            } else {
                refs.insert(0, RefInput::OwnedLang(&lang));
            }
            peak = peak.max(anchor_ref.is_some() as usize + prev_ref.is_some() as usize);
            let s = Session::eval(self.store);
            let kv = self.model.encode_refs(&s, &refs)?;
            let out = self.model.detect(&s, frame, &kv)?;
            let (mask, score) = self.best_query_mask(&s, &out);
            drop(s);
            if score >= sigma {
                if !mask.is_empty() && self.cfg.rvos_use_mask_ref {
                    let enc = self.model.encode_mask_ref_owned(self.store, frame, &mask)?;
                    if anchor_ref.is_none() && self.cfg.rvos_anchor_first_confident {
                        anchor_ref = Some(enc.clone());
                    }
                    prev_ref = Some(enc);
                }
                masks.push(mask);
            } else {
                let (h, w) = mask.dims();
                masks.push(BinaryMask::zeros(h, w));
            }
            scores.push(score);
        }
        Ok(VideoPrediction {
            masks,
            scores,
            peak_mask_refs: peak,
        })
    }

    /// Multi-object propagation: the frame pyramid is encoded once per
    /// frame and shared across objects; per-pixel labels come from the
    /// soft-aggregated argmax, and each object's next reference mask is its
    /// argmax region.
    pub fn propagate_multi_object(
        &self,
        frames: &[Array3<f32>],
        first_masks: &[BinaryMask],
    ) -> Result<MultiVideoPrediction> {
        if frames.is_empty() {
            return Err(CoreError::EmptyVideo);
        }
        if first_masks.is_empty() {
            return Err(CoreError::TaskPrecondition("no objects".into()));
        }
        let sigma = self.cfg.sigma_vos;
        let m = first_masks.len();
        let first_refs: Vec<OwnedMaskRef<T>> = first_masks
            .iter()
            .map(|mask| self.model.encode_mask_ref_owned(self.store, &frames[0], mask))
            .collect::<Result<_>>()?;
        let mut prev_refs = first_refs.clone();
        let mut preds: Vec<VideoPrediction> = (0..m)
            .map(|_| VideoPrediction {
                masks: Vec::with_capacity(frames.len()),
                scores: Vec::with_capacity(frames.len()),
                peak_mask_refs: 2,
            })
            .collect();
        for frame in frames {
            let s = Session::eval(self.store);
            let pyramid = self.model.visual.encode_frame(&s, frame)?;
            let mut softs: Vec<Array2<f32>> = Vec::with_capacity(m);
            let mut scores = Vec::with_capacity(m);
            for oi in 0..m {
                let refs = [
                    RefInput::OwnedMask(&first_refs[oi]),
                    RefInput::OwnedMask(&prev_refs[oi]),
                ];
                let kv = self.model.encode_refs(&s, &refs)?;
                let out = self.model.detect_with_pyramid(&s, &pyramid, frame, &kv)?;
                let (soft, score) = self.best_query_soft(&s, &out);
                // below-threshold objects are suppressed entirely
                let soft = if score >= sigma {
                    soft
                } else {
                    Array2::zeros(soft.dim())
                };
                softs.push(soft);
                scores.push(score);
            }
            drop(s);
            let soft_refs: Vec<&Array2<f32>> = softs.iter().collect();
            let agg = soft_aggregate(&soft_refs);
            let (h, w) = softs[0].dim();
            for oi in 0..m {
                let mut grid = ndarray::Array2::<u8>::zeros((h, w));
                for i in 0..h {
                    for j in 0..w {
                        let mut best = 0usize;
                        let mut bv = agg[0][[i, j]];
                        for (ci, map) in agg.iter().enumerate().skip(1) {
                            if map[[i, j]] > bv {
                                bv = map[[i, j]];
                                best = ci;
                            }
                        }
                        if best == oi + 1 {
                            grid[[i, j]] = 1;
                        }
                    }
                }
                let mask = BinaryMask::new(grid)?;
                if scores[oi] >= sigma && !mask.is_empty() {
                    prev_refs[oi] = self.model.encode_mask_ref_owned(self.store, frame, &mask)?;
                    preds[oi].masks.push(mask);
                } else {
                    preds[oi].masks.push(BinaryMask::zeros(h, w));
                }
                preds[oi].scores.push(scores[oi]);
            }
        }
        Ok(MultiVideoPrediction { per_object: preds })
    }
}

fn ref_count(use_first: bool, use_prev: bool) -> usize {
    use_first as usize + use_prev as usize
}

fn soft_to_mask<T: Scalar>(soft: &refseg_nn::Value<T>, thresh: f32) -> BinaryMask {
    let (h, w) = (soft.shape()[1], soft.shape()[2]);
    let mut grid = ndarray::Array2::<u8>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            if soft[[0, i, j]].to_f64() as f32 > thresh {
                grid[[i, j]] = 1;
            }
        }
    }
    BinaryMask::new(grid).expect("thresholded mask is binary")
}

/// Odds-renormalization merge of per-object probability maps into a
/// categorical distribution over background + M objects.
///
/// `p_0 = prod_m (1 - p_m)`, odds `o = p / (1 - p)` per map (after clamping
/// to `[1e-5, 1 - 1e-5]`), normalized per pixel.
pub fn soft_aggregate(object_probs: &[&Array2<f32>]) -> Vec<Array2<f32>> {
    const EPS: f32 = 1e-5;
    if object_probs.is_empty() {
        return vec![];
    }
    let (h, w) = object_probs[0].dim();
    let mut clamped: Vec<Array2<f32>> = object_probs
        .iter()
        .map(|p| p.mapv(|v| v.clamp(EPS, 1.0 - EPS)))
        .collect();
    let mut background = Array2::<f32>::from_elem((h, w), 1.0);
    for p in &clamped {
        background.zip_mut_with(p, |b, &v| *b *= 1.0 - v);
    }
    let background = background.mapv(|v| v.clamp(EPS, 1.0 - EPS));
    let mut maps = Vec::with_capacity(clamped.len() + 1);
    maps.push(background);
    maps.append(&mut clamped);
    // odds-normalize per pixel
    let mut odds: Vec<Array2<f32>> = maps.iter().map(|p| p.mapv(|v| v / (1.0 - v))).collect();
    let mut denom = Array2::<f32>::zeros((h, w));
    for o in &odds {
        denom += o;
    }
    for o in &mut odds {
        o.zip_mut_with(&denom, |v, &d| *v /= d);
    }
    odds
}

/// Empty-input convention: background probability 1 everywhere.
pub fn soft_aggregate_or_background(
    object_probs: &[&Array2<f32>],
    h: usize,
    w: usize,
) -> Vec<Array2<f32>> {
    if object_probs.is_empty() {
        return vec![Array2::from_elem((h, w), 1.0)];
    }
    soft_aggregate(object_probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_aggregate_half_probability_case() {
        let p = Array2::<f32>::from_elem((4, 4), 0.5);
        let maps = soft_aggregate(&[&p]);
        assert_eq!(maps.len(), 2);
        // p0 = 0.5, odds (1,1) -> object prob 0.5
        assert!((maps[0][[0, 0]] - 0.5).abs() < 1e-6);
        assert!((maps[1][[0, 0]] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn soft_aggregate_rows_sum_to_one() {
        let mut rng = refseg_nn::rng::seeded(5);
        use rand::Rng;
        let a = Array2::<f32>::from_shape_simple_fn((6, 5), || rng.gen_range(0.0..1.0));
        let b = Array2::<f32>::from_shape_simple_fn((6, 5), || rng.gen_range(0.0..1.0));
        let maps = soft_aggregate(&[&a, &b]);
        for i in 0..6 {
            for j in 0..5 {
                let total: f32 = maps.iter().map(|m| m[[i, j]]).sum();
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn soft_aggregate_empty_input_is_background() {
        let maps = soft_aggregate_or_background(&[], 3, 3);
        assert_eq!(maps.len(), 1);
        assert!(maps[0].iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }
}
