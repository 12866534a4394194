//! Set-prediction supervision: per-query matching costs, top-k least-cost
//! assignment and the five-term weighted loss.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use refseg_nn::{Scalar, Session, Var};

use crate::config::LossCfg;
use crate::error::{CoreError, Result};
use crate::geometry::{self, BBox};
use crate::mask::BinaryMask;

/// Positive/negative query labeling for one ground truth.
#[derive(Debug, Clone)]
pub struct Assignment {
    /// Exactly the k smallest-cost query indices, ascending.
    pub positive: Vec<usize>,
    pub costs: Vec<f64>,
    pub k: usize,
}

/// Scalar binary focal loss (also used inside the matching cost).
pub fn focal_loss(p: f64, target: u8, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    match target {
        1 => -alpha * (1.0 - p).powf(gamma) * p.ln(),
        _ => -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln(),
    }
}

/// Scalar dice loss with smoothing constant 1.
pub fn dice_loss(soft: &ndarray::Array2<f64>, gt: &BinaryMask) -> f64 {
    let inter: f64 = soft
        .iter()
        .zip(gt.grid().iter())
        .map(|(&p, &g)| p * g as f64)
        .sum();
    let psum: f64 = soft.iter().sum();
    let gsum = gt.area() as f64;
    1.0 - (2.0 * inter + 1.0) / (psum + gsum + 1.0)
}

/// Per-query matching cost against the single ground truth
/// (classification + L1 + GIoU terms, loss-weighted).
pub fn matching_cost(
    scores: &[f64],
    boxes: &[[f64; 4]],
    gt_box: &BBox,
    cfg: &LossCfg,
) -> Vec<f64> {
    scores
        .iter()
        .zip(boxes.iter())
        .map(|(&s, b)| {
            let pb = BBox::new(b[0], b[1], b[2], b[3]);
            let cls = focal_loss(s, 1, cfg.focal_alpha, cfg.focal_gamma);
            let l1: f64 = b
                .iter()
                .zip(gt_box.as_array().iter())
                .map(|(x, y)| (x - y).abs())
                .sum();
            let g = 1.0 - geometry::giou(&pb, gt_box);
            cfg.lambda_cls * cls + cfg.lambda_l1 * l1 + cfg.lambda_giou * g
        })
        .collect()
}

/// Indices of the k least costs; ties break towards the lower index.
pub fn assign_topk(costs: &[f64], k: usize) -> Result<Assignment> {
    let n = costs.len();
    if k == 0 || k > n {
        return Err(CoreError::TopKExceedsQueries { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        costs[a]
            .partial_cmp(&costs[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut positive: Vec<usize> = order[..k].to_vec();
    positive.sort_unstable();
    Ok(Assignment {
        positive,
        costs: costs.to_vec(),
        k,
    })
}

/// OTA-style dynamic k: the clamped, rounded sum of the top-10 box IoUs.
pub fn dynamic_k(boxes: &[[f64; 4]], gt_box: &BBox) -> usize {
    let mut ious: Vec<f64> = boxes
        .iter()
        .map(|b| geometry::iou(&BBox::new(b[0], b[1], b[2], b[3]), gt_box))
        .collect();
    ious.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let s: f64 = ious.iter().take(10).sum();
    (s.round() as usize).clamp(1, 10)
}

/// Term values and the weighted total of one training example.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub mask_bce: f64,
    pub dice: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, cfg: &LossCfg) -> f64 {
        cfg.lambda_cls * self.cls
            + cfg.lambda_l1 * self.l1
            + cfg.lambda_giou * self.giou
            + cfg.lambda_mask * self.mask_bce
            + cfg.lambda_dice * self.dice
    }

    pub fn is_finite(&self) -> bool {
        [self.cls, self.l1, self.giou, self.mask_bce, self.dice, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Differentiable focal term over all query scores: positives target 1,
/// negatives target 0, normalized by k or N per config.
pub fn cls_loss_var<T: Scalar>(
    s: &Session<'_, T>,
    score_logits: Var,
    positive: &[usize],
    cfg: &LossCfg,
) -> Var {
    let t = &s.tape;
    let n = t.shape(score_logits)[0];
    let p = t.sigmoid(score_logits);
    let p = t.clamp(p, T::from_f64(1e-7), T::from_f64(1.0 - 1e-7));
    let p = t.reshape(p, &[n]);
    let mut pos_mask = ArrayD::<T>::zeros(ndarray::IxDyn(&[n]));
    for &i in positive {
        pos_mask[[i]] = T::one();
    }
    let neg_mask = pos_mask.mapv(|v| T::one() - v);
    let pos_mask = t.leaf(pos_mask);
    let neg_mask = t.leaf(neg_mask);
    let one_minus_p = t.add_scalar(t.neg(p), T::one());
    let gamma = T::from_f64(cfg.focal_gamma);
    // -alpha (1-p)^gamma ln p for positives
    let pos_term = t.mul(
        t.powf_const(one_minus_p, gamma),
        t.neg(t.ln(p)),
    );
    let pos_term = t.scale(t.mul(pos_term, pos_mask), T::from_f64(cfg.focal_alpha));
    // -(1-alpha) p^gamma ln(1-p) for negatives
    let neg_term = t.mul(t.powf_const(p, gamma), t.neg(t.ln(one_minus_p)));
    let neg_term = t.scale(
        t.mul(neg_term, neg_mask),
        T::from_f64(1.0 - cfg.focal_alpha),
    );
    let total = t.add(t.sum_all(pos_term), t.sum_all(neg_term));
    let norm = if cfg.normalize_cls_by_k {
        positive.len().max(1)
    } else {
        n
    };
    t.scale(total, T::one() / T::from_usize(norm))
}

/// Differentiable GIoU of one predicted box (`[1,4]` slice) vs a constant.
pub fn giou_var<T: Scalar>(s: &Session<'_, T>, pred: Var, gt: &BBox) -> Var {
    let t = &s.tape;
    let half = T::from_f64(0.5);
    let coord = |i: usize| t.reshape(t.slice_axis_op(pred, 1, i, i + 1), &[1]);
    let (cx, cy, w, h) = (coord(0), coord(1), coord(2), coord(3));
    let x1 = t.sub(cx, t.scale(w, half));
    let x2 = t.add(cx, t.scale(w, half));
    let y1 = t.sub(cy, t.scale(h, half));
    let y2 = t.add(cy, t.scale(h, half));
    let (gx1, gy1, gx2, gy2) = gt.corners();
    let c = |v: f64| t.leaf(ArrayD::from_elem(ndarray::IxDyn(&[1]), T::from_f64(v)));
    let (gx1, gy1, gx2, gy2) = (c(gx1), c(gy1), c(gx2), c(gy2));

    let iw = t.relu(t.sub(t.minimum(x2, gx2), t.maximum(x1, gx1)));
    let ih = t.relu(t.sub(t.minimum(y2, gy2), t.maximum(y1, gy1)));
    let inter = t.mul(iw, ih);
    let area_p = t.mul(w, h);
    let area_g = c(gt.area());
    let union = t.sub(t.add(area_p, area_g), inter);
    let ew = t.sub(t.maximum(x2, gx2), t.minimum(x1, gx1));
    let eh = t.sub(t.maximum(y2, gy2), t.minimum(y1, gy1));
    let encl = t.add_scalar(t.mul(ew, eh), T::from_f64(1e-9));
    let union_safe = t.add_scalar(union, T::from_f64(1e-9));
    let iou = t.div(inter, union_safe);
    t.sub(iou, t.div(t.sub(encl, union), encl))
}

/// Majority-pool a binary mask down by an integer factor (ties become 1).
pub fn majority_pool(mask: &BinaryMask, factor: usize, oh: usize, ow: usize) -> ArrayD<f64> {
    let (h, w) = mask.dims();
    let mut out = ArrayD::<f64>::zeros(ndarray::IxDyn(&[1, oh, ow]));
    for bi in 0..oh {
        for bj in 0..ow {
            let mut count = 0usize;
            let mut total = 0usize;
            for i in (bi * factor)..((bi + 1) * factor).min(h) {
                for j in (bj * factor)..((bj + 1) * factor).min(w) {
                    total += 1;
                    count += mask.grid()[[i, j]] as usize;
                }
            }
            if total > 0 && 2 * count >= total {
                out[[0, bi, bj]] = 1.0;
            }
        }
    }
    out
}

/// Inputs to the loss for one decoded positive query.
pub struct PositiveMaskVars {
    /// Stride-4 logits `[1,h4,w4]`.
    pub logits4: Var,
    /// Full-resolution soft mask `[1,H,W]`.
    pub soft: Var,
}

/// Assemble the five-term loss. Box and mask terms average over positives;
/// every query contributes to the classification term. When the ground
/// truth is invisible all queries are negatives and only the class term
/// applies.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Scalar>(
    s: &Session<'_, T>,
    score_logits: Var,
    boxes: Var,
    positive_masks: &[PositiveMaskVars],
    assignment: Option<&Assignment>,
    gt_box: Option<&BBox>,
    gt_mask: Option<&BinaryMask>,
    cfg: &LossCfg,
) -> (Var, LossBreakdown) {
    let t = &s.tape;
    let empty: Vec<usize> = Vec::new();
    let positive: &[usize] = match (assignment, gt_box) {
        (Some(a), Some(_)) => &a.positive,
        _ => &empty,
    };
    let cls = cls_loss_var(s, score_logits, positive, cfg);
    let mut terms = LossBreakdown {
        cls: t.scalar(cls).to_f64(),
        ..Default::default()
    };
    let mut total = t.scale(cls, T::from_f64(cfg.lambda_cls));

    if let (Some(gt_box), false) = (gt_box, positive.is_empty()) {
        let inv_k = T::one() / T::from_usize(positive.len());
        let mut l1_sum: Option<Var> = None;
        let mut giou_sum: Option<Var> = None;
        let gt_arr = ArrayD::from_shape_vec(
            ndarray::IxDyn(&[1, 4]),
            gt_box.as_array().iter().map(|&v| T::from_f64(v)).collect(),
        )
        .unwrap();
        for &qi in positive {
            let b = t.slice_axis_op(boxes, 0, qi, qi + 1);
            let gt_c = t.leaf(gt_arr.clone());
            let l1 = t.sum_all(t.abs(t.sub(b, gt_c)));
            l1_sum = Some(match l1_sum {
                Some(acc) => t.add(acc, l1),
                None => l1,
            });
            let g = giou_var(s, b, gt_box);
            let gl = t.add_scalar(t.neg(g), T::one());
            giou_sum = Some(match giou_sum {
                Some(acc) => t.add(acc, t.reshape(gl, &[])),
                None => t.reshape(gl, &[]),
            });
        }
        let l1 = t.scale(l1_sum.unwrap(), inv_k);
        let gl = t.scale(giou_sum.unwrap(), inv_k);
        terms.l1 = t.scalar(l1).to_f64();
        terms.giou = t.scalar(gl).to_f64();
        total = t.add(total, t.scale(l1, T::from_f64(cfg.lambda_l1)));
        total = t.add(total, t.scale(gl, T::from_f64(cfg.lambda_giou)));

        if let Some(gt_mask) = gt_mask {
            if !positive_masks.is_empty() {
                let inv_m = T::one() / T::from_usize(positive_masks.len());
                let mut bce_sum: Option<Var> = None;
                let mut dice_sum: Option<Var> = None;
                for pm in positive_masks {
                    let shape4 = t.shape(pm.logits4);
                    let gt4 = majority_pool(gt_mask, 4, shape4[1], shape4[2])
                        .mapv(|v| T::from_f64(v));
                    let bce = t.bce_with_logits_mean(pm.logits4, &gt4);
                    bce_sum = Some(match bce_sum {
                        Some(acc) => t.add(acc, bce),
                        None => bce,
                    });
                    let (h, w) = gt_mask.dims();
                    let gt_full = ArrayD::from_shape_vec(
                        ndarray::IxDyn(&[1, h, w]),
                        gt_mask
                            .grid()
                            .iter()
                            .map(|&v| T::from_usize(v as usize))
                            .collect(),
                    )
                    .unwrap();
                    let gt_c = t.leaf(gt_full);
                    let inter = t.sum_all(t.mul(pm.soft, gt_c));
                    let psum = t.sum_all(pm.soft);
                    let gsum = T::from_usize(gt_mask.area());
                    let num = t.add_scalar(t.scale(inter, T::from_f64(2.0)), T::one());
                    let den = t.add_scalar(psum, gsum + T::one());
                    let dice = t.add_scalar(t.neg(t.div(num, den)), T::one());
                    dice_sum = Some(match dice_sum {
                        Some(acc) => t.add(acc, dice),
                        None => dice,
                    });
                }
                let bce = t.scale(bce_sum.unwrap(), inv_m);
                let dice = t.scale(dice_sum.unwrap(), inv_m);
                terms.mask_bce = t.scalar(bce).to_f64();
                terms.dice = t.scalar(dice).to_f64();
                total = t.add(total, t.scale(bce, T::from_f64(cfg.lambda_mask)));
                total = t.add(total, t.scale(dice, T::from_f64(cfg.lambda_dice)));
            }
        }
    }
    terms.total = t.scalar(total).to_f64();
    (total, terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    #[test]
    fn focal_closed_forms() {
        let v = focal_loss(0.5, 1, 0.25, 2.0);
        assert!((v - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-9);
        assert!((v - 0.043322).abs() < 1e-6);
        let v0 = focal_loss(0.5, 0, 0.25, 2.0);
        assert!((v0 - 0.129966).abs() < 1e-6);
        assert!(focal_loss(1.0, 1, 0.25, 2.0) < 1e-6);
    }

    #[test]
    fn dice_limits() {
        let gt = BinaryMask::new(ndarray::array![[1, 1], [0, 0]].mapv(|v: i32| v as u8)).unwrap();
        let perfect = gt.grid().mapv(|v| v as f64);
        assert!(dice_loss(&perfect, &gt).abs() < 1e-12);
        let zero = ndarray::Array2::<f64>::zeros((2, 2));
        let d = dice_loss(&zero, &gt);
        assert!((d - (1.0 - 1.0 / 3.0)).abs() < 1e-12, "got {d}");
        let empty_gt = BinaryMask::zeros(2, 2);
        assert!(dice_loss(&zero, &empty_gt).abs() < 1e-12);
    }

    #[test]
    fn topk_tie_break_and_errors() {
        let a = assign_topk(&[3.0, 1.0], 1).unwrap();
        assert_eq!(a.positive, vec![1]);
        let a = assign_topk(&[2.0, 2.0, 2.0, 2.0], 2).unwrap();
        assert_eq!(a.positive, vec![0, 1]);
        assert!(assign_topk(&[1.0], 2).is_err());
    }

    #[test]
    fn topk_matches_brute_force_subsets() {
        let mut rng = refseg_nn::rng::seeded(99);
        use rand::Rng;
        for trial in 0..200 {
            let n = rng.gen_range(2..=12);
            let k = rng.gen_range(1..=4.min(n));
            let costs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
            let ours = assign_topk(&costs, k).unwrap().positive;
            let brute = oracle::brute_force_least_cost_subset(&costs, k);
            assert_eq!(ours, brute, "trial {trial} costs {costs:?} k {k}");
        }
    }

    #[test]
    fn matching_cost_prefers_confident_accurate_queries() {
        let cfg = LossCfg::default();
        let gt = BBox::new(0.5, 0.5, 0.25, 0.25);
        // identical boxes, different scores: higher score wins
        let costs = matching_cost(
            &[0.9, 0.1],
            &[[0.5, 0.5, 0.25, 0.25], [0.5, 0.5, 0.25, 0.25]],
            &gt,
            &cfg,
        );
        assert!(costs[0] < costs[1]);
        // near-perfect query approaches zero cost
        let costs = matching_cost(&[0.999999], &[[0.5, 0.5, 0.25, 0.25]], &gt, &cfg);
        assert!(costs[0] < 1e-3, "cost {:.6}", costs[0]);
    }

    #[test]
    fn matching_cost_l1_only_hand_value() {
        let cfg = LossCfg {
            lambda_cls: 0.0,
            lambda_giou: 0.0,
            lambda_l1: 1.0,
            ..Default::default()
        };
        let gt = BBox::new(0.5, 0.5, 0.25, 0.25);
        let costs = matching_cost(&[0.5], &[[0.5, 0.5, 0.5, 0.5]], &gt, &cfg);
        assert!((costs[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn breakdown_weighted_total_arithmetic() {
        let b = LossBreakdown {
            cls: 1.0,
            l1: 1.0,
            giou: 1.0,
            mask_bce: 1.0,
            dice: 1.0,
            total: 0.0,
        };
        assert!((b.weighted_total(&LossCfg::default()) - 16.0).abs() < 1e-12);
    }
}
