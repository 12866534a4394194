//! Segmentation evaluation: oIoU / mIoU, boundary F and the J&F video score.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::mask::{dilate_square, BinaryMask};

/// Aggregate metric record for one evaluation run.
///
/// `jf_mean` always equals `(j + f) / 2`; all entries live in `[0,1]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub oiou: f64,
    pub miou: f64,
    pub j: f64,
    pub f: f64,
    pub jf_mean: f64,
    /// Per-instance (region IoU, boundary F) pairs.
    pub per_sample: Vec<(f64, f64)>,
}

/// Default boundary tolerance: the DAVIS convention of 0.8% of the image
/// diagonal, rounded up.
pub fn default_boundary_tolerance(h: usize, w: usize) -> usize {
    let diag = ((h * h + w * w) as f64).sqrt();
    (0.008 * diag).ceil() as usize
}

/// Dataset-level pooled IoU and mean per-pair IoU.
///
/// Pairs whose union is empty contribute IoU 1 (both agree the object is
/// absent). Returns `(oIoU, mIoU)`.
pub fn dataset_iou(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<(f64, f64)> {
    if preds.len() != gts.len() {
        return Err(CoreError::LengthMismatch {
            left: preds.len(),
            right: gts.len(),
        });
    }
    let mut inter_total = 0usize;
    let mut union_total = 0usize;
    let mut iou_sum = 0.0;
    for (idx, (p, g)) in preds.iter().zip(gts.iter()).enumerate() {
        if p.dims() != g.dims() {
            return Err(CoreError::MaskShapeMismatch {
                index: idx,
                pred: p.dims(),
                gt: g.dims(),
            });
        }
        let (inter, union) = p.inter_union(g);
        inter_total += inter;
        union_total += union;
        iou_sum += if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
    }
    let oiou = if union_total == 0 {
        1.0
    } else {
        inter_total as f64 / union_total as f64
    };
    let miou = if preds.is_empty() {
        1.0
    } else {
        iou_sum / preds.len() as f64
    };
    Ok((oiou, miou))
}

/// Boundary F-measure with dilation-based matching at `tolerance_px`.
///
/// F = 1 when both masks are empty; 0 when exactly one is empty.
pub fn boundary_f(pred: &BinaryMask, gt: &BinaryMask, tolerance_px: usize) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(CoreError::MaskShapeMismatch {
            index: 0,
            pred: pred.dims(),
            gt: gt.dims(),
        });
    }
    let pb = pred.boundary();
    let gb = gt.boundary();
    let np: usize = pb.iter().map(|&v| v as usize).sum();
    let ng: usize = gb.iter().map(|&v| v as usize).sum();
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let gb_dil = dilate_square(&gb, tolerance_px);
    let pb_dil = dilate_square(&pb, tolerance_px);
    let matched_p: usize = pb
        .iter()
        .zip(gb_dil.iter())
        .map(|(&p, &g)| (p & g) as usize)
        .sum();
    let matched_g: usize = gb
        .iter()
        .zip(pb_dil.iter())
        .map(|(&g, &p)| (g & p) as usize)
        .sum();
    let precision = matched_p as f64 / np as f64;
    let recall = matched_g as f64 / ng as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// J&F for one aligned video: J = mean per-frame IoU, F = mean per-frame
/// boundary F at the default tolerance.
pub fn jf_score(pred_video: &[BinaryMask], gt_video: &[BinaryMask]) -> Result<MetricReport> {
    jf_score_with_tolerance(pred_video, gt_video, None)
}

pub fn jf_score_with_tolerance(
    pred_video: &[BinaryMask],
    gt_video: &[BinaryMask],
    tolerance_px: Option<usize>,
) -> Result<MetricReport> {
    if pred_video.len() != gt_video.len() {
        return Err(CoreError::LengthMismatch {
            left: pred_video.len(),
            right: gt_video.len(),
        });
    }
    let mut per_sample = Vec::with_capacity(pred_video.len());
    let mut inter_total = 0usize;
    let mut union_total = 0usize;
    for (idx, (p, g)) in pred_video.iter().zip(gt_video.iter()).enumerate() {
        if p.dims() != g.dims() {
            return Err(CoreError::MaskShapeMismatch {
                index: idx,
                pred: p.dims(),
                gt: g.dims(),
            });
        }
        let (h, w) = p.dims();
        let tol = tolerance_px.unwrap_or_else(|| default_boundary_tolerance(h, w));
        let (inter, union) = p.inter_union(g);
        inter_total += inter;
        union_total += union;
        let j = p.iou(g);
        let f = boundary_f(p, g, tol)?;
        per_sample.push((j, f));
    }
    let n = per_sample.len().max(1) as f64;
    let j = per_sample.iter().map(|s| s.0).sum::<f64>() / n;
    let f = per_sample.iter().map(|s| s.1).sum::<f64>() / n;
    let oiou = if union_total == 0 {
        1.0
    } else {
        inter_total as f64 / union_total as f64
    };
    Ok(MetricReport {
        oiou,
        miou: j,
        j,
        f,
        jf_mean: 0.5 * (j + f),
        per_sample,
    })
}

/// Report for image tasks; same record with per-image pairs as samples.
pub fn image_report(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<MetricReport> {
    jf_score_with_tolerance(preds, gts, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn mask_from(fill: &[(usize, usize)], h: usize, w: usize) -> BinaryMask {
        let mut g = Array2::<u8>::zeros((h, w));
        for &(i, j) in fill {
            g[[i, j]] = 1;
        }
        BinaryMask::new(g).unwrap()
    }

    fn rect(h: usize, w: usize, i0: usize, j0: usize, i1: usize, j1: usize) -> BinaryMask {
        let mut g = Array2::<u8>::zeros((h, w));
        for i in i0..=i1 {
            for j in j0..=j1 {
                g[[i, j]] = 1;
            }
        }
        BinaryMask::new(g).unwrap()
    }

    #[test]
    fn dataset_iou_hand_case() {
        // pairs with (inter,union) = (1,2) and (4,4)
        let p1 = mask_from(&[(0, 0)], 4, 4);
        let g1 = mask_from(&[(0, 0), (0, 1)], 4, 4);
        let p2 = rect(4, 4, 1, 1, 2, 2);
        let g2 = rect(4, 4, 1, 1, 2, 2);
        let (oiou, miou) = dataset_iou(&[p1, p2.clone()], &[g1, g2]).unwrap();
        assert!((miou - 0.75).abs() < 1e-12);
        assert!((oiou - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn dataset_iou_perfect_and_empty() {
        let m = rect(4, 4, 0, 0, 1, 1);
        let (o, mi) = dataset_iou(&[m.clone(), m.clone()], &[m.clone(), m.clone()]).unwrap();
        assert_eq!((o, mi), (1.0, 1.0));
        let empty = BinaryMask::zeros(4, 4);
        let (o, mi) = dataset_iou(&[empty.clone()], &[m]).unwrap();
        assert_eq!((o, mi), (0.0, 0.0));
    }

    #[test]
    fn dataset_iou_shape_mismatch_reports_index() {
        let a = BinaryMask::zeros(4, 4);
        let b = BinaryMask::zeros(5, 4);
        let err = dataset_iou(&[a.clone(), b], &[a.clone(), a]).unwrap_err();
        match err {
            CoreError::MaskShapeMismatch { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn boundary_f_identity_and_empty() {
        let m = rect(16, 16, 4, 4, 10, 11);
        assert_eq!(boundary_f(&m, &m, 2).unwrap(), 1.0);
        let empty = BinaryMask::zeros(16, 16);
        assert_eq!(boundary_f(&empty, &m, 2).unwrap(), 0.0);
        assert_eq!(boundary_f(&empty, &empty, 2).unwrap(), 1.0);
    }

    #[test]
    fn boundary_f_one_pixel_shift_within_tolerance() {
        let a = rect(16, 16, 4, 4, 10, 10);
        let b = rect(16, 16, 5, 4, 11, 10); // shifted down by 1 px
        assert_eq!(boundary_f(&a, &b, 2).unwrap(), 1.0);
    }

    #[test]
    fn jf_hand_arithmetic() {
        // J values {0.5, 1.0}, F values {1.0, 1.0}:
        // a 1-px boundary tolerance makes the half-overlap pair still match on F.
        let p1 = rect(16, 16, 4, 4, 7, 11);
        let g1 = rect(16, 16, 4, 4, 11, 11); // overlap 4x8=32 of union 64 -> J=0.5
        assert!((p1.iou(&g1) - 0.5).abs() < 1e-12);
        let p2 = rect(16, 16, 2, 2, 5, 5);
        let report = jf_score_with_tolerance(
            &[p1.clone(), p2.clone()],
            &[g1.clone(), p2.clone()],
            Some(4),
        )
        .unwrap();
        assert!((report.j - 0.75).abs() < 1e-12);
        assert!((report.f - 1.0).abs() < 1e-12);
        assert!((report.jf_mean - 0.875).abs() < 1e-12);
    }

    #[test]
    fn jf_empty_predictions() {
        let g = rect(8, 8, 2, 2, 5, 5);
        let p = BinaryMask::zeros(8, 8);
        let report = jf_score(&[p.clone(), p], &[g.clone(), g]).unwrap();
        assert_eq!(report.jf_mean, 0.0);
    }

    #[test]
    fn jf_length_mismatch() {
        let m = BinaryMask::zeros(4, 4);
        assert!(jf_score(&[m.clone()], &[m.clone(), m]).is_err());
    }

    #[test]
    fn tolerance_default_matches_davis_convention() {
        assert_eq!(default_boundary_tolerance(128, 128), 2);
        assert_eq!(default_boundary_tolerance(480, 854), 8);
    }
}
