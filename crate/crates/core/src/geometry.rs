//! Axis-aligned boxes in normalized center form, IoU and generalized IoU.

use serde::{Deserialize, Serialize};

/// Box in normalized center form: `(cx, cy, w, h)`, all in `[0,1]` relative
/// to image size. Corner form is derived transiently for geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        debug_assert!(w >= 0.0 && h >= 0.0, "box with negative extent");
        BBox { cx, cy, w, h }
    }

    /// From corner form `(x1, y1, x2, y2)`.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        debug_assert!(x2 >= x1 && y2 >= y1);
        BBox {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// Corner form `(x1, y1, x2, y2)`; satisfies `x1 <= x2`, `y1 <= y2`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

/// Plain intersection-over-union. An empty union yields 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalized IoU: `IoU - (enclosure - union) / enclosure`, in `[-1, 1]`.
///
/// A zero-area enclosure (both boxes degenerate at the same point) returns 0
/// by convention.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let encl = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    if encl <= 0.0 {
        return 0.0;
    }
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    iou - (encl - union) / encl
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn giou_identity() {
        let b = BBox::new(0.4, 0.6, 0.2, 0.3);
        assert!((giou(&b, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn giou_disjoint_diagonal() {
        // corner boxes (0,0,1,1) and (1,1,2,2): IoU 0, union 2, enclosure 4
        let a = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
        let b = BBox::from_corners(1.0, 1.0, 2.0, 2.0);
        assert!((giou(&a, &b) - (-0.5)).abs() < 1e-12);
    }

    #[test]
    fn giou_contained_overlap() {
        // (0,0,2,2) vs (1,1,2,2): IoU 0.25, enclosure equals union hull 4
        let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
        let b = BBox::from_corners(1.0, 1.0, 2.0, 2.0);
        assert!((giou(&a, &b) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn giou_degenerate_enclosure() {
        let a = BBox::new(0.5, 0.5, 0.0, 0.0);
        assert_eq!(giou(&a, &a), 0.0);
    }
}
