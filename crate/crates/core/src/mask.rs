//! Binary masks and the morphology needed for boundary evaluation.

use ndarray::Array2;

use crate::error::{CoreError, Result};
use crate::geometry::BBox;

/// Strictly binary mask (values 0/1) with positive dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    grid: Array2<u8>,
}

impl BinaryMask {
    pub fn new(grid: Array2<u8>) -> Result<Self> {
        let (h, w) = grid.dim();
        assert!(h > 0 && w > 0, "mask dimensions must be positive");
        for ((i, j), &v) in grid.indexed_iter() {
            if v > 1 {
                return Err(CoreError::NonBinaryMask {
                    row: i,
                    col: j,
                    value: v as f32,
                });
            }
        }
        Ok(BinaryMask { grid })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        BinaryMask {
            grid: Array2::zeros((h, w)),
        }
    }

    /// Threshold a probability map at `thresh`.
    pub fn from_soft(soft: &Array2<f32>, thresh: f32) -> Self {
        BinaryMask {
            grid: soft.mapv(|p| u8::from(p > thresh)),
        }
    }

    pub fn grid(&self) -> &Array2<u8> {
        &self.grid
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dim()
    }

    pub fn area(&self) -> usize {
        self.grid.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.iter().all(|&v| v == 0)
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.grid[[i, j]] == 1
    }

    /// Intersection and union pixel counts against another mask.
    pub fn inter_union(&self, other: &BinaryMask) -> (usize, usize) {
        debug_assert_eq!(self.dims(), other.dims());
        let mut inter = 0;
        let mut union = 0;
        for (&a, &b) in self.grid.iter().zip(other.grid.iter()) {
            inter += (a & b) as usize;
            union += (a | b) as usize;
        }
        (inter, union)
    }

    /// Per-pair IoU; both-empty pairs count as 1 (perfect agreement).
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let (inter, union) = self.inter_union(other);
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Tight bounding box around the foreground, in normalized center form.
    /// `None` for an empty mask.
    pub fn tight_box(&self) -> Option<BBox> {
        let (h, w) = self.dims();
        let (mut i0, mut i1, mut j0, mut j1) = (usize::MAX, 0, usize::MAX, 0);
        for ((i, j), &v) in self.grid.indexed_iter() {
            if v == 1 {
                i0 = i0.min(i);
                i1 = i1.max(i);
                j0 = j0.min(j);
                j1 = j1.max(j);
            }
        }
        if i0 == usize::MAX {
            return None;
        }
        // pixel span [j0, j1] occupies the continuous extent [j0, j1+1)
        Some(BBox::from_corners(
            j0 as f64 / w as f64,
            i0 as f64 / h as f64,
            (j1 + 1) as f64 / w as f64,
            (i1 + 1) as f64 / h as f64,
        ))
    }

    /// Boundary pixels: foreground with a background 4-neighbour (image
    /// border counts as background).
    pub fn boundary(&self) -> Array2<u8> {
        let (h, w) = self.dims();
        let mut out = Array2::<u8>::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                if self.grid[[i, j]] == 0 {
                    continue;
                }
                let edge = i == 0
                    || j == 0
                    || i == h - 1
                    || j == w - 1
                    || self.grid[[i - 1, j]] == 0
                    || self.grid[[i + 1, j]] == 0
                    || self.grid[[i, j - 1]] == 0
                    || self.grid[[i, j + 1]] == 0;
                if edge {
                    out[[i, j]] = 1;
                }
            }
        }
        out
    }

    /// Nearest-neighbour upscale by an integer factor.
    pub fn upscale_nearest(&self, k: usize) -> BinaryMask {
        let (h, w) = self.dims();
        let mut out = Array2::<u8>::zeros((h * k, w * k));
        for ((i, j), &v) in self.grid.indexed_iter() {
            if v == 1 {
                for di in 0..k {
                    for dj in 0..k {
                        out[[i * k + di, j * k + dj]] = 1;
                    }
                }
            }
        }
        BinaryMask { grid: out }
    }
}

/// Dilate with a square structuring element of Chebyshev radius `r`.
pub fn dilate_square(mask: &Array2<u8>, r: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    if r == 0 {
        return mask.clone();
    }
    let mut out = Array2::<u8>::zeros((h, w));
    for ((i, j), &v) in mask.indexed_iter() {
        if v == 1 {
            let i0 = i.saturating_sub(r);
            let j0 = j.saturating_sub(r);
            for ii in i0..=(i + r).min(h - 1) {
                for jj in j0..=(j + r).min(w - 1) {
                    out[[ii, jj]] = 1;
                }
            }
        }
    }
    out
}
