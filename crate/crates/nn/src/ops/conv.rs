//! 2-d convolution via im2col + GEMM.

use ndarray::{Array2, Ix1, Ix3, Ix4, IxDyn};

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Pack input patches into `[ci*kh*kw, oh*ow]` column-major-by-pixel layout.
fn im2col<T: Scalar>(
    x: &ndarray::ArrayView3<'_, T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<T> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cols = Array2::<T>::zeros((ci * kh * kw, oh * ow));
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let krow = c * kh * kw + ky * kw + kx;
                let mut row = cols.row_mut(krow);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        row[oy * ow + ox] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(
    dcols: &Array2<T>,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array3<T> {
    let mut dx = ndarray::Array3::<T>::zeros((ci, h, w));
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let krow = c * kh * kw + ky * kw + kx;
                let row = dcols.row(krow);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[c, iy as usize, ix as usize]] =
                            dx[[c, iy as usize, ix as usize]] + row[oy * ow + ox];
                    }
                }
            }
        }
    }
    dx
}

impl<T: Scalar> Tape<T> {
    /// Convolution of `x: [ci,h,w]` with `w: [co,ci,kh,kw]`, bias `[co]`.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(weight);
        let bv = self.value(bias);
        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let w4 = wv.view().into_dimensionality::<Ix4>().unwrap();
        let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
        let (ci, h, w) = (x3.shape()[0], x3.shape()[1], x3.shape()[2]);
        let (co, wci, kh, kw) = (w4.shape()[0], w4.shape()[1], w4.shape()[2], w4.shape()[3]);
        assert_eq!(ci, wci, "conv2d: channel mismatch");
        assert_eq!(co, b1.len(), "conv2d: bias mismatch");
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "conv2d: kernel larger than padded input"
        );
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;

        let cols = im2col(&x3, kh, kw, stride, pad, oh, ow).into_shared();
        let w2 = w4
            .to_owned()
            .into_shape_with_order((co, ci * kh * kw))
            .unwrap();
        let mut y2 = w2.dot(&cols.view());
        for (mut row, &b) in y2.outer_iter_mut().zip(b1.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let y2 = if y2.is_standard_layout() {
            y2
        } else {
            y2.as_standard_layout().into_owned()
        };
        let out = y2
            .into_shape_with_order(IxDyn(&[co, oh, ow]))
            .unwrap()
            .into_shared();

        self.push(
            out,
            Some(Box::new(move |g| {
                let g2 = g
                    .view()
                    .into_shape_with_order((co, oh * ow))
                    .unwrap()
                    .to_owned();
                let w2 = wv
                    .to_owned()
                    .into_shape_with_order((co, ci * kh * kw))
                    .unwrap();
                // dW = dY · colsᵀ (GEMM may return F-order for degenerate dims)
                let dw2 = g2.dot(&cols.t());
                let dw2 = if dw2.is_standard_layout() {
                    dw2
                } else {
                    dw2.as_standard_layout().into_owned()
                };
                let dw = dw2
                    .into_shape_with_order(IxDyn(&[co, ci, kh, kw]))
                    .unwrap();
                // dX = col2im(Wᵀ · dY)
                let dcols = w2.t().dot(&g2);
                let dx = col2im(&dcols, ci, h, w, kh, kw, stride, pad, oh, ow).into_dyn();
                let db: ndarray::Array1<T> =
                    g2.outer_iter().map(|row| row.sum()).collect();
                vec![
                    (x.id(), dx),
                    (weight.id(), dw.into_dyn()),
                    (bias.id(), db.into_dyn()),
                ]
            })),
        )
    }
}

/// Output size arithmetic mirroring [`Tape::conv2d`].
pub fn conv_out_hw(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}
