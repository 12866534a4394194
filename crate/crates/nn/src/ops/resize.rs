//! Spatial upsampling ops.

use ndarray::{Array3, Ix3};

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Precomputed 1-d bilinear taps: output index -> (i0, i1, weight for i1).
fn bilinear_taps(out_len: usize, in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let f = factor as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) / f - 0.5;
            let src = src.clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl<T: Scalar> Tape<T> {
    /// Nearest-neighbour 2x upsample of `x: [c,h,w]`.
    pub fn upsample_nearest2(&self, x: Var) -> Var {
        let xv = self.value(x);
        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = (x3.shape()[0], x3.shape()[1], x3.shape()[2]);
        let mut out = Array3::<T>::zeros((c, 2 * h, 2 * w));
        for ch in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[[ch, i, j]] = x3[[ch, i / 2, j / 2]];
                }
            }
        }
        self.push(
            out.into_dyn().into_shared(),
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = Array3::<T>::zeros((c, h, w));
                for ch in 0..c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dx[[ch, i / 2, j / 2]] =
                                dx[[ch, i / 2, j / 2]] + g3[[ch, i, j]];
                        }
                    }
                }
                vec![(x.id(), dx.into_dyn())]
            })),
        )
    }

    /// Bilinear upsample of `x: [c,h,w]` by an integer factor
    /// (half-pixel-centre convention).
    pub fn upsample_bilinear(&self, x: Var, factor: usize) -> Var {
        assert!(factor >= 1, "upsample factor must be >= 1");
        let xv = self.value(x);
        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = (x3.shape()[0], x3.shape()[1], x3.shape()[2]);
        let (oh, ow) = (h * factor, w * factor);
        let ty = bilinear_taps(oh, h, factor);
        let tx = bilinear_taps(ow, w, factor);
        let mut out = Array3::<T>::zeros((c, oh, ow));
        for ch in 0..c {
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let (fy, gy) = (T::from_f64(fy), T::from_f64(1.0 - fy));
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let (fx, gx) = (T::from_f64(fx), T::from_f64(1.0 - fx));
                    out[[ch, oy, ox]] = x3[[ch, y0, x0]] * gy * gx
                        + x3[[ch, y0, x1]] * gy * fx
                        + x3[[ch, y1, x0]] * fy * gx
                        + x3[[ch, y1, x1]] * fy * fx;
                }
            }
        }
        let (ty_b, tx_b) = (ty.clone(), tx.clone());
        self.push(
            out.into_dyn().into_shared(),
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = Array3::<T>::zeros((c, h, w));
                for ch in 0..c {
                    for (oy, &(y0, y1, fy)) in ty_b.iter().enumerate() {
                        let (fy, gy) = (T::from_f64(fy), T::from_f64(1.0 - fy));
                        for (ox, &(x0, x1, fx)) in tx_b.iter().enumerate() {
                            let (fx, gx) = (T::from_f64(fx), T::from_f64(1.0 - fx));
                            let gv = g3[[ch, oy, ox]];
                            dx[[ch, y0, x0]] = dx[[ch, y0, x0]] + gv * gy * gx;
                            dx[[ch, y0, x1]] = dx[[ch, y0, x1]] + gv * gy * fx;
                            dx[[ch, y1, x0]] = dx[[ch, y1, x0]] + gv * fy * gx;
                            dx[[ch, y1, x1]] = dx[[ch, y1, x1]] + gv * fy * fx;
                        }
                    }
                }
                vec![(x.id(), dx.into_dyn())]
            })),
        )
    }
}
