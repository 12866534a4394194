//! Fused layer/group normalization with hand-derived backward passes.

use ndarray::{Array1, Array2, Array3, Ix1, Ix2, Ix3};

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

impl<T: Scalar> Tape<T> {
    /// LayerNorm over the last axis of `x: [n,c]` with affine `gamma, beta: [c]`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let x2 = xv.view().into_dimensionality::<Ix2>().unwrap();
        let g1 = gv.view().into_dimensionality::<Ix1>().unwrap();
        let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
        let (n, c) = (x2.nrows(), x2.ncols());
        assert_eq!(g1.len(), c, "layer_norm: gamma length");
        assert_eq!(b1.len(), c, "layer_norm: beta length");

        let cf = T::from_usize(c);
        let mut xhat = Array2::<T>::zeros((n, c));
        let mut inv_std = Array1::<T>::zeros(n);
        let mut out = Array2::<T>::zeros((n, c));
        for i in 0..n {
            let row = x2.row(i);
            let mean = row.sum() / cf;
            let var = row.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / cf;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                let xh = (row[j] - mean) * istd;
                xhat[[i, j]] = xh;
                out[[i, j]] = xh * g1[j] + b1[j];
            }
        }
        let xhat = xhat.into_shared();
        let inv_std = inv_std.into_shared();
        self.push(
            out.into_dyn().into_shared(),
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let gm = gv.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = Array2::<T>::zeros((n, c));
                let mut dgamma = Array1::<T>::zeros(c);
                let mut dbeta = Array1::<T>::zeros(c);
                let cf = T::from_usize(c);
                for i in 0..n {
                    let grow = g2.row(i);
                    let xh = xhat.row(i);
                    // per-row reductions of gamma-weighted gradient
                    let mut sum_gy = T::zero();
                    let mut sum_gy_xh = T::zero();
                    for j in 0..c {
                        let gy = grow[j] * gm[j];
                        sum_gy = sum_gy + gy;
                        sum_gy_xh = sum_gy_xh + gy * xh[j];
                        dgamma[j] = dgamma[j] + grow[j] * xh[j];
                        dbeta[j] = dbeta[j] + grow[j];
                    }
                    let istd = inv_std[i];
                    for j in 0..c {
                        let gy = grow[j] * gm[j];
                        dx[[i, j]] = istd * (gy - sum_gy / cf - xh[j] * sum_gy_xh / cf);
                    }
                }
                vec![
                    (x.id(), dx.into_dyn()),
                    (gamma.id(), dgamma.into_dyn()),
                    (beta.id(), dbeta.into_dyn()),
                ]
            })),
        )
    }

    /// GroupNorm over `x: [c,h,w]` with `groups` channel groups and per-channel affine.
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Var {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let g1 = gv.view().into_dimensionality::<Ix1>().unwrap();
        let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
        let (c, h, w) = (x3.shape()[0], x3.shape()[1], x3.shape()[2]);
        assert_eq!(c % groups, 0, "group_norm: groups must divide channels");
        assert_eq!(g1.len(), c, "group_norm: gamma length");
        let cg = c / groups;
        let m = T::from_usize(cg * h * w);

        let mut xhat = Array3::<T>::zeros((c, h, w));
        let mut inv_std = Array1::<T>::zeros(groups);
        let mut out = Array3::<T>::zeros((c, h, w));
        for gi in 0..groups {
            let chs = gi * cg..(gi + 1) * cg;
            let mut mean = T::zero();
            for ch in chs.clone() {
                mean = mean + x3.index_axis(ndarray::Axis(0), ch).sum();
            }
            mean = mean / m;
            let mut var = T::zero();
            for ch in chs.clone() {
                let plane = x3.index_axis(ndarray::Axis(0), ch);
                var = var + plane.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean));
            }
            var = var / m;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[gi] = istd;
            for ch in chs {
                for i in 0..h {
                    for j in 0..w {
                        let xh = (x3[[ch, i, j]] - mean) * istd;
                        xhat[[ch, i, j]] = xh;
                        out[[ch, i, j]] = xh * g1[ch] + b1[ch];
                    }
                }
            }
        }
        let xhat = xhat.into_shared();
        let inv_std = inv_std.into_shared();
        self.push(
            out.into_dyn().into_shared(),
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let gm = gv.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = Array3::<T>::zeros((c, h, w));
                let mut dgamma = Array1::<T>::zeros(c);
                let mut dbeta = Array1::<T>::zeros(c);
                for gi in 0..groups {
                    let chs = gi * cg..(gi + 1) * cg;
                    let mut sum_gy = T::zero();
                    let mut sum_gy_xh = T::zero();
                    for ch in chs.clone() {
                        for i in 0..h {
                            for j in 0..w {
                                let gy = g3[[ch, i, j]] * gm[ch];
                                sum_gy = sum_gy + gy;
                                sum_gy_xh = sum_gy_xh + gy * xhat[[ch, i, j]];
                                dgamma[ch] = dgamma[ch] + g3[[ch, i, j]] * xhat[[ch, i, j]];
                                dbeta[ch] = dbeta[ch] + g3[[ch, i, j]];
                            }
                        }
                    }
                    let istd = inv_std[gi];
                    for ch in chs {
                        for i in 0..h {
                            for j in 0..w {
                                let gy = g3[[ch, i, j]] * gm[ch];
                                dx[[ch, i, j]] = istd
                                    * (gy - sum_gy / m - xhat[[ch, i, j]] * sum_gy_xh / m);
                            }
                        }
                    }
                }
                vec![
                    (x.id(), dx.into_dyn()),
                    (gamma.id(), dgamma.into_dyn()),
                    (beta.id(), dbeta.into_dyn()),
                ]
            })),
        )
    }
}
