//! Reductions: sums, means, masked pooling and spatial/channel pooling.

use ndarray::{Array1, Array2, ArrayD, Ix1, Ix2, Ix3, IxDyn};

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

impl<T: Scalar> Tape<T> {
    pub fn sum_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let total: T = av.iter().copied().sum();
        let out = ArrayD::from_elem(IxDyn(&[]), total).into_shared();
        let shape = av.raw_dim();
        self.push(
            out,
            Some(Box::new(move |g| {
                let gs = *g.iter().next().unwrap();
                vec![(a.id(), ArrayD::from_elem(shape.clone(), gs))]
            })),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::from_usize(n))
    }

    /// Mean over rows of `x: [n,c]` restricted to `valid` rows -> `[c]`.
    pub fn mean_rows_masked(&self, x: Var, valid: &[bool]) -> Var {
        let xv = self.value(x);
        let x2 = xv.view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(x2.nrows(), valid.len(), "mean_rows_masked: row count");
        let count = valid.iter().filter(|&&v| v).count();
        assert!(count > 0, "mean_rows_masked: no valid rows");
        let inv = T::one() / T::from_usize(count);
        let mut acc = Array1::<T>::zeros(x2.ncols());
        for (row, &ok) in x2.outer_iter().zip(valid.iter()) {
            if ok {
                acc += &row;
            }
        }
        acc.mapv_inplace(|v| v * inv);
        let validv = valid.to_vec();
        let (n, c) = (x2.nrows(), x2.ncols());
        self.push(
            acc.into_dyn().into_shared(),
            Some(Box::new(move |g| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = Array2::<T>::zeros((n, c));
                for (mut row, &ok) in dx.outer_iter_mut().zip(validv.iter()) {
                    if ok {
                        row.assign(&g1.mapv(|v| v * inv));
                    }
                }
                vec![(x.id(), dx.into_dyn())]
            })),
        )
    }

    /// Global spatial mean of `x: [c,h,w]` -> `[c]`.
    pub fn mean_spatial(&self, x: Var) -> Var {
        let xv = self.value(x);
        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = (x3.shape()[0], x3.shape()[1], x3.shape()[2]);
        let inv = T::one() / T::from_usize(h * w);
        let out: Array1<T> = x3.outer_iter().map(|p| p.sum() * inv).collect();
        self.push(
            out.into_dyn().into_shared(),
            Some(Box::new(move |g| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = ndarray::Array3::<T>::zeros((c, h, w));
                for (mut plane, &gv) in dx.outer_iter_mut().zip(g1.iter()) {
                    plane.fill(gv * inv);
                }
                vec![(x.id(), dx.into_dyn())]
            })),
        )
    }

    /// Global spatial max of `x: [c,h,w]` -> `[c]`; gradient flows to the argmax.
    pub fn max_spatial(&self, x: Var) -> Var {
        let xv = self.value(x);
        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = (x3.shape()[0], x3.shape()[1], x3.shape()[2]);
        let mut out = Array1::<T>::zeros(c);
        let mut argmax = vec![0usize; c];
        for (ci, plane) in x3.outer_iter().enumerate() {
            let mut best = T::neg_infinity();
            let mut idx = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > best {
                    best = v;
                    idx = i;
                }
            }
            out[ci] = best;
            argmax[ci] = idx;
        }
        self.push(
            out.into_dyn().into_shared(),
            Some(Box::new(move |g| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = ndarray::Array3::<T>::zeros((c, h, w));
                for ci in 0..c {
                    let (i, j) = (argmax[ci] / w, argmax[ci] % w);
                    dx[[ci, i, j]] = g1[ci];
                }
                vec![(x.id(), dx.into_dyn())]
            })),
        )
    }

    /// Per-pixel mean over channels of `x: [c,h,w]` -> `[h,w]`.
    pub fn mean_channelwise(&self, x: Var) -> Var {
        let xv = self.value(x);
        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = (x3.shape()[0], x3.shape()[1], x3.shape()[2]);
        let inv = T::one() / T::from_usize(c);
        let mut out = Array2::<T>::zeros((h, w));
        for plane in x3.outer_iter() {
            out += &plane;
        }
        out.mapv_inplace(|v| v * inv);
        self.push(
            out.into_dyn().into_shared(),
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ndarray::Array3::<T>::zeros((c, h, w));
                for mut plane in dx.outer_iter_mut() {
                    plane.assign(&g2.mapv(|v| v * inv));
                }
                vec![(x.id(), dx.into_dyn())]
            })),
        )
    }

    /// Per-pixel max over channels of `x: [c,h,w]` -> `[h,w]`.
    pub fn max_channelwise(&self, x: Var) -> Var {
        let xv = self.value(x);
        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = (x3.shape()[0], x3.shape()[1], x3.shape()[2]);
        let mut out = Array2::<T>::from_elem((h, w), T::neg_infinity());
        let mut argmax = Array2::<usize>::zeros((h, w));
        for (ci, plane) in x3.outer_iter().enumerate() {
            for i in 0..h {
                for j in 0..w {
                    if plane[[i, j]] > out[[i, j]] {
                        out[[i, j]] = plane[[i, j]];
                        argmax[[i, j]] = ci;
                    }
                }
            }
        }
        self.push(
            out.into_dyn().into_shared(),
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ndarray::Array3::<T>::zeros((c, h, w));
                for i in 0..h {
                    for j in 0..w {
                        dx[[argmax[[i, j]], i, j]] = g2[[i, j]];
                    }
                }
                vec![(x.id(), dx.into_dyn())]
            })),
        )
    }
}
