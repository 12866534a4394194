//! Shape manipulation: reshape, concat, slicing, transpose.

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

impl<T: Scalar> Tape<T> {
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let av = self.value(a);
        let old = av.shape().to_vec();
        assert_eq!(
            av.len(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch {:?} -> {:?}",
            old,
            shape
        );
        let out = av
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape")
            .into_shared();
        self.push(
            out,
            Some(Box::new(move |g| {
                let back = g
                    .to_owned()
                    .into_shape_with_order(IxDyn(&old))
                    .expect("reshape backward");
                vec![(a.id(), back)]
            })),
        )
    }

    /// Concatenate along `axis`.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat: empty input list");
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views)
            .expect("concat: incompatible shapes")
            .into_shared();
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut grads = Vec::with_capacity(ids.len());
                let mut start = 0isize;
                for (&id, &sz) in ids.iter().zip(sizes.iter()) {
                    let sl = g
                        .slice_axis(Axis(axis), Slice::from(start..start + sz as isize))
                        .to_owned();
                    grads.push((id, sl));
                    start += sz as isize;
                }
                grads
            })),
        )
    }

    /// Slice `[start, end)` along `axis`.
    pub fn slice_axis_op(&self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(end <= av.shape()[axis] && start < end, "slice out of range");
        let out = av
            .slice_axis(Axis(axis), Slice::from(start as isize..end as isize))
            .to_owned()
            .into_shared();
        let full = av.raw_dim();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut dx = ArrayD::<T>::zeros(full.clone());
                dx.slice_axis_mut(Axis(axis), Slice::from(start as isize..end as isize))
                    .assign(g);
                vec![(a.id(), dx)]
            })),
        )
    }

    /// Select a set of rows of `x: [n, ...]` (gather along axis 0).
    pub fn gather_rows(&self, a: Var, rows: &[usize]) -> Var {
        let av = self.value(a);
        let n = av.shape()[0];
        for &r in rows {
            assert!(r < n, "gather_rows: row {r} out of range {n}");
        }
        let out = av.select(Axis(0), rows).into_shared();
        let rows_c = rows.to_vec();
        let full = av.raw_dim();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut dx = ArrayD::<T>::zeros(full.clone());
                for (gi, &r) in rows_c.iter().enumerate() {
                    let src = g.index_axis(Axis(0), gi);
                    let mut dst = dx.index_axis_mut(Axis(0), r);
                    dst += &src;
                }
                vec![(a.id(), dx)]
            })),
        )
    }

    /// 2-d transpose.
    pub fn transpose2(&self, a: Var) -> Var {
        let av = self.value(a);
        assert_eq!(av.ndim(), 2, "transpose2: expected 2-d");
        let out = av.t().as_standard_layout().into_owned().into_shared();
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a.id(), g.t().as_standard_layout().into_owned())]
            })),
        )
    }

    /// `[c,h,w] -> [h*w, c]` token layout used by attention blocks.
    pub fn chw_to_tokens(&self, a: Var) -> Var {
        let av = self.value(a);
        assert_eq!(av.ndim(), 3, "chw_to_tokens: expected 3-d");
        let (c, h, w) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let flat = av
            .to_owned()
            .into_shape_with_order(IxDyn(&[c, h * w]))
            .unwrap();
        let out = flat.t().as_standard_layout().into_owned().into_shared();
        self.push(
            out,
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let dx = g2
                    .t()
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&[c, h, w]))
                    .unwrap();
                vec![(a.id(), dx)]
            })),
        )
    }

    /// `[h*w, c] -> [c,h,w]`, inverse of [`Tape::chw_to_tokens`].
    pub fn tokens_to_chw(&self, a: Var, h: usize, w: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.ndim(), 2, "tokens_to_chw: expected 2-d");
        let (n, c) = (av.shape()[0], av.shape()[1]);
        assert_eq!(n, h * w, "tokens_to_chw: token count mismatch");
        let out = av
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&[c, h, w]))
            .unwrap()
            .into_shared();
        self.push(
            out,
            Some(Box::new(move |g| {
                let flat = g
                    .to_owned()
                    .into_shape_with_order(IxDyn(&[c, h * w]))
                    .unwrap();
                let g2 = flat.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let dx = g2.t().as_standard_layout().into_owned().into_dyn();
                vec![(a.id(), dx)]
            })),
        )
    }
}
