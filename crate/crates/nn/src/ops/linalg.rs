//! Matrix products and row/channel broadcast arithmetic.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3};

use crate::scalar::Scalar;
use crate::tape::{Tape, Value, Var};

pub(crate) fn as2<T: Scalar>(v: &Value<T>) -> ndarray::ArrayView2<'_, T> {
    v.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-d tensor")
}

fn as2o<T: Scalar>(v: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    v.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-d tensor")
}

impl<T: Scalar> Tape<T> {
    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (a2, b2) = (as2(&av), as2(&bv));
        assert_eq!(a2.ncols(), b2.nrows(), "matmul: inner dims differ");
        let out = a2.dot(&b2).into_dyn().into_shared();
        self.push(
            out,
            Some(Box::new(move |g| {
                let g2 = as2o(g);
                let da = g2.dot(&as2(&bv).t()).into_dyn();
                let db = as2(&av).t().dot(&g2).into_dyn();
                vec![(a.id(), da), (b.id(), db)]
            })),
        )
    }

    /// Affine map `x·w + bias` for `x: [n, in]`, `w: [in, out]`, `bias: [out]`.
    pub fn linear(&self, x: Var, w: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(bias);
        let x2 = as2(&xv);
        let w2 = as2(&wv);
        let b1 = bv
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias must be 1-d");
        assert_eq!(x2.ncols(), w2.nrows(), "linear: in-dim mismatch");
        assert_eq!(w2.ncols(), b1.len(), "linear: bias length mismatch");
        let mut out = x2.dot(&w2);
        out += &b1;
        self.push(
            out.into_dyn().into_shared(),
            Some(Box::new(move |g| {
                let g2 = as2o(g);
                let dx = g2.dot(&as2(&wv).t()).into_dyn();
                let dw = as2(&xv).t().dot(&g2).into_dyn();
                let db = g2.sum_axis(Axis(0)).into_dyn();
                vec![(x.id(), dx), (w.id(), dw), (bias.id(), db)]
            })),
        )
    }

    /// Row broadcast add: `x: [n,c] + v: [c]`.
    pub fn add_row(&self, x: Var, v: Var) -> Var {
        let xv = self.value(x);
        let vv = self.value(v);
        let x2 = as2(&xv);
        let v1 = vv.view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(x2.ncols(), v1.len(), "add_row: width mismatch");
        let out = (&x2 + &v1).into_dyn().into_shared();
        self.push(
            out,
            Some(Box::new(move |g| {
                let g2 = as2o(g);
                vec![
                    (x.id(), g.clone()),
                    (v.id(), g2.sum_axis(Axis(0)).into_dyn()),
                ]
            })),
        )
    }

    /// Row broadcast multiply: `x: [n,c] * v: [c]`.
    pub fn mul_row(&self, x: Var, v: Var) -> Var {
        let xv = self.value(x);
        let vv = self.value(v);
        let x2 = as2(&xv);
        let v1 = vv.view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(x2.ncols(), v1.len(), "mul_row: width mismatch");
        let out = (&x2 * &v1).into_dyn().into_shared();
        self.push(
            out,
            Some(Box::new(move |g| {
                let g2 = as2o(g);
                let v1 = vv.view().into_dimensionality::<Ix1>().unwrap();
                let dx = (&g2 * &v1).into_dyn();
                let dv = (&g2 * &as2(&xv)).sum_axis(Axis(0)).into_dyn();
                vec![(x.id(), dx), (v.id(), dv)]
            })),
        )
    }

    /// Channel broadcast multiply: `x: [c,h,w] * v: [c]`.
    pub fn mul_channel(&self, x: Var, v: Var) -> Var {
        let xv = self.value(x);
        let vv = self.value(v);
        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let v1 = vv.view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(x3.shape()[0], v1.len(), "mul_channel: channel mismatch");
        let mut out = x3.to_owned();
        for (mut plane, &s) in out.outer_iter_mut().zip(v1.iter()) {
            plane.mapv_inplace(|x| x * s);
        }
        self.push(
            out.into_dyn().into_shared(),
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
                let v1 = vv.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = g3.to_owned();
                for (mut plane, &s) in dx.outer_iter_mut().zip(v1.iter()) {
                    plane.mapv_inplace(|x| x * s);
                }
                let mut dv = Array1::<T>::zeros(v1.len());
                for ((gp, xp), d) in g3.outer_iter().zip(x3.outer_iter()).zip(dv.iter_mut()) {
                    *d = (&gp * &xp).sum();
                }
                vec![(x.id(), dx.into_dyn()), (v.id(), dv.into_dyn())]
            })),
        )
    }

    /// Spatial broadcast multiply: `x: [c,h,w] * s: [h,w]`.
    pub fn mul_spatial(&self, x: Var, s: Var) -> Var {
        let xv = self.value(x);
        let sv = self.value(s);
        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let s2 = sv.view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(&x3.shape()[1..], s2.shape(), "mul_spatial: plane mismatch");
        let mut out = x3.to_owned();
        for mut plane in out.outer_iter_mut() {
            plane.zip_mut_with(&s2, |x, &m| *x = *x * m);
        }
        self.push(
            out.into_dyn().into_shared(),
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
                let s2 = sv.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = g3.to_owned();
                for mut plane in dx.outer_iter_mut() {
                    plane.zip_mut_with(&s2, |x, &m| *x = *x * m);
                }
                let mut ds = Array2::<T>::zeros(s2.raw_dim());
                for (gp, xp) in g3.outer_iter().zip(x3.outer_iter()) {
                    ds = ds + &(&gp * &xp);
                }
                vec![(x.id(), dx.into_dyn()), (s.id(), ds.into_dyn())]
            })),
        )
    }

    /// Channel broadcast add: `x: [c,h,w] + v: [c]`.
    pub fn add_channel(&self, x: Var, v: Var) -> Var {
        let xv = self.value(x);
        let vv = self.value(v);
        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let v1 = vv.view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(x3.shape()[0], v1.len(), "add_channel: channel mismatch");
        let mut out = x3.to_owned();
        for (mut plane, &s) in out.outer_iter_mut().zip(v1.iter()) {
            plane.mapv_inplace(|x| x + s);
        }
        self.push(
            out.into_dyn().into_shared(),
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let dv: Array1<T> = g3
                    .outer_iter()
                    .map(|plane| plane.sum())
                    .collect();
                vec![(x.id(), g.clone()), (v.id(), dv.into_dyn())]
            })),
        )
    }
}
