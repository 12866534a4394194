//! Tiled multi-head cross-attention with online softmax.
//!
//! Scores are streamed over key tiles with a running max / denominator, so
//! the full `[n_q, n_k]` score matrix is never materialized; the forward
//! keeps only per-query log-sum-exp values and the backward pass recomputes
//! each tile's probabilities from them. Scratch memory is therefore bounded
//! by `n_q * tile` elements (see [`attention_memory_bound`]).

use ndarray::{Array1, Array2, Ix2};

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct AttentionCfg {
    pub heads: usize,
    pub tile: usize,
}

/// Peak number of score-matrix elements held at once by the tiled kernel.
pub fn attention_memory_bound(n_q: usize, n_k: usize, tile: usize) -> usize {
    n_q * tile.min(n_k.max(1))
}

/// Copy the `head`-th column block (width `d`) of `m: [n, heads*d]`.
fn head_block<T: Scalar>(m: &ndarray::ArrayView2<'_, T>, head: usize, d: usize) -> Array2<T> {
    m.slice(ndarray::s![.., head * d..(head + 1) * d]).to_owned()
}

impl<T: Scalar> Tape<T> {
    /// Exact softmax attention `softmax(QKᵀ/√d)·V` per head.
    ///
    /// `q: [n_q, c]`, `k, v: [n_k, c]`; `key_valid`, when given, marks keys
    /// that may be attended to. Panics if no key is valid — callers are
    /// expected to check first.
    pub fn attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        cfg: AttentionCfg,
        key_valid: Option<&[bool]>,
    ) -> Var {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let q2 = qv.view().into_dimensionality::<Ix2>().unwrap();
        let k2 = kv.view().into_dimensionality::<Ix2>().unwrap();
        let v2 = vv.view().into_dimensionality::<Ix2>().unwrap();
        let (n_q, c) = (q2.nrows(), q2.ncols());
        let n_k_full = k2.nrows();
        assert_eq!(k2.ncols(), c, "attention: key dim mismatch");
        assert_eq!(v2.ncols(), c, "attention: value dim mismatch");
        assert_eq!(v2.nrows(), n_k_full, "attention: key/value count mismatch");
        assert!(cfg.heads >= 1 && c % cfg.heads == 0, "heads must divide dim");
        assert!(cfg.tile >= 1, "tile must be >= 1");
        let d = c / cfg.heads;
        let scale = T::one() / T::from_usize(d).sqrt();

        // Gather attendable keys once; tiles then run over the gathered set.
        let key_idx: Vec<usize> = match key_valid {
            Some(flags) => {
                assert_eq!(flags.len(), n_k_full, "attention: validity length");
                flags
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &ok)| ok.then_some(i))
                    .collect()
            }
            None => (0..n_k_full).collect(),
        };
        assert!(!key_idx.is_empty(), "attention: no valid keys");
        let n_k = key_idx.len();
        let kg = k2.select(ndarray::Axis(0), &key_idx);
        let vg = v2.select(ndarray::Axis(0), &key_idx);

        let mut out = Array2::<T>::zeros((n_q, c));
        let mut lse = Array2::<T>::zeros((cfg.heads, n_q));
        for h in 0..cfg.heads {
            let qh = head_block(&q2.view(), h, d);
            let kh = head_block(&kg.view(), h, d);
            let vh = head_block(&vg.view(), h, d);
            let mut run_max = Array1::<T>::from_elem(n_q, T::neg_infinity());
            let mut run_den = Array1::<T>::zeros(n_q);
            let mut acc = Array2::<T>::zeros((n_q, d));
            let mut start = 0;
            while start < n_k {
                let end = (start + cfg.tile).min(n_k);
                let kt = kh.slice(ndarray::s![start..end, ..]);
                let vt = vh.slice(ndarray::s![start..end, ..]);
                // scores for this tile only: [n_q, tile]
                let mut s = qh.dot(&kt.t());
                s.mapv_inplace(|x| x * scale);
                for qi in 0..n_q {
                    let row = s.row(qi);
                    let tile_max = row.fold(T::neg_infinity(), |m, &x| m.max(x));
                    let new_max = run_max[qi].max(tile_max);
                    let corr = if run_max[qi] == T::neg_infinity() {
                        T::zero()
                    } else {
                        (run_max[qi] - new_max).exp()
                    };
                    let mut den = run_den[qi] * corr;
                    let mut acc_row = acc.row_mut(qi);
                    acc_row.mapv_inplace(|x| x * corr);
                    for (ti, &sv) in row.iter().enumerate() {
                        let p = (sv - new_max).exp();
                        den = den + p;
                        acc_row.scaled_add(p, &vt.row(ti));
                    }
                    run_max[qi] = new_max;
                    run_den[qi] = den;
                }
                start = end;
            }
            for qi in 0..n_q {
                let inv = T::one() / run_den[qi];
                for di in 0..d {
                    out[[qi, h * d + di]] = acc[[qi, di]] * inv;
                }
                lse[[h, qi]] = run_max[qi] + run_den[qi].ln();
            }
        }

        let out = out.into_dyn().into_shared();
        let out_c = out.clone();
        let tile = cfg.tile;
        let heads = cfg.heads;
        self.push(
            out,
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let o2 = out_c.view().into_dimensionality::<Ix2>().unwrap();
                let q2 = qv.view().into_dimensionality::<Ix2>().unwrap();
                let k2 = kv.view().into_dimensionality::<Ix2>().unwrap();
                let v2 = vv.view().into_dimensionality::<Ix2>().unwrap();
                let kg = k2.select(ndarray::Axis(0), &key_idx);
                let vg = v2.select(ndarray::Axis(0), &key_idx);
                let mut dq = Array2::<T>::zeros((n_q, c));
                let mut dk = Array2::<T>::zeros((n_k_full, c));
                let mut dv = Array2::<T>::zeros((n_k_full, c));
                for h in 0..heads {
                    let qh = head_block(&q2, h, d);
                    let kh = head_block(&kg.view(), h, d);
                    let vh = head_block(&vg.view(), h, d);
                    let gh = head_block(&g2, h, d);
                    let oh = head_block(&o2, h, d);
                    // rowwise dot of dO and O
                    let dsum: Array1<T> = gh
                        .outer_iter()
                        .zip(oh.outer_iter())
                        .map(|(a, b)| a.dot(&b))
                        .collect();
                    let mut dqh = Array2::<T>::zeros((n_q, d));
                    let mut start = 0;
                    while start < n_k {
                        let end = (start + tile).min(n_k);
                        let kt = kh.slice(ndarray::s![start..end, ..]);
                        let vt = vh.slice(ndarray::s![start..end, ..]);
                        // recompute tile probabilities from saved lse
                        let mut p = qh.dot(&kt.t());
                        for qi in 0..n_q {
                            let l = lse[[h, qi]];
                            let mut row = p.row_mut(qi);
                            row.mapv_inplace(|s| (s * scale - l).exp());
                        }
                        // dV_tile += Pᵀ·dO
                        let dvt = p.t().dot(&gh);
                        // dS = P ∘ (dO·Vᵀ − dsum) · scale
                        let mut ds = gh.dot(&vt.t());
                        for qi in 0..n_q {
                            let dsm = dsum[qi];
                            let mut row = ds.row_mut(qi);
                            for (x, pv) in row.iter_mut().zip(p.row(qi).iter()) {
                                *x = (*x - dsm) * *pv * scale;
                            }
                        }
                        dqh = dqh + ds.dot(&kt);
                        let dkt = ds.t().dot(&qh);
                        for (ti, gi) in (start..end).enumerate() {
                            let orig = key_idx[gi];
                            for di in 0..d {
                                dk[[orig, h * d + di]] =
                                    dk[[orig, h * d + di]] + dkt[[ti, di]];
                                dv[[orig, h * d + di]] =
                                    dv[[orig, h * d + di]] + dvt[[ti, di]];
                            }
                        }
                        start = end;
                    }
                    dq.slice_mut(ndarray::s![.., h * d..(h + 1) * d])
                        .assign(&dqh);
                }
                vec![
                    (q.id(), dq.into_dyn()),
                    (k.id(), dk.into_dyn()),
                    (v.id(), dv.into_dyn()),
                ]
            })),
        )
    }
}
