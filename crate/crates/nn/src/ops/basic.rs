//! Elementwise and scalar operations.

use ndarray::ArrayD;

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

fn assert_same_shape<T: Scalar>(tape: &Tape<T>, a: Var, b: Var, op: &str) {
    let sa = tape.shape(a);
    let sb = tape.shape(b);
    assert_eq!(sa, sb, "{op}: shape mismatch {sa:?} vs {sb:?}");
}

impl<T: Scalar> Tape<T> {
    pub fn add(&self, a: Var, b: Var) -> Var {
        assert_same_shape(self, a, b, "add");
        let out = (&self.value(a) + &self.value(b)).into_shared();
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a.id(), g.clone()), (b.id(), g.clone())]
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        assert_same_shape(self, a, b, "sub");
        let out = (&self.value(a) - &self.value(b)).into_shared();
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a.id(), g.clone()), (b.id(), g.mapv(|x| -x))]
            })),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        assert_same_shape(self, a, b, "mul");
        let av = self.value(a);
        let bv = self.value(b);
        let out = (&av * &bv).into_shared();
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a.id(), g * &bv), (b.id(), g * &av)]
            })),
        )
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        assert_same_shape(self, a, b, "div");
        let av = self.value(a);
        let bv = self.value(b);
        let out = (&av / &bv).into_shared();
        self.push(
            out,
            Some(Box::new(move |g| {
                let da = g / &bv;
                let db = -(g * &av) / (&bv * &bv);
                vec![(a.id(), da), (b.id(), db)]
            })),
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| -x).into_shared();
        self.push(out, Some(Box::new(move |g| vec![(a.id(), g.mapv(|x| -x))])))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let out = self.value(a).mapv(|x| x * c).into_shared();
        self.push(
            out,
            Some(Box::new(move |g| vec![(a.id(), g.mapv(|x| x * c))])),
        )
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        let out = self.value(a).mapv(|x| x + c).into_shared();
        self.push(out, Some(Box::new(move |g| vec![(a.id(), g.clone())])))
    }

    pub fn relu(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.push(
            out.into_shared(),
            Some(Box::new(move |g| {
                let mut da = g.clone();
                da.zip_mut_with(&av, |d, &x| {
                    if x <= T::zero() {
                        *d = T::zero();
                    }
                });
                vec![(a.id(), da)]
            })),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let one = T::one();
        let y = self.value(a).mapv(|x| one / (one + (-x).exp()));
        let y = y.into_shared();
        let yc = y.clone();
        self.push(
            y,
            Some(Box::new(move |g| {
                let da = g * &yc.mapv(|p| p * (T::one() - p));
                vec![(a.id(), da)]
            })),
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        let y = self.value(a).mapv(|x| x.exp()).into_shared();
        let yc = y.clone();
        self.push(
            y,
            Some(Box::new(move |g| vec![(a.id(), (g * &yc))])),
        )
    }

    pub fn ln(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| x.ln()).into_shared();
        self.push(out, Some(Box::new(move |g| vec![(a.id(), g / &av)])))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let y = self.value(a).mapv(|x| x.sqrt()).into_shared();
        let yc = y.clone();
        let half = T::from_f64(0.5);
        self.push(
            y,
            Some(Box::new(move |g| {
                vec![(a.id(), g * &yc.mapv(|s| half / s))]
            })),
        )
    }

    /// `a^p` for a constant exponent, `a > 0`.
    pub fn powf_const(&self, a: Var, p: T) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| x.powf(p)).into_shared();
        self.push(
            out,
            Some(Box::new(move |g| {
                let da = g * &av.mapv(|x| p * x.powf(p - T::one()));
                vec![(a.id(), da)]
            })),
        )
    }

    /// Clamp into `[lo, hi]`; gradient passes through strictly inside the range.
    pub fn clamp(&self, a: Var, lo: T, hi: T) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| x.max(lo).min(hi)).into_shared();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut da = g.clone();
                da.zip_mut_with(&av, |d, &x| {
                    if x <= lo || x >= hi {
                        *d = T::zero();
                    }
                });
                vec![(a.id(), da)]
            })),
        )
    }

    pub fn abs(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| x.abs()).into_shared();
        self.push(
            out,
            Some(Box::new(move |g| {
                let da = g * &av.mapv(|x| {
                    if x > T::zero() {
                        T::one()
                    } else if x < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                });
                vec![(a.id(), da)]
            })),
        )
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&self, a: Var, b: Var) -> Var {
        assert_same_shape(self, a, b, "maximum");
        let av = self.value(a);
        let bv = self.value(b);
        let out = ndarray::Zip::from(&av)
            .and(&bv)
            .map_collect(|&x, &y| x.max(y))
            .into_shared();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut da = ArrayD::zeros(g.raw_dim());
                let mut db = ArrayD::zeros(g.raw_dim());
                ndarray::Zip::from(&mut da)
                    .and(&mut db)
                    .and(g)
                    .and(&av)
                    .and(&bv)
                    .for_each(|da, db, &g, &x, &y| {
                        if x >= y {
                            *da = g;
                        } else {
                            *db = g;
                        }
                    });
                vec![(a.id(), da), (b.id(), db)]
            })),
        )
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&self, a: Var, b: Var) -> Var {
        assert_same_shape(self, a, b, "minimum");
        let av = self.value(a);
        let bv = self.value(b);
        let out = ndarray::Zip::from(&av)
            .and(&bv)
            .map_collect(|&x, &y| x.min(y))
            .into_shared();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut da = ArrayD::zeros(g.raw_dim());
                let mut db = ArrayD::zeros(g.raw_dim());
                ndarray::Zip::from(&mut da)
                    .and(&mut db)
                    .and(g)
                    .and(&av)
                    .and(&bv)
                    .for_each(|da, db, &g, &x, &y| {
                        if x <= y {
                            *da = g;
                        } else {
                            *db = g;
                        }
                    });
                vec![(a.id(), da), (b.id(), db)]
            })),
        )
    }

    /// Binary cross-entropy from logits against a constant target, averaged
    /// over all elements. Numerically stable log-sum-exp form.
    pub fn bce_with_logits_mean(&self, logits: Var, target: &ArrayD<T>) -> Var {
        let xv = self.value(logits);
        assert_eq!(xv.shape(), target.shape(), "bce: shape mismatch");
        let n = T::from_usize(xv.len());
        let zero = T::zero();
        let mut total = T::zero();
        ndarray::Zip::from(&xv).and(target).for_each(|&x, &t| {
            total = total + x.max(zero) - x * t + (T::one() + (-x.abs()).exp()).ln();
        });
        let out = ArrayD::from_elem(ndarray::IxDyn(&[]), total / n).into_shared();
        let tgt = target.clone();
        self.push(
            out,
            Some(Box::new(move |g| {
                let gs = *g.iter().next().unwrap();
                let one = T::one();
                let da = ndarray::Zip::from(&xv)
                    .and(&tgt)
                    .map_collect(|&x, &t| gs * (one / (one + (-x).exp()) - t) / n);
                vec![(logits.id(), da)]
            })),
        )
    }
}
