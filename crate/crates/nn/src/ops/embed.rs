//! Embedding lookup.

use ndarray::{Array2, Ix2};

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

impl<T: Scalar> Tape<T> {
    /// Row lookup into `table: [vocab, c]` -> `[ids.len(), c]`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let t2 = tv.view().into_dimensionality::<Ix2>().unwrap();
        let (vocab, c) = (t2.nrows(), t2.ncols());
        for &i in ids {
            assert!(i < vocab, "embedding: id {i} out of vocab {vocab}");
        }
        let mut out = Array2::<T>::zeros((ids.len(), c));
        for (mut row, &i) in out.outer_iter_mut().zip(ids.iter()) {
            row.assign(&t2.row(i));
        }
        let ids_c = ids.to_vec();
        self.push(
            out.into_dyn().into_shared(),
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dt = Array2::<T>::zeros((vocab, c));
                for (grow, &i) in g2.outer_iter().zip(ids_c.iter()) {
                    let mut trow = dt.row_mut(i);
                    trow += &grow;
                }
                vec![(table.id(), dt.into_dyn())]
            })),
        )
    }
}
