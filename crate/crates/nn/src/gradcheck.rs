//! Central finite-difference gradient checking against analytic gradients.

use ndarray::ArrayD;

use crate::params::{ParamId, ParamStore};

/// Relative error with an absolute floor for near-zero pairs.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-8);
    (a - b).abs() / denom
}

/// One checked coordinate: analytic vs central-difference derivative.
#[derive(Debug, Clone)]
pub struct CheckedCoord {
    pub param: String,
    pub flat_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Compare analytic gradients to central finite differences for the given
/// `(param, flat_index)` coordinates. `loss_fn` must be a pure function of
/// the store contents (fix any stochastic choices before calling).
pub fn check_coords(
    store: &mut ParamStore<f64>,
    coords: &[(ParamId, usize)],
    analytic: &[(ParamId, ArrayD<f64>)],
    h: f64,
    mut loss_fn: impl FnMut(&ParamStore<f64>) -> f64,
) -> Vec<CheckedCoord> {
    let mut out = Vec::with_capacity(coords.len());
    for &(pid, idx) in coords {
        let orig = store.value(pid).as_slice().unwrap()[idx];

        store.value_mut(pid).as_slice_mut().unwrap()[idx] = orig + h;
        let plus = loss_fn(store);
        store.value_mut(pid).as_slice_mut().unwrap()[idx] = orig - h;
        let minus = loss_fn(store);
        store.value_mut(pid).as_slice_mut().unwrap()[idx] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        let ana = analytic
            .iter()
            .find(|(id, _)| *id == pid)
            .map(|(_, g)| g.as_slice().unwrap()[idx])
            .unwrap_or(0.0);
        out.push(CheckedCoord {
            param: store.name(pid).to_string(),
            flat_index: idx,
            analytic: ana,
            numeric,
            rel_err: rel_err(ana, numeric),
        });
    }
    out
}
