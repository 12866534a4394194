//! Fixed 2-d sinusoidal position encodings for spatial token grids.

use ndarray::Array2;
use refseg_nn::Scalar;

const TEMPERATURE: f64 = 10000.0;

/// Sine/cosine embedding of a grid, `[h*w, c]`, row-major over (y, x).
/// Half the channels encode y, half encode x.
pub fn sine_2d<T: Scalar>(h: usize, w: usize, c: usize) -> Array2<T> {
    assert!(c % 4 == 0, "position encoding dim must be divisible by 4");
    let half = c / 2;
    let quarter = half / 2;
    let two_pi = std::f64::consts::TAU;
    let mut out = Array2::<T>::zeros((h * w, c));
    for i in 0..h {
        let ey = (i as f64 + 0.5) / h as f64 * two_pi;
        for j in 0..w {
            let ex = (j as f64 + 0.5) / w as f64 * two_pi;
            let row = i * w + j;
            for k in 0..quarter {
                let freq = TEMPERATURE.powf(2.0 * k as f64 / half as f64);
                out[[row, 2 * k]] = T::from_f64((ey / freq).sin());
                out[[row, 2 * k + 1]] = T::from_f64((ey / freq).cos());
                out[[row, half + 2 * k]] = T::from_f64((ex / freq).sin());
                out[[row, half + 2 * k + 1]] = T::from_f64((ex / freq).cos());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_positions_get_distinct_codes() {
        let pe = sine_2d::<f64>(4, 5, 16);
        assert_eq!(pe.shape(), &[20, 16]);
        for a in 0..20 {
            for b in (a + 1)..20 {
                let diff: f64 = (0..16).map(|k| (pe[[a, k]] - pe[[b, k]]).abs()).sum();
                assert!(diff > 1e-6, "positions {a} and {b} share a code");
            }
        }
    }

    #[test]
    fn values_bounded() {
        let pe = sine_2d::<f32>(8, 8, 64);
        assert!(pe.iter().all(|v| v.abs() <= 1.0 + 1e-6));
    }
}
