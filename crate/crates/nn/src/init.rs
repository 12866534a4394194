//! Weight initializers. All draw from a caller-supplied RNG so model
//! construction is fully determined by the seed.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

/// Uniform(-bound, bound).
fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> ArrayD<T> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        T::from_f64(rng.gen_range(-bound..bound))
    })
}

/// Kaiming-uniform for layers followed by ReLU; `fan_in` = receptive size.
pub fn kaiming_uniform<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
) -> ArrayD<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    uniform(rng, shape, bound)
}

/// Xavier-uniform for linear projections.
pub fn xavier_uniform<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> ArrayD<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, shape, bound)
}

/// N(0, std) via Box-Muller, used for embeddings.
pub fn normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<T> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        T::from_f64(z * std)
    })
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), T::one())
}
