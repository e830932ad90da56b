//! Minimal layer kernels (forward + hand-derived backward) used by the
//! generator and discriminator.

pub mod conv;
pub mod norm;
pub mod real;

use std::collections::BTreeMap;

use ndarray::{Array4, ArrayD, ArrayView4, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use real::Real;

/// Named parameter tensors. Ordered so iteration (and therefore
/// serialization) is stable.
pub type TensorMap<T> = BTreeMap<String, ArrayD<T>>;

/// Standard deviation of the zero-mean normal used for kernel initialization.
pub const INIT_STD: f64 = 0.02;

/// Normalization running statistics are persisted alongside the weights but
/// never receive gradients.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Seeded parameter factory. Values are drawn in `f64` and cast, so an
/// `f32` and an `f64` build from the same seed agree up to rounding.
pub(crate) struct Initializer {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Initializer {
    pub(crate) fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        }
    }

    pub(crate) fn normal<T: Real>(&mut self, shape: &[usize]) -> ArrayD<T> {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| T::from_f64_lossy(self.normal.sample(&mut self.rng)))
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length")
    }
}

pub(crate) fn zeros<T: Real>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

pub(crate) fn ones<T: Real>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::ones(IxDyn(shape))
}

pub fn leaky_relu<T: Real>(x: &Array4<T>, slope: f64) -> Array4<T> {
    let s = T::from_f64_lossy(slope);
    x.mapv(|v| if v > T::zero() { v } else { v * s })
}

/// Backward of [`leaky_relu`] expressed through its output: for a
/// non-negative slope, `y > 0` exactly when `x > 0`.
pub fn leaky_relu_backward<T: Real>(y: &Array4<T>, dy: &Array4<T>, slope: f64) -> Array4<T> {
    let s = T::from_f64_lossy(slope);
    let mut out = dy.clone();
    ndarray::Zip::from(&mut out).and(y).for_each(|g, &v| {
        if v <= T::zero() {
            *g *= s;
        }
    });
    out
}

pub fn sigmoid<T: Real>(x: &Array4<T>) -> Array4<T> {
    x.mapv(sigmoid_scalar)
}

pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Inverted-dropout multiplier: each unit is kept with probability
/// `1 - rate` and scaled by `1 / (1 - rate)`.
pub fn dropout_mask<T: Real>(
    shape: (usize, usize, usize, usize),
    rate: f64,
    seed: u64,
) -> Array4<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 - rate;
    let scale = T::from_f64_lossy(if keep > 0.0 { 1.0 / keep } else { 0.0 });
    Array4::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < keep {
            scale
        } else {
            T::zero()
        }
    })
}

/// Concatenate two NCHW batches along the channel axis.
pub fn concat_channels<T: Real>(a: ArrayView4<T>, b: ArrayView4<T>) -> Array4<T> {
    ndarray::concatenate(ndarray::Axis(1), &[a, b]).expect("matching batch and spatial dims")
}

/// Split a channel-concatenated gradient back into its two parts.
pub fn split_channels<T: Real>(x: &Array4<T>, first: usize) -> (Array4<T>, Array4<T>) {
    let a = x.slice(ndarray::s![.., ..first, .., ..]).to_owned();
    let b = x.slice(ndarray::s![.., first.., .., ..]).to_owned();
    (a, b)
}

/// Convert every tensor of a map to another float type.
pub fn cast_map<A: Real, B: Real>(map: &TensorMap<A>) -> TensorMap<B> {
    map.iter()
        .map(|(k, v)| (k.clone(), v.mapv(|x| B::from_f64_lossy(x.as_f64()))))
        .collect()
}
