use ndarray::{Array4, ArrayView4, ArrayViewD, ArrayViewMutD};

use super::real::Real;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Values kept from a training-mode batch-norm forward for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    normalized: Array4<T>,
    inv_std: Vec<T>,
}

fn per_channel<T: Real>(x: &ArrayView4<T>) -> (usize, usize, usize) {
    let (n, c, h, w) = x.dim();
    (n, c, h * w)
}

/// Batch normalization with batch statistics; updates running statistics
/// in place (unbiased variance, momentum [`BN_MOMENTUM`]).
pub fn batch_norm_train<T: Real>(
    x: ArrayView4<T>,
    gamma: ArrayViewD<T>,
    beta: ArrayViewD<T>,
    mut running_mean: ArrayViewMutD<T>,
    mut running_var: ArrayViewMutD<T>,
) -> (Array4<T>, BatchNormCache<T>) {
    let (n, c, plane) = per_channel(&x);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let count = n * plane;
    let count_t = T::from_usize(count).expect("count");
    let eps = T::from_f64_lossy(BN_EPS);
    let momentum = T::from_f64_lossy(BN_MOMENTUM);

    let mut normalized = Array4::<T>::zeros(x.dim());
    let mut out = Array4::<T>::zeros(x.dim());
    let mut inv_std = Vec::with_capacity(c);
    {
        let ns = normalized.as_slice_mut().expect("fresh array");
        let os = out.as_slice_mut().expect("fresh array");
        for ch in 0..c {
            let block = |i: usize| (i * c + ch) * plane..(i * c + ch + 1) * plane;
            let mut sum = T::zero();
            for i in 0..n {
                sum += xs[block(i)].iter().copied().sum::<T>();
            }
            let mean = sum / count_t;
            let mut sq = T::zero();
            for i in 0..n {
                sq += xs[block(i)]
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<T>();
            }
            let var = sq / count_t;
            let istd = T::one() / (var + eps).sqrt();
            inv_std.push(istd);
            let (g, b) = (gamma[ch], beta[ch]);
            for i in 0..n {
                let r = block(i);
                for ((nv, ov), &xv) in ns[r.clone()].iter_mut().zip(&mut os[r.clone()]).zip(&xs[r])
                {
                    *nv = (xv - mean) * istd;
                    *ov = g * *nv + b;
                }
            }
            let unbiased = if count > 1 {
                sq / T::from_usize(count - 1).expect("count")
            } else {
                var
            };
            running_mean[ch] = (T::one() - momentum) * running_mean[ch] + momentum * mean;
            running_var[ch] = (T::one() - momentum) * running_var[ch] + momentum * unbiased;
        }
    }
    (
        out,
        BatchNormCache {
            normalized,
            inv_std,
        },
    )
}

/// Batch normalization with frozen running statistics.
pub fn batch_norm_eval<T: Real>(
    x: ArrayView4<T>,
    gamma: ArrayViewD<T>,
    beta: ArrayViewD<T>,
    running_mean: ArrayViewD<T>,
    running_var: ArrayViewD<T>,
) -> Array4<T> {
    let (_, c, _) = per_channel(&x);
    let eps = T::from_f64_lossy(BN_EPS);
    let mut out = x.to_owned();
    for ch in 0..c {
        let scale = gamma[ch] / (running_var[ch] + eps).sqrt();
        let shift = beta[ch] - running_mean[ch] * scale;
        out.slice_mut(ndarray::s![.., ch, .., ..])
            .mapv_inplace(|v| v * scale + shift);
    }
    out
}

pub struct BatchNormGrads<T> {
    pub input: Array4<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn batch_norm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: ArrayViewD<T>,
    dy: ArrayView4<T>,
) -> BatchNormGrads<T> {
    let (n, c, plane) = per_channel(&dy);
    let dy = dy.as_standard_layout();
    let dys = dy.as_slice().expect("standard layout");
    let xh = cache.normalized.as_slice().expect("standard layout");
    let count_t = T::from_usize(n * plane).expect("count");
    let mut dx = Array4::<T>::zeros(dy.dim());
    let dxs = dx.as_slice_mut().expect("fresh array");
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let block = |i: usize| (i * c + ch) * plane..(i * c + ch + 1) * plane;
        let (mut sum_dy, mut sum_dy_xh) = (T::zero(), T::zero());
        for i in 0..n {
            for (&g, &h) in dys[block(i)].iter().zip(&xh[block(i)]) {
                sum_dy += g;
                sum_dy_xh += g * h;
            }
        }
        dgamma[ch] = sum_dy_xh;
        dbeta[ch] = sum_dy;
        let k = gamma[ch] * cache.inv_std[ch] / count_t;
        for i in 0..n {
            let r = block(i);
            for ((d, &g), &h) in dxs[r.clone()].iter_mut().zip(&dys[r.clone()]).zip(&xh[r]) {
                *d = k * (count_t * g - sum_dy - h * sum_dy_xh);
            }
        }
    }
    BatchNormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, ArrayD};

    fn sample() -> Array4<f64> {
        Array4::from_shape_fn((3, 2, 2, 3), |(a, b, c, d)| {
            ((a * 31 + b * 17 + c * 7 + d) as f64 * 0.37).sin() * (1.0 + b as f64)
        })
    }

    #[test]
    fn train_mode_output_has_zero_mean_unit_variance_per_channel() {
        let x = sample();
        let gamma = Array1::from(vec![1.0, 1.0]).into_dyn();
        let beta = Array1::from(vec![0.0, 0.0]).into_dyn();
        let mut rm = ArrayD::zeros(ndarray::IxDyn(&[2]));
        let mut rv = ArrayD::ones(ndarray::IxDyn(&[2]));
        let (y, _) = batch_norm_train(
            x.view(),
            gamma.view(),
            beta.view(),
            rm.view_mut(),
            rv.view_mut(),
        );
        for ch in 0..2 {
            let s = y.slice(ndarray::s![.., ch, .., ..]);
            let m = s.mean().unwrap();
            let v = s.mapv(|a| (a - m) * (a - m)).mean().unwrap();
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
        assert!(rm.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = sample();
        let gamma = Array1::from(vec![1.3, 0.7]).into_dyn();
        let beta = Array1::from(vec![0.2, -0.4]).into_dyn();
        let r = Array4::from_shape_fn(x.dim(), |(a, b, c, d)| {
            ((a + 2 * b + 3 * c + 5 * d) as f64).cos()
        });
        let loss = |x: &Array4<f64>, g: &ArrayD<f64>| {
            let mut rm = ArrayD::zeros(ndarray::IxDyn(&[2]));
            let mut rv = ArrayD::ones(ndarray::IxDyn(&[2]));
            let (y, _) = batch_norm_train(
                x.view(),
                g.view(),
                beta.view(),
                rm.view_mut(),
                rv.view_mut(),
            );
            (&y * &r).sum()
        };
        let mut rm = ArrayD::zeros(ndarray::IxDyn(&[2]));
        let mut rv = ArrayD::ones(ndarray::IxDyn(&[2]));
        let (_, cache) = batch_norm_train(
            x.view(),
            gamma.view(),
            beta.view(),
            rm.view_mut(),
            rv.view_mut(),
        );
        let grads = batch_norm_backward(&cache, gamma.view(), r.view());
        let h = 1e-6;
        for idx in [0usize, 4, 11, 20, 35] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&xp, &gamma) - loss(&xm, &gamma)) / (2.0 * h);
            let an = grads.input.as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-6, "{fd} vs {an}");
        }
        for ch in 0..2 {
            let mut gp = gamma.clone();
            let mut gm = gamma.clone();
            gp[ch] += h;
            gm[ch] -= h;
            let fd = (loss(&x, &gp) - loss(&x, &gm)) / (2.0 * h);
            assert!((fd - grads.gamma[ch]).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let x = sample();
        let gamma = Array1::from(vec![2.0, 1.0]).into_dyn();
        let beta = Array1::from(vec![1.0, 0.0]).into_dyn();
        let rm = Array1::from(vec![0.5, 0.0]).into_dyn();
        let rv = Array1::from(vec![4.0 - BN_EPS, 1.0 - BN_EPS]).into_dyn();
        let y = batch_norm_eval(x.view(), gamma.view(), beta.view(), rm.view(), rv.view());
        let (a, e) = (y[[1, 0, 1, 2]], 2.0 * (x[[1, 0, 1, 2]] - 0.5) / 2.0 + 1.0);
        assert!((a - e).abs() < 1e-12);
        assert!((y[[2, 1, 0, 1]] - x[[2, 1, 0, 1]]).abs() < 1e-12);
    }
}
