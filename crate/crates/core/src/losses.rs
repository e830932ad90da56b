//! Tversky index, Focal Tversky loss, and the binary cross-entropy terms of
//! the adversarial objective.
//!
//! Confusion sums are soft: `tp = Σ p·g`, `fn = Σ (1-p)·g`, `fp = Σ p·(1-g)`,
//! accumulated in `f64`. The smoothed index is
//! `TI = (tp + ε) / (tp + α·fn + β·fp + ε)` and the loss is `(1 - TI)^γ`.
//! Cross-entropy is always evaluated from logits.

use ndarray::{Array4, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::nn::{sigmoid_scalar, Real};
use crate::{Error, Result};

/// How Tversky statistics are pooled over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// One index over the flattened batch.
    #[default]
    Batch,
    /// One index per sample, losses averaged.
    PerSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TverskyParams {
    /// Weight on false negatives.
    pub alpha: f64,
    /// Weight on false positives.
    pub beta: f64,
    /// Focal exponent.
    pub gamma: f64,
    pub epsilon: f64,
    pub lambda_adv: f64,
    pub lambda_seg: f64,
    pub reduction: Reduction,
}

impl Default for TverskyParams {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 0.3,
            gamma: 0.75,
            epsilon: 1e-6,
            lambda_adv: 1.0,
            lambda_seg: 1.0,
            reduction: Reduction::Batch,
        }
    }
}

impl TverskyParams {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("loss params: {m}")));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return fail("alpha and beta must be >= 0");
        }
        if self.alpha + self.beta <= 0.0 {
            return fail("alpha + beta must be > 0");
        }
        if !(self.gamma > 0.0) {
            return fail("gamma must be > 0");
        }
        if !(self.epsilon > 0.0) {
            return fail("epsilon must be > 0");
        }
        if !(self.lambda_adv >= 0.0 && self.lambda_seg >= 0.0) {
            return fail("lambda_adv and lambda_seg must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ConfusionSums {
    pub tp: f64,
    pub fn_: f64,
    pub fp: f64,
}

impl ConfusionSums {
    pub fn from_slices<T: Real>(pred: &[T], truth: &[T]) -> Self {
        let mut s = Self::default();
        for (&p, &g) in pred.iter().zip(truth) {
            let (p, g) = (p.as_f64(), g.as_f64());
            s.tp += p * g;
            s.fn_ += (1.0 - p) * g;
            s.fp += p * (1.0 - g);
        }
        s
    }

    pub fn tversky_index(&self, params: &TverskyParams) -> f64 {
        let eps = params.epsilon;
        (self.tp + eps) / (self.tp + params.alpha * self.fn_ + params.beta * self.fp + eps)
    }

    pub fn focal_tversky_loss(&self, params: &TverskyParams) -> f64 {
        focal(self.tversky_index(params), params.gamma)
    }
}

fn focal(ti: f64, gamma: f64) -> f64 {
    (1.0 - ti).max(0.0).powf(gamma)
}

fn check_masks<T: Real>(pred: &ArrayView4<T>, truth: &ArrayView4<T>) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(
            "prediction vs truth",
            truth.shape(),
            pred.shape(),
        ));
    }
    if let Some(v) = pred.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(Error::Value(format!(
            "prediction value {v:?} outside [0,1]"
        )));
    }
    if let Some(v) = truth.iter().find(|v| **v != T::zero() && **v != T::one()) {
        return Err(Error::Value(format!("truth value {v:?} is not binary")));
    }
    Ok(())
}

fn samples<'a, T: Real>(x: &'a ArrayView4<'a, T>) -> impl Iterator<Item = Vec<T>> + 'a {
    x.axis_iter(Axis(0)).map(|s| s.iter().copied().collect())
}

fn pooled_sums<T: Real>(pred: &ArrayView4<T>, truth: &ArrayView4<T>) -> ConfusionSums {
    let p = pred.as_standard_layout();
    let g = truth.as_standard_layout();
    ConfusionSums::from_slices(
        p.as_slice().expect("standard"),
        g.as_slice().expect("standard"),
    )
}

/// Tversky index under `params.reduction` (per-sample indices are averaged).
pub fn tversky_index<T: Real>(
    pred: ArrayView4<T>,
    truth: ArrayView4<T>,
    params: &TverskyParams,
) -> Result<f64> {
    check_masks(&pred, &truth)?;
    Ok(match params.reduction {
        Reduction::Batch => pooled_sums(&pred, &truth).tversky_index(params),
        Reduction::PerSample => {
            let n = pred.dim().0 as f64;
            samples(&pred)
                .zip(samples(&truth))
                .map(|(p, g)| ConfusionSums::from_slices(&p, &g).tversky_index(params))
                .sum::<f64>()
                / n
        }
    })
}

pub fn focal_tversky_loss<T: Real>(
    pred: ArrayView4<T>,
    truth: ArrayView4<T>,
    params: &TverskyParams,
) -> Result<f64> {
    Ok(focal_tversky_with_grad(pred, truth, params)?.0)
}

/// `d TI / d p_i` for one pooled group, written into `out`.
fn tversky_grad(
    sums: &ConfusionSums,
    truth: &[f64],
    params: &TverskyParams,
    scale: f64,
    out: &mut [f64],
) {
    let eps = params.epsilon;
    let num = sums.tp + eps;
    let den = sums.tp + params.alpha * sums.fn_ + params.beta * sums.fp + eps;
    let ti = num / den;
    let tl = (1.0 - ti).max(0.0);
    // d FTL / d TI = -γ (1 - TI)^(γ-1); zero at TI = 1 by convention.
    let dftl_dti = if tl > 0.0 {
        -params.gamma * tl.powf(params.gamma - 1.0)
    } else {
        0.0
    };
    for (o, &g) in out.iter_mut().zip(truth) {
        let dden = g - params.alpha * g + params.beta * (1.0 - g);
        let dti = (g * den - num * dden) / (den * den);
        *o = scale * dftl_dti * dti;
    }
}

/// Focal Tversky loss and its gradient with respect to `pred`.
pub fn focal_tversky_with_grad<T: Real>(
    pred: ArrayView4<T>,
    truth: ArrayView4<T>,
    params: &TverskyParams,
) -> Result<(f64, Array4<T>)> {
    check_masks(&pred, &truth)?;
    let dim = pred.dim();
    let per = dim.1 * dim.2 * dim.3;
    let p = pred.as_standard_layout();
    let g = truth.as_standard_layout();
    let ps = p.as_slice().expect("standard");
    let gs: Vec<f64> = g.iter().map(|v| v.as_f64()).collect();
    let mut grad = vec![0.0f64; ps.len()];
    let loss = match params.reduction {
        Reduction::Batch => {
            let sums = ConfusionSums::from_slices(ps, g.as_slice().expect("standard"));
            tversky_grad(&sums, &gs, params, 1.0, &mut grad);
            sums.focal_tversky_loss(params)
        }
        Reduction::PerSample => {
            let n = dim.0 as f64;
            let mut total = 0.0;
            for i in 0..dim.0 {
                let r = i * per..(i + 1) * per;
                let sums = ConfusionSums::from_slices(
                    &ps[r.clone()],
                    &g.as_slice().expect("standard")[r.clone()],
                );
                tversky_grad(&sums, &gs[r.clone()], params, 1.0 / n, &mut grad[r]);
                total += sums.focal_tversky_loss(params);
            }
            total / n
        }
    };
    let grad = Array4::from_shape_vec(dim, grad.into_iter().map(T::from_f64_lossy).collect())
        .expect("same length");
    Ok((loss, grad))
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy of `sigmoid(logits)` against a constant label.
pub fn bce_with_logits<T: Real>(logits: ArrayView4<T>, target: f64) -> f64 {
    let n = logits.len().max(1) as f64;
    logits
        .iter()
        .map(|z| {
            let z = z.as_f64();
            target * softplus(-z) + (1.0 - target) * softplus(z)
        })
        .sum::<f64>()
        / n
}

/// [`bce_with_logits`] and its gradient with respect to the logits.
pub fn bce_with_logits_grad<T: Real>(logits: ArrayView4<T>, target: f64) -> (f64, Array4<T>) {
    let n = logits.len().max(1) as f64;
    let grad = logits.mapv(|z| T::from_f64_lossy((sigmoid_scalar(z.as_f64()) - target) / n));
    (bce_with_logits(logits, target), grad)
}

/// Logits whose logistic squash equals `probs`. Probabilities are clamped
/// away from 0 and 1 so saturated maps stay finite.
pub fn logits_from_probabilities<T: Real>(probs: ArrayView4<T>) -> Array4<T> {
    const CLAMP: f64 = 1e-15;
    probs.mapv(|p| {
        let p = p.as_f64().clamp(CLAMP, 1.0 - CLAMP);
        T::from_f64_lossy((p / (1.0 - p)).ln())
    })
}

/// `½·[BCE(real, 1) + BCE(fake, 0)]` over patch logits.
pub fn discriminator_loss<T: Real>(
    real_logits: ArrayView4<T>,
    fake_logits: ArrayView4<T>,
) -> Result<f64> {
    if real_logits.shape() != fake_logits.shape() {
        return Err(Error::shape(
            "discriminator real vs fake map",
            real_logits.shape(),
            fake_logits.shape(),
        ));
    }
    Ok(0.5 * (bce_with_logits(real_logits, 1.0) + bce_with_logits(fake_logits, 0.0)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorLoss {
    pub total: f64,
    pub adv: f64,
    pub seg: f64,
}

/// `λ_adv·BCE(fake, 1) + λ_seg·FTL(pred, truth)`, components reported
/// unweighted.
pub fn generator_loss<T: Real>(
    pred: ArrayView4<T>,
    truth: ArrayView4<T>,
    fake_logits: ArrayView4<T>,
    params: &TverskyParams,
) -> Result<GeneratorLoss> {
    let seg = focal_tversky_loss(pred, truth, params)?;
    let adv = bce_with_logits(fake_logits, 1.0);
    Ok(GeneratorLoss {
        total: params.lambda_adv * adv + params.lambda_seg * seg,
        adv,
        seg,
    })
}
