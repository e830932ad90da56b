use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::nn::{is_buffer, TensorMap};
use crate::{Error, Result};

pub const BETA1: f64 = 0.5;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: BETA1,
            beta2: BETA2,
            epsilon: EPSILON,
        }
    }
}

/// Adam moments for one network. Buffers never get moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: TensorMap<f32>,
    pub v: TensorMap<f32>,
}

impl Adam {
    pub fn new(hyper: AdamHyper) -> Self {
        Self {
            hyper,
            step: 0,
            m: TensorMap::new(),
            v: TensorMap::new(),
        }
    }

    /// Applies one bias-corrected update to every parameter in `grads`.
    pub fn update(
        &mut self,
        params: &mut TensorMap<f32>,
        grads: &TensorMap<f32>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let AdamHyper {
            beta1,
            beta2,
            epsilon,
        } = self.hyper;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        for (name, g) in grads {
            if is_buffer(name) {
                continue;
            }
            let p = params.get_mut(name).ok_or_else(|| {
                Error::Training(format!("gradient for unknown parameter `{name}`"))
            })?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    format!("gradient of `{name}`"),
                    p.shape(),
                    g.shape(),
                ));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g as f64;
                let mn = beta1 * *m as f64 + (1.0 - beta1) * g;
                let vn = beta2 * *v as f64 + (1.0 - beta2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let step = lr * (mn / c1) / ((vn / c2).sqrt() + epsilon);
                *p = (*p as f64 - step) as f32;
            });
        }
        Ok(())
    }
}
