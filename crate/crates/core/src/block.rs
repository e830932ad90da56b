//! Convolution block shared by both networks:
//! `conv | conv-transpose -> leaky rectifier? -> batch norm? -> dropout?`.

use ndarray::{Array4, ArrayD, IxDyn};

use crate::nn::conv::{
    accumulate_into, conv2d_backward, conv2d_forward, conv_transpose2d_backward,
    conv_transpose2d_forward,
};
use crate::nn::norm::{batch_norm_backward, batch_norm_eval, batch_norm_train, BatchNormCache};
use crate::nn::{dropout_mask, leaky_relu, leaky_relu_backward, Initializer, Real, TensorMap};

pub const KERNEL: usize = 4;
pub const PADDING: usize = 1;

/// Forward-pass mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout off, normalization uses running statistics. Pure.
    Eval,
    /// Dropout masks drawn from `dropout_seed`, batch statistics, running
    /// statistics updated.
    Train { dropout_seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Sampling {
    Conv { stride: usize },
    Transpose,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvBlock {
    pub prefix: String,
    pub sampling: Sampling,
    pub in_channels: usize,
    pub out_channels: usize,
    pub leaky_slope: Option<f64>,
    pub norm: bool,
    pub dropout: Option<f64>,
}

pub(crate) struct BlockTape<T> {
    input: Array4<T>,
    activated: Option<Array4<T>>,
    norm: Option<BatchNormCache<T>>,
    mask: Option<Array4<T>>,
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ConvBlock {
    fn name(&self, suffix: &str) -> String {
        format!("{}.{}", self.prefix, suffix)
    }

    fn conv_name(&self) -> &'static str {
        match self.sampling {
            Sampling::Conv { .. } => "conv",
            Sampling::Transpose => "convt",
        }
    }

    pub fn weight_name(&self) -> String {
        self.name(&format!("{}.weight", self.conv_name()))
    }

    pub fn bias_name(&self) -> String {
        self.name(&format!("{}.bias", self.conv_name()))
    }

    fn weight_shape(&self) -> Vec<usize> {
        match self.sampling {
            Sampling::Conv { .. } => vec![self.out_channels, self.in_channels, KERNEL, KERNEL],
            Sampling::Transpose => vec![self.in_channels, self.out_channels, KERNEL, KERNEL],
        }
    }

    /// Expected `(name, shape)` of every tensor this block owns, in
    /// initialization order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            (self.weight_name(), self.weight_shape()),
            (self.bias_name(), vec![self.out_channels]),
        ];
        if self.norm {
            for s in ["gamma", "beta", "running_mean", "running_var"] {
                out.push((self.name(&format!("bn.{s}")), vec![self.out_channels]));
            }
        }
        out
    }

    pub fn init<T: Real>(&self, init: &mut Initializer, params: &mut TensorMap<T>) {
        let oc = [self.out_channels];
        params.insert(self.weight_name(), init.normal(&self.weight_shape()));
        params.insert(self.bias_name(), crate::nn::zeros(&oc));
        if self.norm {
            params.insert(self.name("bn.gamma"), crate::nn::ones(&oc));
            params.insert(self.name("bn.beta"), crate::nn::zeros(&oc));
            params.insert(self.name("bn.running_mean"), crate::nn::zeros(&oc));
            params.insert(self.name("bn.running_var"), crate::nn::ones(&oc));
        }
    }

    /// Runs the block. In training mode the returned stat updates must be
    /// written back into the parameter map by the caller.
    pub fn forward<T: Real>(
        &self,
        params: &TensorMap<T>,
        x: Array4<T>,
        mode: Mode,
        salt: u64,
        stat_updates: &mut Vec<(String, ArrayD<T>)>,
        keep_tape: bool,
    ) -> (Array4<T>, Option<BlockTape<T>>) {
        let w = params[&self.weight_name()].view();
        let b = params[&self.bias_name()].view();
        let z = match self.sampling {
            Sampling::Conv { stride } => conv2d_forward(x.view(), w, b, stride, PADDING),
            Sampling::Transpose => conv_transpose2d_forward(x.view(), w, b, 2, PADDING),
        };
        let activated = self.leaky_slope.map(|s| leaky_relu(&z, s));
        let mut h = activated.clone().unwrap_or(z);
        let mut norm_cache = None;
        if self.norm {
            let gamma = params[&self.name("bn.gamma")].view();
            let beta = params[&self.name("bn.beta")].view();
            let (mean_name, var_name) = (self.name("bn.running_mean"), self.name("bn.running_var"));
            match mode {
                Mode::Eval => {
                    h = batch_norm_eval(
                        h.view(),
                        gamma,
                        beta,
                        params[&mean_name].view(),
                        params[&var_name].view(),
                    );
                }
                Mode::Train { .. } => {
                    let mut rm = params[&mean_name].clone();
                    let mut rv = params[&var_name].clone();
                    let (y, cache) =
                        batch_norm_train(h.view(), gamma, beta, rm.view_mut(), rv.view_mut());
                    stat_updates.push((mean_name, rm));
                    stat_updates.push((var_name, rv));
                    h = y;
                    norm_cache = Some(cache);
                }
            }
        }
        let mut mask = None;
        if let (Some(rate), Mode::Train { dropout_seed }) = (self.dropout, mode) {
            if rate > 0.0 {
                let m = dropout_mask::<T>(h.dim(), rate, mix_seed(dropout_seed, salt));
                h = &h * &m;
                mask = Some(m);
            }
        }
        let tape = keep_tape.then(|| BlockTape {
            input: x,
            activated,
            norm: norm_cache,
            mask,
        });
        (h, tape)
    }

    /// Backpropagates `dy` through the block, adding parameter gradients to
    /// `grads`. Returns the input gradient when requested.
    pub fn backward<T: Real>(
        &self,
        params: &TensorMap<T>,
        tape: &BlockTape<T>,
        dy: Array4<T>,
        need_input_grad: bool,
        grads: &mut TensorMap<T>,
    ) -> Option<Array4<T>> {
        let mut g = dy;
        if let Some(mask) = &tape.mask {
            g = &g * mask;
        }
        if let Some(cache) = &tape.norm {
            let gamma = params[&self.name("bn.gamma")].view();
            let bn = batch_norm_backward(cache, gamma, g.view());
            add_flat(grads, &self.name("bn.gamma"), &bn.gamma);
            add_flat(grads, &self.name("bn.beta"), &bn.beta);
            g = bn.input;
        }
        if let (Some(slope), Some(act)) = (self.leaky_slope, &tape.activated) {
            g = leaky_relu_backward(act, &g, slope);
        }
        let w = params[&self.weight_name()].view();
        let cg = match self.sampling {
            Sampling::Conv { stride } => conv2d_backward(
                tape.input.view(),
                w,
                g.view(),
                stride,
                PADDING,
                need_input_grad,
            ),
            Sampling::Transpose => conv_transpose2d_backward(
                tape.input.view(),
                w,
                g.view(),
                2,
                PADDING,
                need_input_grad,
            ),
        };
        add_flat(grads, &self.weight_name(), &cg.weight);
        add_flat(grads, &self.bias_name(), &cg.bias);
        cg.input
    }
}

fn add_flat<T: Real>(grads: &mut TensorMap<T>, name: &str, flat: &[T]) {
    let entry = grads
        .entry(name.to_string())
        .or_insert_with(|| ArrayD::zeros(IxDyn(&[flat.len()])));
    let mut view = entry.view_mut();
    accumulate_into(&mut view, flat);
}

/// Checks a parameter map against the expected `(name, shape)` list: same
/// name set, same shapes.
pub(crate) fn check_parameters<T: Real>(
    network: &str,
    expected: &[(String, Vec<usize>)],
    params: &TensorMap<T>,
) -> crate::Result<()> {
    if expected.len() != params.len() {
        return Err(crate::Error::Config(format!(
            "{network}: expected {} parameter tensors, found {}",
            expected.len(),
            params.len()
        )));
    }
    for (name, shape) in expected {
        match params.get(name) {
            None => {
                return Err(crate::Error::Config(format!(
                    "{network}: missing parameter `{name}`"
                )))
            }
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(crate::Error::shape(
                    format!("{network} parameter `{name}`"),
                    shape,
                    t.shape(),
                ))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Reshape accumulated flat gradients to their parameter shapes.
pub(crate) fn shape_grads<T: Real>(grads: TensorMap<T>, params: &TensorMap<T>) -> TensorMap<T> {
    grads
        .into_iter()
        .map(|(k, v)| {
            let shape = params[&k].raw_dim();
            let v = v
                .into_shape_with_order(shape)
                .expect("gradient length matches parameter");
            (k, v)
        })
        .collect()
}
