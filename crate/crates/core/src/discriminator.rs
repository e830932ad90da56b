//! Patch discriminator: a stack of 4×4 convolutions over the channel-wise
//! concatenation of an image and a mask, ending in a one-channel map whose
//! units each score one receptive-field patch as real or fake.

use ndarray::{Array4, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::block::{
    check_parameters, shape_grads, BlockTape, ConvBlock, Mode, Sampling, KERNEL, PADDING,
};
use crate::nn::conv::conv_out_side;
use crate::nn::{cast_map, concat_channels, sigmoid, split_channels, Initializer, Real, TensorMap};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorSpec {
    pub image_channels: usize,
    pub mask_channels: usize,
    pub layer_filters: Vec<usize>,
    /// One stride per entry of `layer_filters`; the one-channel head always
    /// uses stride 1.
    pub strides: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            image_channels: 4,
            mask_channels: 1,
            layer_filters: vec![64, 128, 256, 512],
            strides: vec![2, 2, 2, 1],
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorSpec {
    pub fn input_channels(&self) -> usize {
        self.image_channels + self.mask_channels
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("discriminator spec: {m}")));
        if self.layer_filters.is_empty() {
            return fail("layer_filters must not be empty".into());
        }
        if self.layer_filters.len() != self.strides.len() {
            return fail(format!(
                "layer_filters ({}) and strides ({}) must have equal length",
                self.layer_filters.len(),
                self.strides.len()
            ));
        }
        if self.layer_filters.contains(&0) {
            return fail("layer_filters entries must be > 0".into());
        }
        if self.strides.contains(&0) {
            return fail("strides must be > 0".into());
        }
        if self.image_channels == 0 || self.mask_channels == 0 {
            return fail("image_channels and mask_channels must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return fail(format!(
                "leaky_slope must lie in [0,1), got {}",
                self.leaky_slope
            ));
        }
        Ok(())
    }

    fn blocks(&self) -> Vec<ConvBlock> {
        let mut blocks: Vec<ConvBlock> = self
            .layer_filters
            .iter()
            .zip(&self.strides)
            .enumerate()
            .map(|(i, (&f, &s))| ConvBlock {
                prefix: format!("layer{}", i + 1),
                sampling: Sampling::Conv { stride: s },
                in_channels: if i == 0 {
                    self.input_channels()
                } else {
                    self.layer_filters[i - 1]
                },
                out_channels: f,
                leaky_slope: Some(self.leaky_slope),
                norm: i > 0,
                dropout: None,
            })
            .collect();
        blocks.push(ConvBlock {
            prefix: "head".into(),
            sampling: Sampling::Conv { stride: 1 },
            in_channels: *self.layer_filters.last().expect("validated non-empty"),
            out_channels: 1,
            leaky_slope: None,
            norm: false,
            dropout: None,
        });
        blocks
    }

    /// All strides including the stride-1 head.
    fn all_strides(&self) -> Vec<usize> {
        self.strides
            .iter()
            .copied()
            .chain(std::iter::once(1))
            .collect()
    }

    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.blocks()
            .iter()
            .flat_map(|b| b.parameter_shapes())
            .collect()
    }

    pub fn input_layer_parameters(&self) -> Vec<String> {
        let b = &self.blocks()[0];
        vec![b.weight_name(), b.bias_name()]
    }

    /// Spatial side of the probability map for an input of side `side`, or
    /// `None` if some layer would see an input smaller than its kernel.
    pub fn output_side(&self, side: usize) -> Option<usize> {
        self.all_strides()
            .into_iter()
            .try_fold(side, |s, stride| conv_out_side(s, KERNEL, stride, PADDING))
    }
}

/// Side, in input pixels, of the square patch that one output unit sees.
pub fn receptive_field(spec: &DiscriminatorSpec) -> usize {
    let (mut rf, mut jump) = (1usize, 1usize);
    for stride in spec.all_strides() {
        rf += (KERNEL - 1) * jump;
        jump *= stride;
    }
    rf
}

pub struct DiscriminatorTape<T> {
    blocks: Vec<BlockTape<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T: Real = f32> {
    spec: DiscriminatorSpec,
    params: TensorMap<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(spec: DiscriminatorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut init = Initializer::new(seed);
        let mut params = TensorMap::new();
        for b in spec.blocks() {
            b.init(&mut init, &mut params);
        }
        Ok(Self { spec, params })
    }

    pub fn from_parameters(spec: DiscriminatorSpec, params: TensorMap<T>) -> Result<Self> {
        spec.validate()?;
        check_parameters("discriminator", &spec.parameter_shapes(), &params)?;
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn parameters(&self) -> &TensorMap<T> {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut TensorMap<T> {
        &mut self.params
    }

    pub fn into_parameters(self) -> TensorMap<T> {
        self.params
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator {
            spec: self.spec.clone(),
            params: cast_map(&self.params),
        }
    }

    fn check_inputs(&self, images: &ArrayView4<T>, masks: &ArrayView4<T>) -> Result<()> {
        let (n, c, h, w) = images.dim();
        let (mn, mc, mh, mw) = masks.dim();
        if c != self.spec.image_channels {
            return Err(Error::shape(
                "discriminator image channels",
                self.spec.image_channels,
                c,
            ));
        }
        if mc != self.spec.mask_channels {
            return Err(Error::shape(
                "discriminator mask channels",
                self.spec.mask_channels,
                mc,
            ));
        }
        if (mn, mh, mw) != (n, h, w) {
            return Err(Error::shape(
                "discriminator mask batch/spatial dims",
                (n, h, w),
                (mn, mh, mw),
            ));
        }
        if self.spec.output_side(h).is_none() || self.spec.output_side(w).is_none() {
            return Err(Error::shape(
                "discriminator input spatial dims",
                "large enough for every layer",
                (h, w),
            ));
        }
        Ok(())
    }

    /// Pre-activation scores, inference mode.
    pub fn forward_logits(&self, images: ArrayView4<T>, masks: ArrayView4<T>) -> Result<Array4<T>> {
        self.check_inputs(&images, &masks)?;
        let x = concat_channels(images, masks);
        Ok(self.run(x, Mode::Eval, &mut Vec::new(), false).0)
    }

    /// Patch probabilities, inference mode.
    pub fn forward(&self, images: ArrayView4<T>, masks: ArrayView4<T>) -> Result<Array4<T>> {
        Ok(sigmoid(&self.forward_logits(images, masks)?))
    }

    /// Training-mode pass returning logits; running statistics are updated.
    pub fn forward_train(
        &mut self,
        images: ArrayView4<T>,
        masks: ArrayView4<T>,
    ) -> Result<(Array4<T>, DiscriminatorTape<T>)> {
        self.check_inputs(&images, &masks)?;
        let x = concat_channels(images, masks);
        let mut updates = Vec::new();
        let (logits, tape) = self.run(x, Mode::Train { dropout_seed: 0 }, &mut updates, true);
        for (name, value) in updates {
            self.params.insert(name, value);
        }
        Ok((logits, tape.expect("tape requested")))
    }

    /// Training-mode pass (batch statistics) that leaves the network
    /// untouched; used when the discriminator only scores generator output.
    pub fn forward_train_frozen(
        &self,
        images: ArrayView4<T>,
        masks: ArrayView4<T>,
    ) -> Result<(Array4<T>, DiscriminatorTape<T>)> {
        self.check_inputs(&images, &masks)?;
        let x = concat_channels(images, masks);
        let (logits, tape) = self.run(x, Mode::Train { dropout_seed: 0 }, &mut Vec::new(), true);
        Ok((logits, tape.expect("tape requested")))
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        x: Array4<T>,
        mode: Mode,
        updates: &mut Vec<(String, ndarray::ArrayD<T>)>,
        keep_tape: bool,
    ) -> (Array4<T>, Option<DiscriminatorTape<T>>) {
        let mut h = x;
        let mut tapes = Vec::new();
        for (i, b) in self.spec.blocks().iter().enumerate() {
            let (out, tape) = b.forward(&self.params, h, mode, i as u64, updates, keep_tape);
            tapes.extend(tape);
            h = out;
        }
        (h, keep_tape.then_some(DiscriminatorTape { blocks: tapes }))
    }

    /// Backpropagates `d loss / d logits`. Returns parameter gradients and,
    /// if requested, the gradient with respect to the mask input.
    pub fn backward(
        &self,
        tape: &DiscriminatorTape<T>,
        grad_logits: &Array4<T>,
        need_mask_grad: bool,
    ) -> (TensorMap<T>, Option<Array4<T>>) {
        let blocks = self.spec.blocks();
        let mut grads = TensorMap::new();
        let mut g = grad_logits.clone();
        let mut input_grad = None;
        for i in (0..blocks.len()).rev() {
            let need = i > 0 || need_mask_grad;
            let dx = blocks[i].backward(&self.params, &tape.blocks[i], g.clone(), need, &mut grads);
            match dx {
                Some(dx) if i > 0 => g = dx,
                dx => input_grad = dx,
            }
        }
        let mask_grad = input_grad.map(|dx| split_channels(&dx, self.spec.image_channels).1);
        (shape_grads(grads, &self.params), mask_grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_spec(image_channels: usize) -> DiscriminatorSpec {
        DiscriminatorSpec {
            image_channels,
            layer_filters: vec![4, 8, 8],
            strides: vec![2, 2, 1],
            ..Default::default()
        }
    }

    fn random<T: Real>(shape: (usize, usize, usize, usize), seed: u64) -> Array4<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || T::from_f64_lossy(rng.random::<f64>()))
    }

    /// Independent receptive-field oracle: propagate the index interval of
    /// a single output unit back through each layer.
    fn interval_receptive_field(spec: &DiscriminatorSpec) -> usize {
        let (mut lo, mut hi) = (0i64, 0i64);
        for &s in spec.all_strides().iter().rev() {
            lo = lo * s as i64 - PADDING as i64;
            hi = hi * s as i64 - PADDING as i64 + KERNEL as i64 - 1;
        }
        (hi - lo + 1) as usize
    }

    #[test]
    fn default_geometry_is_30_by_30_with_70_pixel_patches() {
        let spec = DiscriminatorSpec::default();
        assert_eq!(spec.output_side(256), Some(30));
        assert_eq!(receptive_field(&spec), 70);
        assert_eq!(interval_receptive_field(&spec), 70);
    }

    #[test]
    fn receptive_field_recurrence_small_cases() {
        let one = DiscriminatorSpec {
            layer_filters: vec![],
            strides: vec![],
            ..Default::default()
        };
        assert_eq!(receptive_field(&one), 4);
        for strides in [vec![2, 2], vec![2, 1], vec![1, 1, 1], vec![2, 2, 2, 2, 1]] {
            let spec = DiscriminatorSpec {
                layer_filters: vec![8; strides.len()],
                strides,
                ..Default::default()
            };
            assert_eq!(receptive_field(&spec), interval_receptive_field(&spec));
        }
        let s21 = DiscriminatorSpec {
            layer_filters: vec![8, 8],
            strides: vec![2, 1],
            ..Default::default()
        };
        assert_eq!(receptive_field(&s21), 16);
        let s22 = DiscriminatorSpec {
            layer_filters: vec![8, 8],
            strides: vec![2, 2],
            ..Default::default()
        };
        assert_eq!(receptive_field(&s22), 22);
    }

    #[test]
    fn output_side_follows_s_over_8_minus_2() {
        let spec = DiscriminatorSpec::default();
        for side in [64, 128, 256, 512] {
            assert_eq!(spec.output_side(side), Some(side / 8 - 2));
        }
    }

    #[test]
    fn forward_shapes_and_range() {
        let d = Discriminator::<f32>::new(small_spec(3), 0).unwrap();
        let y = d
            .forward(
                random::<f32>((2, 3, 32, 32), 1).view(),
                random::<f32>((2, 1, 32, 32), 2).view(),
            )
            .unwrap();
        assert_eq!(
            y.dim(),
            (
                2,
                1,
                d.spec().output_side(32).unwrap(),
                d.spec().output_side(32).unwrap()
            )
        );
        assert!(y.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn mismatched_inputs_are_shape_errors() {
        let d = Discriminator::<f32>::new(small_spec(3), 0).unwrap();
        let imgs = Array4::<f32>::zeros((2, 3, 32, 32));
        for masks in [
            Array4::zeros((2, 1, 16, 16)),
            Array4::zeros((1, 1, 32, 32)),
            Array4::zeros((2, 2, 32, 32)),
        ] {
            assert!(matches!(
                d.forward(imgs.view(), masks.view()),
                Err(Error::Shape { .. })
            ));
        }
        let wrong = Array4::<f32>::zeros((2, 4, 32, 32));
        assert!(matches!(
            d.forward(wrong.view(), Array4::zeros((2, 1, 32, 32)).view()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn builds_are_deterministic() {
        let a = Discriminator::<f32>::new(DiscriminatorSpec::default(), 5).unwrap();
        let b = Discriminator::<f32>::new(DiscriminatorSpec::default(), 5).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        assert_eq!(a.parameters()["layer1.conv.weight"].shape(), &[64, 5, 4, 4]);
        assert!(!a.parameters().contains_key("layer1.bn.gamma"));
        assert_eq!(a.parameters()["head.conv.weight"].shape(), &[1, 512, 4, 4]);
    }

    #[test]
    fn perturbing_one_pixel_only_moves_covering_units() {
        let spec = DiscriminatorSpec {
            image_channels: 1,
            layer_filters: vec![4, 4, 4],
            strides: vec![2, 2, 1],
            ..Default::default()
        };
        let rf = receptive_field(&spec) as i64;
        let d = Discriminator::<f64>::new(spec.clone(), 3).unwrap();
        let img = random::<f64>((1, 1, 48, 48), 4);
        let mask = random::<f64>((1, 1, 48, 48), 5);
        let base = d.forward_logits(img.view(), mask.view()).unwrap();
        let (py, px) = (30usize, 17usize);
        let mut bumped = img.clone();
        bumped[[0, 0, py, px]] += 1.0;
        let moved = d.forward_logits(bumped.view(), mask.view()).unwrap();
        // Unit (oy, ox) covers rows [oy*jump - off, oy*jump - off + rf).
        let (mut jump, mut off) = (1i64, 0i64);
        for s in spec.all_strides() {
            off += PADDING as i64 * jump;
            jump *= s as i64;
        }
        let (_, _, oh, ow) = base.dim();
        let mut changed = 0;
        for oy in 0..oh {
            for ox in 0..ow {
                let y0 = oy as i64 * jump - off;
                let x0 = ox as i64 * jump - off;
                let covers =
                    (y0..y0 + rf).contains(&(py as i64)) && (x0..x0 + rf).contains(&(px as i64));
                let delta = (moved[[0, 0, oy, ox]] - base[[0, 0, oy, ox]]).abs();
                if !covers {
                    assert_eq!(delta, 0.0, "unit ({oy},{ox}) outside the patch moved");
                } else if delta > 0.0 {
                    changed += 1;
                }
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn mask_and_parameter_gradients_match_finite_differences() {
        let spec = small_spec(2);
        let d = Discriminator::<f64>::new(spec, 8).unwrap();
        let img = random::<f64>((2, 2, 16, 16), 1);
        let mask = random::<f64>((2, 1, 16, 16), 2);
        let (logits, tape) = d.forward_train_frozen(img.view(), mask.view()).unwrap();
        let r = random::<f64>(logits.dim(), 3);
        let (grads, mask_grad) = d.backward(&tape, &r, true);
        let mask_grad = mask_grad.unwrap();
        let loss = |d: &Discriminator<f64>, m: &Array4<f64>| {
            (&d.forward_train_frozen(img.view(), m.view()).unwrap().0 * &r).sum()
        };
        let h = 1e-5;
        for idx in [0usize, 37, 300, 511] {
            let mut mp = mask.clone();
            let mut mm = mask.clone();
            mp.as_slice_mut().unwrap()[idx] += h;
            mm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&d, &mp) - loss(&d, &mm)) / (2.0 * h);
            let an = mask_grad.as_slice().unwrap()[idx];
            assert!(
                (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-6),
                "mask[{idx}] {fd} vs {an}"
            );
        }
        for name in [
            "layer1.conv.weight",
            "layer2.bn.gamma",
            "head.conv.bias",
            "layer3.conv.weight",
        ] {
            let mut dp = d.clone();
            dp.parameters_mut()
                .get_mut(name)
                .unwrap()
                .as_slice_mut()
                .unwrap()[0] += h;
            let mut dm = d.clone();
            dm.parameters_mut()
                .get_mut(name)
                .unwrap()
                .as_slice_mut()
                .unwrap()[0] -= h;
            let fd = (loss(&dp, &mask) - loss(&dm, &mask)) / (2.0 * h);
            let an = grads[name].as_slice().unwrap()[0];
            assert!(
                (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-6),
                "{name} {fd} vs {an}"
            );
        }
    }
}
