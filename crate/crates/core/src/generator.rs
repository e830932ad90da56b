//! U-Net generator: `depth` strided-convolution encoder blocks, `depth`
//! transposed-convolution decoder blocks with skip concatenation, and a
//! logistic output head producing a single-channel soft mask.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array4, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::block::{check_parameters, shape_grads, BlockTape, ConvBlock, Mode, Sampling};
use crate::nn::{cast_map, concat_channels, sigmoid, split_channels, Initializer, Real, TensorMap};
use crate::{Error, Result};

/// A block of the U-Net, 1-based: `enc1` is the input block, `dec1` the
/// first decoder block after the bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockRef {
    Encoder(usize),
    Decoder(usize),
}

impl fmt::Display for BlockRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockRef::Encoder(i) => write!(f, "enc{i}"),
            BlockRef::Decoder(i) => write!(f, "dec{i}"),
        }
    }
}

impl FromStr for BlockRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| Error::Config(format!("invalid block reference `{s}`")))
        };
        if let Some(rest) = s.strip_prefix("enc") {
            Ok(BlockRef::Encoder(parse(rest)?))
        } else if let Some(rest) = s.strip_prefix("dec") {
            Ok(BlockRef::Decoder(parse(rest)?))
        } else {
            Err(Error::Config(format!(
                "invalid block reference `{s}` (expected encN or decN)"
            )))
        }
    }
}

impl Serialize for BlockRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BlockRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub encoder_filters: Vec<usize>,
    pub dropout_rate: f64,
    /// `None` selects the bottleneck-adjacent default, see
    /// [`GeneratorSpec::effective_dropout_blocks`].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout_blocks: Option<Vec<BlockRef>>,
    pub leaky_slope: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            in_channels: 4,
            out_channels: 1,
            depth: 6,
            encoder_filters: vec![64, 128, 256, 512, 512, 512],
            dropout_rate: 0.5,
            dropout_blocks: None,
            leaky_slope: 0.2,
        }
    }
}

impl GeneratorSpec {
    /// Blocks receiving dropout. Defaults to the three innermost encoder
    /// blocks and the first three decoder blocks (never `enc1` or the output
    /// block).
    pub fn effective_dropout_blocks(&self) -> Vec<BlockRef> {
        if let Some(blocks) = &self.dropout_blocks {
            return blocks.clone();
        }
        let d = self.depth;
        let first_enc = d.saturating_sub(2).max(2);
        let mut out: Vec<_> = (first_enc..=d).map(BlockRef::Encoder).collect();
        out.extend((1..=3.min(d.saturating_sub(1))).map(BlockRef::Decoder));
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("generator spec: {m}")));
        if self.depth < 2 {
            return fail(format!("depth must be >= 2, got {}", self.depth));
        }
        if self.encoder_filters.len() != self.depth {
            return fail(format!(
                "encoder_filters must have exactly depth={} entries, got {}",
                self.depth,
                self.encoder_filters.len()
            ));
        }
        if self.encoder_filters.contains(&0) {
            return fail("encoder_filters entries must be > 0".into());
        }
        if self.in_channels == 0 {
            return fail("in_channels must be > 0".into());
        }
        if self.out_channels != 1 {
            return fail(format!("out_channels must be 1, got {}", self.out_channels));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!(
                "dropout_rate must lie in [0,1), got {}",
                self.dropout_rate
            ));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return fail(format!(
                "leaky_slope must lie in [0,1), got {}",
                self.leaky_slope
            ));
        }
        for b in self.effective_dropout_blocks() {
            let ok = match b {
                BlockRef::Encoder(i) | BlockRef::Decoder(i) => (1..=self.depth).contains(&i),
            };
            if !ok {
                return fail(format!(
                    "dropout block `{b}` is not a valid block index for depth {}",
                    self.depth
                ));
            }
        }
        Ok(())
    }

    /// Input sides must be multiples of this.
    pub fn side_multiple(&self) -> usize {
        1 << self.depth
    }

    fn encoder_blocks(&self) -> Vec<ConvBlock> {
        let drop = self.effective_dropout_blocks();
        (0..self.depth)
            .map(|i| ConvBlock {
                prefix: format!("enc{}", i + 1),
                sampling: Sampling::Conv { stride: 2 },
                in_channels: if i == 0 {
                    self.in_channels
                } else {
                    self.encoder_filters[i - 1]
                },
                out_channels: self.encoder_filters[i],
                leaky_slope: Some(self.leaky_slope),
                norm: i > 0,
                dropout: drop
                    .contains(&BlockRef::Encoder(i + 1))
                    .then_some(self.dropout_rate),
            })
            .collect()
    }

    fn decoder_blocks(&self) -> Vec<ConvBlock> {
        let drop = self.effective_dropout_blocks();
        let f = &self.encoder_filters;
        let d = self.depth;
        (0..d)
            .map(|j| {
                let last = j == d - 1;
                ConvBlock {
                    prefix: format!("dec{}", j + 1),
                    sampling: Sampling::Transpose,
                    in_channels: if j == 0 { f[d - 1] } else { 2 * f[d - 1 - j] },
                    out_channels: if last {
                        self.out_channels
                    } else {
                        f[d - 2 - j]
                    },
                    leaky_slope: (!last).then_some(self.leaky_slope),
                    norm: !last,
                    dropout: (!last && drop.contains(&BlockRef::Decoder(j + 1)))
                        .then_some(self.dropout_rate),
                }
            })
            .collect()
    }

    /// `(name, shape)` of every parameter tensor a network built from this
    /// spec owns.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.encoder_blocks()
            .iter()
            .chain(self.decoder_blocks().iter())
            .flat_map(|b| b.parameter_shapes())
            .collect()
    }

    /// Names of the input block's kernel and bias.
    pub fn input_layer_parameters(&self) -> Vec<String> {
        let b = &self.encoder_blocks()[0];
        vec![b.weight_name(), b.bias_name()]
    }
}

/// Activations retained by [`Generator::forward_train`] for the backward pass.
pub struct GeneratorTape<T> {
    encoder: Vec<BlockTape<T>>,
    decoder: Vec<BlockTape<T>>,
    output: Array4<T>,
}

impl<T> GeneratorTape<T> {
    pub fn output(&self) -> &Array4<T> {
        &self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T: Real = f32> {
    spec: GeneratorSpec,
    params: TensorMap<T>,
}

impl<T: Real> Generator<T> {
    /// Builds a freshly initialized network (kernels ~ N(0, 0.02), biases 0,
    /// normalization scale 1 / offset 0). Deterministic in `seed`.
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut init = Initializer::new(seed);
        let mut params = TensorMap::new();
        for b in spec
            .encoder_blocks()
            .iter()
            .chain(spec.decoder_blocks().iter())
        {
            b.init(&mut init, &mut params);
        }
        Ok(Self { spec, params })
    }

    /// Wraps an existing parameter map after checking names and shapes.
    pub fn from_parameters(spec: GeneratorSpec, params: TensorMap<T>) -> Result<Self> {
        spec.validate()?;
        check_parameters("generator", &spec.parameter_shapes(), &params)?;
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &GeneratorSpec {
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

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            spec: self.spec.clone(),
            params: cast_map(&self.params),
        }
    }

    pub fn check_input(&self, x: &ArrayView4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let m = self.spec.side_multiple();
        if c != self.spec.in_channels {
            return Err(Error::shape(
                "generator input channels",
                self.spec.in_channels,
                c,
            ));
        }
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::shape(
                "generator input spatial dims",
                format!("multiples of {m}"),
                (h, w),
            ));
        }
        Ok(())
    }

    /// Inference-mode forward pass: deterministic and read-only.
    pub fn forward(&self, x: ArrayView4<T>) -> Result<Array4<T>> {
        self.check_input(&x)?;
        Ok(self
            .run(x.to_owned(), Mode::Eval, false, &mut Vec::new(), false)
            .0)
    }

    /// Training-mode forward pass. Updates normalization running statistics
    /// and returns the tape needed by [`Generator::backward`].
    pub fn forward_train(
        &mut self,
        x: ArrayView4<T>,
        dropout_seed: u64,
    ) -> Result<GeneratorTape<T>> {
        self.check_input(&x)?;
        let mut updates = Vec::new();
        let (_, tape) = self.run(
            x.to_owned(),
            Mode::Train { dropout_seed },
            false,
            &mut updates,
            true,
        );
        for (name, value) in updates {
            self.params.insert(name, value);
        }
        Ok(tape.expect("tape requested"))
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        x: Array4<T>,
        mode: Mode,
        zero_bottleneck: bool,
        updates: &mut Vec<(String, ndarray::ArrayD<T>)>,
        keep_tape: bool,
    ) -> (Array4<T>, Option<GeneratorTape<T>>) {
        let enc = self.spec.encoder_blocks();
        let dec = self.spec.decoder_blocks();
        let d = self.spec.depth;
        let mut skips: Vec<Array4<T>> = Vec::with_capacity(d);
        let mut enc_tapes = Vec::new();
        let mut h = x;
        for (i, block) in enc.iter().enumerate() {
            let (out, tape) = block.forward(&self.params, h, mode, i as u64, updates, keep_tape);
            enc_tapes.extend(tape);
            skips.push(out.clone());
            h = out;
        }
        if zero_bottleneck {
            h.fill(T::zero());
        }
        let mut dec_tapes = Vec::new();
        for (j, block) in dec.iter().enumerate() {
            let (out, tape) =
                block.forward(&self.params, h, mode, (d + j) as u64, updates, keep_tape);
            dec_tapes.extend(tape);
            h = if j + 1 < d {
                concat_channels(out.view(), skips[d - 2 - j].view())
            } else {
                out
            };
        }
        let output = sigmoid(&h);
        let tape = keep_tape.then(|| GeneratorTape {
            encoder: enc_tapes,
            decoder: dec_tapes,
            output: output.clone(),
        });
        (output, tape)
    }

    /// Parameter gradients of a scalar loss given `d loss / d output`.
    pub fn backward(&self, tape: &GeneratorTape<T>, grad_output: &Array4<T>) -> TensorMap<T> {
        let enc = self.spec.encoder_blocks();
        let dec = self.spec.decoder_blocks();
        let d = self.spec.depth;
        let mut grads = TensorMap::new();
        let mut skip_grads: Vec<Option<Array4<T>>> = vec![None; d];

        let p = &tape.output;
        let mut g = grad_output * &p.mapv(|v| v * (T::one() - v));
        for j in (0..d).rev() {
            if j + 1 < d {
                let split = dec[j].out_channels;
                let (dout, dskip) = split_channels(&g, split);
                add_opt(&mut skip_grads[d - 2 - j], dskip);
                g = dout;
            }
            g = dec[j]
                .backward(&self.params, &tape.decoder[j], g, true, &mut grads)
                .expect("input grad requested");
        }
        add_opt(&mut skip_grads[d - 1], g);
        for i in (0..d).rev() {
            let g = skip_grads[i]
                .take()
                .expect("every encoder output feeds forward");
            if let Some(dx) = enc[i].backward(&self.params, &tape.encoder[i], g, i > 0, &mut grads)
            {
                add_opt(&mut skip_grads[i - 1], dx);
            }
        }
        shape_grads(grads, &self.params)
    }
}

fn add_opt<T: Real>(slot: &mut Option<Array4<T>>, g: Array4<T>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

#[cfg(test)]
impl<T: Real> Generator<T> {
    fn forward_zero_bottleneck(&self, x: ArrayView4<T>) -> Array4<T> {
        self.run(x.to_owned(), Mode::Eval, true, &mut Vec::new(), false)
            .0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::conv::{conv_out_side, conv_transpose_out_side};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_spec(in_channels: usize) -> GeneratorSpec {
        GeneratorSpec {
            in_channels,
            depth: 3,
            encoder_filters: vec![4, 6, 8],
            ..Default::default()
        }
    }

    fn random_input<T: Real>(shape: (usize, usize, usize, usize), seed: u64) -> Array4<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || T::from_f64_lossy(rng.random::<f64>()))
    }

    /// Per-layer shape oracle: walk the encoder/decoder arithmetic.
    fn oracle_output_shape(
        spec: &GeneratorSpec,
        n: usize,
        h: usize,
        w: usize,
    ) -> (usize, usize, usize, usize) {
        let (mut hh, mut ww) = (h, w);
        for _ in 0..spec.depth {
            hh = conv_out_side(hh, 4, 2, 1).unwrap();
            ww = conv_out_side(ww, 4, 2, 1).unwrap();
        }
        for _ in 0..spec.depth {
            hh = conv_transpose_out_side(hh, 4, 2, 1).unwrap();
            ww = conv_transpose_out_side(ww, 4, 2, 1).unwrap();
        }
        (n, spec.out_channels, hh, ww)
    }

    #[test]
    fn default_spec_parameter_layout() {
        let spec = GeneratorSpec::default();
        spec.validate().unwrap();
        let shapes: std::collections::BTreeMap<_, _> =
            spec.parameter_shapes().into_iter().collect();
        assert_eq!(shapes["enc1.conv.weight"], vec![64, 4, 4, 4]);
        assert!(!shapes.contains_key("enc1.bn.gamma"));
        assert_eq!(shapes["enc6.conv.weight"], vec![512, 512, 4, 4]);
        assert_eq!(shapes["dec1.convt.weight"], vec![512, 512, 4, 4]);
        assert_eq!(shapes["dec2.convt.weight"], vec![1024, 512, 4, 4]);
        assert_eq!(shapes["dec6.convt.weight"], vec![128, 1, 4, 4]);
        assert!(!shapes.contains_key("dec6.bn.gamma"));
        assert_eq!(
            spec.effective_dropout_blocks(),
            vec![
                BlockRef::Encoder(4),
                BlockRef::Encoder(5),
                BlockRef::Encoder(6),
                BlockRef::Decoder(1),
                BlockRef::Decoder(2),
                BlockRef::Decoder(3)
            ]
        );
    }

    #[test]
    fn only_first_kernel_depends_on_in_channels() {
        let a: std::collections::BTreeMap<_, _> =
            small_spec(3).parameter_shapes().into_iter().collect();
        let b: std::collections::BTreeMap<_, _> =
            small_spec(4).parameter_shapes().into_iter().collect();
        assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
        let differing: Vec<_> = a.keys().filter(|k| a[*k] != b[*k]).collect();
        assert_eq!(differing, vec!["enc1.conv.weight"]);
    }

    #[test]
    fn invalid_specs_are_rejected_with_the_violated_rule() {
        let cases = [
            GeneratorSpec {
                depth: 1,
                encoder_filters: vec![8],
                ..Default::default()
            },
            GeneratorSpec {
                encoder_filters: vec![8, 8],
                ..Default::default()
            },
            GeneratorSpec {
                encoder_filters: vec![64, 0, 256, 512, 512, 512],
                ..Default::default()
            },
            GeneratorSpec {
                dropout_blocks: Some(vec![BlockRef::Decoder(7)]),
                ..Default::default()
            },
            GeneratorSpec {
                dropout_rate: 1.5,
                ..Default::default()
            },
        ];
        let needles = ["depth", "exactly", "> 0", "dec7", "dropout_rate"];
        for (spec, needle) in cases.into_iter().zip(needles) {
            let err = Generator::<f32>::new(spec, 0).unwrap_err().to_string();
            assert!(err.contains(needle), "{err} should mention {needle}");
        }
    }

    #[test]
    fn block_refs_round_trip_through_strings() {
        for b in [BlockRef::Encoder(4), BlockRef::Decoder(1)] {
            assert_eq!(b.to_string().parse::<BlockRef>().unwrap(), b);
        }
        assert!("mid3".parse::<BlockRef>().is_err());
    }

    #[test]
    fn builds_are_deterministic_in_seed() {
        let a = Generator::<f32>::new(small_spec(4), 11).unwrap();
        let b = Generator::<f32>::new(small_spec(4), 11).unwrap();
        let c = Generator::<f32>::new(small_spec(4), 12).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        assert_ne!(a.parameters(), c.parameters());
    }

    #[test]
    fn output_shape_range_and_determinism() {
        let g = Generator::<f32>::new(small_spec(3), 1).unwrap();
        for (n, side) in [(2, 8), (1, 16), (3, 24)] {
            let x = random_input::<f32>((n, 3, side, side), 5);
            let y = g.forward(x.view()).unwrap();
            assert_eq!(y.dim(), oracle_output_shape(g.spec(), n, side, side));
            assert!(y.iter().all(|v| *v > 0.0 && *v < 1.0));
            assert_eq!(y, g.forward(x.view()).unwrap());
        }
    }

    #[test]
    fn shape_errors_report_expected_and_actual() {
        let g = Generator::<f32>::new(small_spec(4), 1).unwrap();
        let err = g.forward(Array4::zeros((1, 4, 12, 12)).view()).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
        let err = g.forward(Array4::zeros((1, 3, 16, 16)).view()).unwrap_err();
        assert!(err.to_string().contains("expected 4"), "{err}");
    }

    #[test]
    fn skips_carry_information_past_a_zeroed_bottleneck() {
        let g = Generator::<f64>::new(small_spec(3), 3).unwrap();
        let a = random_input::<f64>((1, 3, 16, 16), 1);
        let b = random_input::<f64>((1, 3, 16, 16), 2);
        let ya = g.forward_zero_bottleneck(a.view());
        let yb = g.forward_zero_bottleneck(b.view());
        let diff = (&ya - &yb).mapv(f64::abs).sum();
        assert!(diff > 1e-9, "outputs should depend on input, diff {diff}");
    }

    #[test]
    fn training_mode_updates_running_stats_and_uses_dropout() {
        let mut g = Generator::<f32>::new(small_spec(3), 3).unwrap();
        let x = random_input::<f32>((2, 3, 16, 16), 9);
        let before = g.parameters()["enc2.bn.running_mean"].clone();
        let t1 = g.forward_train(x.view(), 1).unwrap().output().clone();
        assert_ne!(before, g.parameters()["enc2.bn.running_mean"]);
        let t2 = g.forward_train(x.view(), 2).unwrap().output().clone();
        assert_ne!(
            t1, t2,
            "different dropout seeds should give different outputs"
        );
    }

    /// Loss = sum(r * output); analytic parameter gradients vs central
    /// differences in f64.
    #[test]
    fn parameter_gradients_match_finite_differences() {
        let spec = GeneratorSpec {
            dropout_rate: 0.3,
            ..small_spec(3)
        };
        let base = Generator::<f64>::new(spec, 21).unwrap();
        let x = random_input::<f64>((2, 3, 8, 8), 4);
        let r = random_input::<f64>((2, 1, 8, 8), 5);
        let seed = 77;
        let loss = |g: &Generator<f64>| {
            let mut g = g.clone();
            let tape = g.forward_train(x.view(), seed).unwrap();
            (tape.output() * &r).sum()
        };
        let mut g = base.clone();
        let tape = g.forward_train(x.view(), seed).unwrap();
        let grads = base.backward(&tape, &r);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let names: Vec<String> = grads.keys().cloned().collect();
        let mut checked = 0;
        while checked < 12 {
            let name = &names[rng.random_range(0..names.len())];
            let len = base.parameters()[name].len();
            let idx = rng.random_range(0..len);
            let h = 1e-5;
            let mut gp = base.clone();
            gp.parameters_mut()
                .get_mut(name)
                .unwrap()
                .as_slice_mut()
                .unwrap()[idx] += h;
            let mut gm = base.clone();
            gm.parameters_mut()
                .get_mut(name)
                .unwrap()
                .as_slice_mut()
                .unwrap()[idx] -= h;
            let fd = (loss(&gp) - loss(&gm)) / (2.0 * h);
            let an = grads[name].as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < 1e-3,
                "{name}[{idx}]: fd {fd} vs analytic {an}"
            );
            checked += 1;
        }
    }
}
