//! Adversarial training loop, validation, and checkpoint persistence.
//!
//! Each batch makes one discriminator update followed by one generator
//! update. The generator's training-mode output is computed once per batch;
//! the discriminator sees it as a constant, while the generator step scores
//! it with the just-updated discriminator in batch-statistics mode (without
//! touching the discriminator's running statistics) and backpropagates
//! through the discriminator's mask input.

pub mod adam;
pub mod checkpoint;
pub mod evaluate;

use std::path::Path;

use log::{info, warn};
use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::manifest::{DatasetManifest, SampleRecord, Split};
use crate::data::store::load_batch;
use crate::data::tensor_file::write_atomic;
use crate::discriminator::{Discriminator, DiscriminatorSpec};
use crate::generator::{Generator, GeneratorSpec, GeneratorTape};
use crate::losses::{bce_with_logits_grad, focal_tversky_with_grad, GeneratorLoss, TverskyParams};
use crate::nn::TensorMap;
use crate::{Error, Result};

pub use adam::{Adam, AdamHyper};
pub use checkpoint::{Checkpoint, OptimizerState};
pub use evaluate::{evaluate, EvalReport, Predictor, SampleMetrics};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_FILE: &str = "metrics.csv";
pub const THRESHOLD: f64 = 0.5;

/// Generator and discriminator architecture, kept together because the
/// discriminator's input width depends on the generator's.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpecs {
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
}

impl ModelSpecs {
    /// Default architecture for `channels`-channel images.
    pub fn for_channels(channels: usize) -> Self {
        let mut s = Self::default();
        s.set_channels(channels);
        s
    }

    pub fn set_channels(&mut self, channels: usize) {
        self.generator.in_channels = channels;
        self.discriminator.image_channels = channels;
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.discriminator.image_channels != self.generator.in_channels {
            return Err(Error::Config(format!(
                "discriminator image_channels {} differs from generator in_channels {}",
                self.discriminator.image_channels, self.generator.in_channels
            )));
        }
        if self.discriminator.mask_channels != self.generator.out_channels {
            return Err(Error::Config(format!(
                "discriminator mask_channels {} differs from generator out_channels {}",
                self.discriminator.mask_channels, self.generator.out_channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    /// Multiplicative learning-rate decay τ.
    pub decay_factor: f64,
    /// Epochs between decay steps.
    pub decay_interval: usize,
    pub loss_params: TverskyParams,
    pub seed: u64,
    /// Only `cpu` (or `auto`) is available.
    pub device_hint: String,
    /// Also write the checkpoint every k epochs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr_generator: 5e-4,
            lr_discriminator: 1e-4,
            decay_factor: 0.95,
            decay_interval: 5,
            loss_params: TverskyParams::default(),
            seed: 0,
            device_hint: "cpu".into(),
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train config: {m}")));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr_generator > 0.0 && self.lr_discriminator > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!(
                "decay_factor must be in (0, 1], got {}",
                self.decay_factor
            ));
        }
        if self.decay_interval == 0 {
            return bad("decay_interval must be at least 1".into());
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be at least 1".into());
        }
        self.loss_params.validate()
    }
}

/// `initial · τ^⌊epoch / interval⌋`.
pub fn lr_at_epoch(initial: f64, decay: f64, interval: usize, epoch: usize) -> f64 {
    initial * decay.powi((epoch / interval.max(1)) as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub g_loss_total: f64,
    pub g_loss_adv: f64,
    pub g_loss_seg: f64,
    pub d_loss: f64,
    pub val_ftl: f64,
    pub val_ti: f64,
    pub val_iou: f64,
    pub lr_g: f64,
    pub lr_d: f64,
}

pub fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for m in metrics {
        w.serialize(m)
            .map_err(|e| Error::format("metrics table", path, e))?;
    }
    if metrics.is_empty() {
        w.write_record([
            "epoch",
            "g_loss_total",
            "g_loss_adv",
            "g_loss_seg",
            "d_loss",
            "val_ftl",
            "val_ti",
            "val_iou",
            "lr_g",
            "lr_d",
        ])
        .map_err(|e| Error::format("metrics table", path, e))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format("metrics table", path, e))?;
    write_atomic(path, &bytes)
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r =
        csv::Reader::from_path(path).map_err(|e| Error::format("metrics table", path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format("metrics table", path, e)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination.
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Train-record order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn add_into(acc: &mut TensorMap<f32>, other: TensorMap<f32>) {
    for (k, v) in other {
        match acc.get_mut(&k) {
            Some(a) => *a += &v,
            None => {
                acc.insert(k, v);
            }
        }
    }
}

/// One discriminator update on `½·[BCE(D(x, m), 1) + BCE(D(x, fake), 0)]`.
pub fn discriminator_step(
    d: &mut Discriminator,
    opt: &mut Adam,
    images: &Array4<f32>,
    masks: &Array4<f32>,
    fake: &Array4<f32>,
    lr: f64,
) -> Result<f64> {
    let (real_logits, real_tape) = d.forward_train(images.view(), masks.view())?;
    let (fake_logits, fake_tape) = d.forward_train(images.view(), fake.view())?;
    let (real_loss, real_grad) = bce_with_logits_grad(real_logits.view(), 1.0);
    let (fake_loss, fake_grad) = bce_with_logits_grad(fake_logits.view(), 0.0);
    let (mut grads, _) = d.backward(&real_tape, &(real_grad * 0.5), false);
    add_into(
        &mut grads,
        d.backward(&fake_tape, &(fake_grad * 0.5), false).0,
    );
    opt.update(d.parameters_mut(), &grads, lr)?;
    Ok(0.5 * (real_loss + fake_loss))
}

/// One generator update on `λ_adv·BCE(D(x, G(x)), 1) + λ_seg·FTL(G(x), m)`.
#[allow(clippy::too_many_arguments)]
pub fn generator_step(
    g: &mut Generator,
    tape: &GeneratorTape<f32>,
    d: &Discriminator,
    opt: &mut Adam,
    images: &Array4<f32>,
    masks: &Array4<f32>,
    params: &TverskyParams,
    lr: f64,
) -> Result<GeneratorLoss> {
    let pred = tape.output();
    let (fake_logits, d_tape) = d.forward_train_frozen(images.view(), pred.view())?;
    let (adv, logit_grad) = bce_with_logits_grad(fake_logits.view(), 1.0);
    let (seg, seg_grad) = focal_tversky_with_grad(pred.view(), masks.view(), params)?;
    let mut grad = seg_grad * params.lambda_seg as f32;
    if params.lambda_adv != 0.0 {
        let mask_grad = d
            .backward(&d_tape, &logit_grad, true)
            .1
            .expect("mask gradient requested");
        grad.scaled_add(params.lambda_adv as f32, &mask_grad);
    }
    let grads = g.backward(tape, &grad);
    opt.update(g.parameters_mut(), &grads, lr)?;
    Ok(GeneratorLoss {
        total: params.lambda_adv * adv + params.lambda_seg * seg,
        adv,
        seg,
    })
}

fn check_compat(manifest: &DatasetManifest, specs: &ModelSpecs) -> Result<()> {
    let channels = manifest.channels();
    if channels != specs.generator.in_channels {
        return Err(Error::Data(format!(
            "{} has {channels}-channel images but the generator expects {}",
            manifest.name, specs.generator.in_channels
        )));
    }
    Ok(())
}

pub fn provenance(manifest: &DatasetManifest) -> String {
    format!("{}@sha256:{}", manifest.name, manifest.digest())
}

/// Trains from `init` (or a fresh seeded initialization) and, if `out_dir`
/// is given, writes `checkpoint/` and `metrics.csv` there.
pub fn train(
    manifest: &DatasetManifest,
    specs: &ModelSpecs,
    config: &TrainConfig,
    init: Option<Checkpoint>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    specs.validate()?;
    check_compat(manifest, specs)?;
    if !matches!(config.device_hint.as_str(), "cpu" | "auto" | "") {
        warn!(
            "device hint `{}` ignored; training on cpu",
            config.device_hint
        );
    }
    let train_records: Vec<&SampleRecord> = manifest.split(Split::Train).collect();
    if train_records.is_empty() {
        return Err(Error::Data(format!(
            "{}: train split is empty",
            manifest.name
        )));
    }
    let mut val_records: Vec<&SampleRecord> = manifest.split(Split::Test).collect();
    let mut val_split = Split::Test;
    if val_records.is_empty() {
        warn!(
            "{}: no test split, validating on the train split",
            manifest.name
        );
        val_records = train_records.clone();
        val_split = Split::Train;
    }

    let start = match init {
        Some(c) => {
            if &c.specs != specs {
                return Err(Error::Config(
                    "initial checkpoint architecture differs from the model specs".into(),
                ));
            }
            c
        }
        None => Checkpoint::initialize(specs.clone(), config.seed, "")?,
    };
    let mut g = start.build_generator()?;
    let mut d = start.build_discriminator()?;
    let (mut opt_g, mut opt_d) = match start.optimizer {
        Some(o) => (o.generator, o.discriminator),
        None => (
            Adam::new(AdamHyper::default()),
            Adam::new(AdamHyper::default()),
        ),
    };
    let params = &config.loss_params;
    let mut metrics = Vec::with_capacity(config.epochs);
    let snapshot =
        |g: &Generator, d: &Discriminator, opt_g: &Adam, opt_d: &Adam, epoch: usize| Checkpoint {
            specs: specs.clone(),
            epoch,
            generator: g.parameters().clone(),
            discriminator: d.parameters().clone(),
            optimizer: Some(OptimizerState {
                generator: opt_g.clone(),
                discriminator: opt_d.clone(),
            }),
            train_config: Some(config.clone()),
            provenance: provenance(manifest),
        };

    for epoch in 0..config.epochs {
        let lr_g = lr_at_epoch(
            config.lr_generator,
            config.decay_factor,
            config.decay_interval,
            epoch,
        );
        let lr_d = lr_at_epoch(
            config.lr_discriminator,
            config.decay_factor,
            config.decay_interval,
            epoch,
        );
        let order = epoch_order(train_records.len(), config.seed, epoch);
        let (mut sum_g, mut sum_adv, mut sum_seg, mut sum_d) = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let recs: Vec<&SampleRecord> = chunk.iter().map(|&i| train_records[i]).collect();
            let (images, masks) = load_batch(manifest, &recs)?;
            let tape = g.forward_train(images.view(), mix(config.seed, epoch as u64, b as u64))?;
            let fake = tape.output().clone();
            let d_loss = discriminator_step(&mut d, &mut opt_d, &images, &masks, &fake, lr_d)?;
            let gl = generator_step(&mut g, &tape, &d, &mut opt_g, &images, &masks, params, lr_g)?;
            if !(gl.total.is_finite() && d_loss.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, batch {b} (generator {}, discriminator {d_loss})",
                    gl.total
                )));
            }
            sum_g += gl.total;
            sum_adv += gl.adv;
            sum_seg += gl.seg;
            sum_d += d_loss;
            batches += 1;
        }
        let val = evaluate::evaluate_records(
            &g,
            manifest,
            &val_records,
            val_split,
            params,
            THRESHOLD,
            config.batch_size,
        )?;
        let n = batches as f64;
        let m = EpochMetrics {
            epoch: epoch + 1,
            g_loss_total: sum_g / n,
            g_loss_adv: sum_adv / n,
            g_loss_seg: sum_seg / n,
            d_loss: sum_d / n,
            val_ftl: val.ftl,
            val_ti: val.ti,
            val_iou: val.iou,
            lr_g,
            lr_d,
        };
        info!(
            "epoch {}/{}: g {:.4} (adv {:.4}, seg {:.4}) d {:.4} | val ftl {:.4} ti {:.4} iou {:.4}",
            m.epoch, config.epochs, m.g_loss_total, m.g_loss_adv, m.g_loss_seg, m.d_loss, m.val_ftl, m.val_ti, m.val_iou
        );
        metrics.push(m);
        if let Some(dir) = out_dir {
            write_metrics(&dir.join(METRICS_FILE), &metrics)?;
            if config
                .checkpoint_every
                .is_some_and(|k| (epoch + 1) % k == 0)
                && epoch + 1 < config.epochs
            {
                snapshot(&g, &d, &opt_g, &opt_d, epoch + 1).save(&dir.join(CHECKPOINT_DIR))?;
            }
        }
    }
    let checkpoint = snapshot(&g, &d, &opt_g, &opt_d, config.epochs);
    if let Some(dir) = out_dir {
        checkpoint.save(&dir.join(CHECKPOINT_DIR))?;
    }
    Ok(TrainOutcome {
        checkpoint,
        metrics,
    })
}
