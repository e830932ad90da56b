//! Procedural blob datasets for desk-scale experiments.
//!
//! Each image is a smooth gradient background with Gaussian noise; the
//! foreground is a union of random rotated ellipses whose pixels get a
//! per-channel intensity offset. The mask is the exact ellipse union.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, SampleRecord, Split};
use super::raster::{Image, Mask};
use super::recipes::{ff_channel_semantics, rgb_channel_semantics};
use super::store::{DiskSink, SampleSink};
use crate::{Error, Result};

const MAX_FOREGROUND: f64 = 0.5;
const MAX_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub name: String,
    /// Train-split samples.
    pub n_samples: usize,
    /// Test-split samples, generated after the train samples.
    pub n_test: usize,
    pub channels: usize,
    pub side: usize,
    /// Inclusive.
    pub blob_count_range: [u32; 2],
    /// Inclusive, in pixels.
    pub blob_radius_range: [u32; 2],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            n_samples: 64,
            n_test: 16,
            channels: 3,
            side: 256,
            blob_count_range: [1, 4],
            blob_radius_range: Self::default_radius_range(256),
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Blob radii scaled to the image side: 3/64 to 3/16 of it.
    pub fn default_radius_range(side: usize) -> [u32; 2] {
        let side = side as u32;
        [(3 * side / 64).max(1), (3 * side / 16).max(1)]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic data: {m}")));
        if self.channels != 3 && self.channels != 4 {
            return bad(format!("channels must be 3 or 4, got {}", self.channels));
        }
        if self.side < 4 {
            return bad(format!("side {} is too small", self.side));
        }
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        let [c0, c1] = self.blob_count_range;
        if c0 == 0 || c0 > c1 {
            return bad(format!(
                "blob_count_range {c0}..={c1} must be non-empty and start at 1 or more"
            ));
        }
        let [r0, r1] = self.blob_radius_range;
        if r0 == 0 || r0 > r1 || r0 as usize * 2 > self.side {
            return bad(format!(
                "blob_radius_range {r0}..={r1} is invalid for side {}",
                self.side
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            ));
        }
        Ok(())
    }

    pub fn channel_semantics(&self) -> Vec<String> {
        if self.channels == 4 {
            ff_channel_semantics()
        } else {
            rgb_channel_semantics()
        }
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

fn draw_mask(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Mask {
    let side = cfg.side;
    let [c0, c1] = cfg.blob_count_range;
    let [r0, r1] = cfg.blob_radius_range;
    let area = (side * side) as f64;
    for _ in 0..MAX_ATTEMPTS {
        let count = rng.random_range(c0..=c1);
        let blobs: Vec<Ellipse> = (0..count)
            .map(|_| {
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                Ellipse {
                    cy: rng.random_range(0.0..side as f64),
                    cx: rng.random_range(0.0..side as f64),
                    ry: rng.random_range(r0..=r1) as f64,
                    rx: rng.random_range(r0..=r1) as f64,
                    cos: angle.cos(),
                    sin: angle.sin(),
                }
            })
            .collect();
        let mask = Array2::from_shape_fn((side, side), |(y, x)| {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            u8::from(blobs.iter().any(|b| b.contains(py, px)))
        });
        let fg = mask.iter().filter(|&&v| v == 1).count() as f64 / area;
        if fg > 0.0 && fg <= MAX_FOREGROUND {
            return mask;
        }
    }
    // Fallback: one minimum-radius disc at the centre.
    let c = side as f64 / 2.0;
    let r = r0 as f64;
    Array2::from_shape_fn((side, side), |(y, x)| {
        u8::from((y as f64 + 0.5 - c).powi(2) + (x as f64 + 0.5 - c).powi(2) <= r * r)
    })
}

/// Generates sample `index` of the dataset. Samples are independent, so
/// any index can be regenerated alone.
pub fn synth_sample(cfg: &SynthConfig, index: usize) -> (Image, Mask) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let side = cfg.side;
    let mask = draw_mask(cfg, &mut rng);

    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (gy, gx) = (angle.sin(), angle.cos());
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.45));
    let slope = rng.random_range(0.05..0.2);
    // Foreground reads brighter in red, darker in blue.
    let offset = [
        rng.random_range(0.25..0.4),
        rng.random_range(0.05..0.2),
        -rng.random_range(0.05..0.15),
    ];
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");

    let mut rgb = Array3::<f64>::zeros((3, side, side));
    for ((c, y, x), v) in rgb.indexed_iter_mut() {
        let t = ((y as f64 * gy + x as f64 * gx) / side as f64).clamp(-1.0, 1.0);
        let fg = f64::from(mask[[y, x]]);
        *v = base[c] + slope * t + offset[c] * fg + noise.sample(&mut rng);
    }
    let clamp = |v: f64| v.clamp(0.0, 1.0) as f32;
    let image = if cfg.channels == 4 {
        let nir_gain = rng.random_range(0.3..0.45);
        Array3::from_shape_fn((4, side, side), |(c, y, x)| match c {
            0 => clamp(rgb[[2, y, x]]),
            1 => clamp(rgb[[1, y, x]]),
            2 => clamp(rgb[[0, y, x]]),
            _ => clamp(
                0.5 * rgb[[0, y, x]] + 0.3 * rgb[[1, y, x]] + nir_gain * f64::from(mask[[y, x]]),
            ),
        })
    } else {
        rgb.mapv(clamp)
    };
    (image, mask)
}

pub fn sample_id(index: usize) -> String {
    format!("syn{index:06}")
}

/// Streams `n_samples` train then `n_test` test samples into `sink`.
pub fn generate_into(cfg: &SynthConfig, sink: &mut dyn SampleSink) -> Result<()> {
    cfg.validate()?;
    for index in 0..cfg.n_samples + cfg.n_test {
        let (image, mask) = synth_sample(cfg, index);
        let id = sample_id(index);
        let record = SampleRecord {
            image_path: format!("images/{id}.pgt"),
            mask_path: format!("masks/{id}.pgt"),
            source_id: id.clone(),
            id,
            height: cfg.side,
            width: cfg.side,
            channels: cfg.channels,
            split: if index < cfg.n_samples {
                Split::Train
            } else {
                Split::Test
            },
        };
        sink.accept(record, &image, &mask)?;
    }
    Ok(())
}

/// Writes the dataset to `dir` and returns its manifest.
pub fn generate_synthetic(cfg: &SynthConfig, dir: &Path) -> Result<DatasetManifest> {
    let mut sink = DiskSink::new(dir);
    generate_into(cfg, &mut sink)?;
    sink.finish(&cfg.name, cfg.channel_semantics())
}
