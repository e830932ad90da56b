//! On-disk checkpoints: a directory with `meta.json` and one PGT1 file per
//! tensor. Directories are assembled beside the target and renamed into
//! place, so a reader sees either the old checkpoint or the new one.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::{Adam, AdamHyper};
use super::{ModelSpecs, TrainConfig};
use crate::data::manifest::write_json;
use crate::data::tensor_file::{self, TensorData};
use crate::discriminator::{Discriminator, DiscriminatorSpec};
use crate::generator::{Generator, GeneratorSpec};
use crate::nn::TensorMap;
use crate::{Error, Result};

pub const META_FILE: &str = "meta.json";
const FORMAT: &str = "patchgan-segkit-checkpoint/1";

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub generator: Adam,
    pub discriminator: Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub specs: ModelSpecs,
    /// Completed training epochs.
    pub epoch: usize,
    pub generator: TensorMap<f32>,
    pub discriminator: TensorMap<f32>,
    pub optimizer: Option<OptimizerState>,
    pub train_config: Option<TrainConfig>,
    /// Dataset name and manifest digest, `name@sha256:<hex>`.
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdamMeta {
    hyper: AdamHyper,
    generator_step: u64,
    discriminator_step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format: String,
    generator_spec: GeneratorSpec,
    discriminator_spec: DiscriminatorSpec,
    epoch: usize,
    train_config: Option<TrainConfig>,
    provenance: String,
    adam: Option<AdamMeta>,
    tensors: Vec<TensorEntry>,
}

const GROUPS: [&str; 6] = [
    "generator",
    "discriminator",
    "adam.generator.m",
    "adam.generator.v",
    "adam.discriminator.m",
    "adam.discriminator.v",
];

impl Checkpoint {
    /// Fresh networks built from `seed`, no optimizer state.
    pub fn initialize(specs: ModelSpecs, seed: u64, provenance: impl Into<String>) -> Result<Self> {
        specs.validate()?;
        let generator = Generator::<f32>::new(specs.generator.clone(), seed)?.into_parameters();
        let discriminator =
            Discriminator::<f32>::new(specs.discriminator.clone(), seed.wrapping_add(1))?
                .into_parameters();
        Ok(Self {
            specs,
            epoch: 0,
            generator,
            discriminator,
            optimizer: None,
            train_config: None,
            provenance: provenance.into(),
        })
    }

    pub fn build_generator(&self) -> Result<Generator> {
        Generator::from_parameters(self.specs.generator.clone(), self.generator.clone())
    }

    pub fn build_discriminator(&self) -> Result<Discriminator> {
        Discriminator::from_parameters(self.specs.discriminator.clone(), self.discriminator.clone())
    }

    fn group(&self, g: &str) -> Option<&TensorMap<f32>> {
        let opt = self.optimizer.as_ref();
        match g {
            "generator" => Some(&self.generator),
            "discriminator" => Some(&self.discriminator),
            "adam.generator.m" => opt.map(|o| &o.generator.m),
            "adam.generator.v" => opt.map(|o| &o.generator.v),
            "adam.discriminator.m" => opt.map(|o| &o.discriminator.m),
            "adam.discriminator.v" => opt.map(|o| &o.discriminator.v),
            _ => None,
        }
    }

    /// SHA-256 over the generator and discriminator tensors (names, shapes
    /// and raw bits).
    pub fn parameter_digest(&self) -> String {
        parameter_digest(&[
            ("generator", &self.generator),
            ("discriminator", &self.discriminator),
        ])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let staging = sibling(dir, "staging");
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(Error::io(&staging))?;
        }
        let mut tensors = Vec::new();
        for g in GROUPS {
            let Some(map) = self.group(g) else { continue };
            for (name, t) in map {
                let file = format!("{g}/{name}.pgt");
                tensor_file::write(&staging.join(&file), &TensorData::F32(t.clone()))?;
                tensors.push(TensorEntry {
                    group: g.to_string(),
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "float32".into(),
                    file,
                });
            }
        }
        let meta = Meta {
            format: FORMAT.into(),
            generator_spec: self.specs.generator.clone(),
            discriminator_spec: self.specs.discriminator.clone(),
            epoch: self.epoch,
            train_config: self.train_config.clone(),
            provenance: self.provenance.clone(),
            adam: self.optimizer.as_ref().map(|o| AdamMeta {
                hyper: o.generator.hyper,
                generator_step: o.generator.step,
                discriminator_step: o.discriminator.step,
            }),
            tensors,
        };
        write_json(&staging.join(META_FILE), &meta)?;
        let old = sibling(dir, "old");
        if dir.exists() {
            if old.exists() {
                fs::remove_dir_all(&old).map_err(Error::io(&old))?;
            }
            fs::rename(dir, &old).map_err(Error::io(dir))?;
        }
        fs::rename(&staging, dir).map_err(Error::io(dir))?;
        if old.exists() {
            fs::remove_dir_all(&old).map_err(Error::io(&old))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let bytes = fs::read(&meta_path).map_err(Error::io(&meta_path))?;
        let meta: Meta = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format("checkpoint metadata", &meta_path, e))?;
        if meta.format != FORMAT {
            return Err(Error::format(
                "checkpoint metadata",
                &meta_path,
                format!("unknown format `{}`", meta.format),
            ));
        }
        let mut groups: Vec<TensorMap<f32>> = vec![TensorMap::new(); GROUPS.len()];
        for e in &meta.tensors {
            let slot = GROUPS.iter().position(|g| *g == e.group).ok_or_else(|| {
                Error::format(
                    "checkpoint metadata",
                    &meta_path,
                    format!("unknown group `{}`", e.group),
                )
            })?;
            let path = dir.join(&e.file);
            let t: ArrayD<f32> = tensor_file::read_f32(&path)?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::format(
                    "checkpoint tensor",
                    &path,
                    format!("shape {:?} disagrees with index {:?}", t.shape(), e.shape),
                ));
            }
            if groups[slot].insert(e.name.clone(), t).is_some() {
                return Err(Error::format(
                    "checkpoint metadata",
                    &meta_path,
                    format!("duplicate tensor `{}`", e.name),
                ));
            }
        }
        let mut it = groups.into_iter();
        let mut next = || it.next().expect("six groups");
        let (generator, discriminator) = (next(), next());
        let (gm, gv, dm, dv) = (next(), next(), next(), next());
        let optimizer = meta.adam.map(|a| OptimizerState {
            generator: Adam {
                hyper: a.hyper,
                step: a.generator_step,
                m: gm,
                v: gv,
            },
            discriminator: Adam {
                hyper: a.hyper,
                step: a.discriminator_step,
                m: dm,
                v: dv,
            },
        });
        let ckpt = Self {
            specs: ModelSpecs {
                generator: meta.generator_spec,
                discriminator: meta.discriminator_spec,
            },
            epoch: meta.epoch,
            generator,
            discriminator,
            optimizer,
            train_config: meta.train_config,
            provenance: meta.provenance,
        };
        ckpt.specs.validate()?;
        ckpt.build_generator()?;
        ckpt.build_discriminator()?;
        Ok(ckpt)
    }
}

pub(crate) fn parameter_digest(groups: &[(&str, &TensorMap<f32>)]) -> String {
    let mut h = Sha256::new();
    for (g, map) in groups {
        for (name, t) in *map {
            h.update(g.as_bytes());
            h.update([0]);
            h.update(name.as_bytes());
            h.update([0]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

fn sibling(dir: &Path, tag: &str) -> PathBuf {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    dir.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::tests::tiny_specs;

    fn with_optimizer(mut c: Checkpoint) -> Checkpoint {
        let mut g = Adam::new(AdamHyper::default());
        let grads: TensorMap<f32> = c
            .generator
            .iter()
            .map(|(k, v)| (k.clone(), v.mapv(|x| x + 0.5)))
            .collect();
        g.update(&mut c.generator, &grads, 1e-3).unwrap();
        c.optimizer = Some(OptimizerState {
            generator: g,
            discriminator: Adam::new(AdamHyper::default()),
        });
        c.train_config = Some(TrainConfig::default());
        c.epoch = 3;
        c
    }

    #[test]
    fn save_load_is_bitwise_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let c =
            with_optimizer(Checkpoint::initialize(tiny_specs(3), 11, "demo@sha256:00").unwrap());
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.parameter_digest(), c.parameter_digest());
        // Saving again over the same directory reproduces every tensor byte.
        let before: Vec<_> = walk(&path);
        back.save(&path).unwrap();
        assert_eq!(walk(&path), before);
    }

    fn walk(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        for g in fs::read_dir(dir).unwrap() {
            let p = g.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push((p.clone(), fs::read(&p).unwrap()));
            }
        }
        out.sort();
        out
    }

    #[test]
    fn corrupt_checkpoints_fail_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        Checkpoint::initialize(tiny_specs(3), 1, "x")
            .unwrap()
            .save(&path)
            .unwrap();
        let victim = path.join("generator/enc1.conv.bias.pgt");
        fs::write(&victim, b"PGT1").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
        assert!(Checkpoint::load(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn digest_tracks_parameter_bits() {
        let a = Checkpoint::initialize(tiny_specs(3), 1, "x").unwrap();
        let mut b = a.clone();
        assert_eq!(a.parameter_digest(), b.parameter_digest());
        b.generator.get_mut("dec1.convt.bias").unwrap()[[0]] = 1e-30;
        assert_ne!(a.parameter_digest(), b.parameter_digest());
    }
}
