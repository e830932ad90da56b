//! Weight transfer between architectures that differ in input width.
//!
//! The target networks are freshly initialized, then every source tensor
//! with the same name and shape is copied over, except the first layer of
//! each network, which always keeps its fresh initialization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::manifest::write_json;
use crate::nn::TensorMap;
use crate::trainer::{Checkpoint, ModelSpecs};
use crate::Result;

pub const REPORT_FILE: &str = "transfer_report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    InputLayer,
    ShapeMismatch,
    MissingInTarget,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub name: String,
    pub reason: ExclusionReason,
}

/// Names are qualified as `generator.<param>` / `discriminator.<param>`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReport {
    pub source_provenance: String,
    pub copied: Vec<String>,
    /// Source tensors that were not copied.
    pub excluded: Vec<Exclusion>,
    /// Target tensors left at their fresh initialization.
    pub reinitialized: Vec<String>,
}

impl TransferReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

fn transfer_map(
    network: &str,
    source: &TensorMap<f32>,
    target: &mut TensorMap<f32>,
    input_layer: &[String],
    report: &mut TransferReport,
) {
    let qualify = |n: &str| format!("{network}.{n}");
    for (name, tensor) in source {
        let reason = if input_layer.contains(name) {
            Some(ExclusionReason::InputLayer)
        } else {
            match target.get(name) {
                None => Some(ExclusionReason::MissingInTarget),
                Some(t) if t.shape() != tensor.shape() => Some(ExclusionReason::ShapeMismatch),
                Some(_) => None,
            }
        };
        match reason {
            Some(reason) => report.excluded.push(Exclusion {
                name: qualify(name),
                reason,
            }),
            None => {
                target.insert(name.clone(), tensor.clone());
                report.copied.push(qualify(name));
            }
        }
    }
    for name in target.keys() {
        let copied = !input_layer.contains(name)
            && source
                .get(name)
                .is_some_and(|s| s.shape() == target[name].shape());
        if !copied {
            report.reinitialized.push(qualify(name));
        }
    }
}

/// Builds a `target` checkpoint seeded with `seed` and fills it from
/// `source`. Optimizer state is not carried over.
pub fn transfer_weights(
    source: &Checkpoint,
    target: &ModelSpecs,
    seed: u64,
) -> Result<(Checkpoint, TransferReport)> {
    let mut out = Checkpoint::initialize(
        target.clone(),
        seed,
        format!("transfer<{}>", source.provenance),
    )?;
    let mut report = TransferReport {
        source_provenance: source.provenance.clone(),
        ..TransferReport::default()
    };
    transfer_map(
        "generator",
        &source.generator,
        &mut out.generator,
        &target.generator.input_layer_parameters(),
        &mut report,
    );
    transfer_map(
        "discriminator",
        &source.discriminator,
        &mut out.discriminator,
        &target.discriminator.input_layer_parameters(),
        &mut report,
    );
    out.build_generator()?;
    out.build_discriminator()?;
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::tests::tiny_specs;

    fn names(r: &TransferReport, reason: ExclusionReason) -> Vec<&str> {
        r.excluded
            .iter()
            .filter(|e| e.reason == reason)
            .map(|e| e.name.as_str())
            .collect()
    }

    #[test]
    fn three_to_four_channels_excludes_only_input_layers() {
        let src = Checkpoint::initialize(tiny_specs(3), 5, "c").unwrap();
        let (out, r) = transfer_weights(&src, &tiny_specs(4), 9).unwrap();
        let mut excluded: Vec<_> = names(&r, ExclusionReason::InputLayer);
        excluded.sort();
        assert_eq!(
            excluded,
            [
                "discriminator.layer1.conv.bias",
                "discriminator.layer1.conv.weight",
                "generator.enc1.conv.bias",
                "generator.enc1.conv.weight"
            ]
        );
        assert_eq!(r.excluded.len(), 4);
        for (name, t) in &out.generator {
            if !name.starts_with("enc1.conv") {
                assert!(src.generator[name]
                    .iter()
                    .zip(t.iter())
                    .all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
        assert_eq!(out.generator["enc1.conv.weight"].shape(), &[4, 4, 4, 4]);
        let total = out.generator.len() + out.discriminator.len();
        assert_eq!(r.copied.len() + r.reinitialized.len(), total);
        assert!(out.optimizer.is_none());
    }

    #[test]
    fn identical_specs_still_reinitialize_input_layers() {
        let src = Checkpoint::initialize(tiny_specs(3), 5, "c").unwrap();
        let (out, r) = transfer_weights(&src, &tiny_specs(3), 77).unwrap();
        assert_eq!(r.reinitialized.len(), 4);
        let fresh = Checkpoint::initialize(tiny_specs(3), 77, "").unwrap();
        assert_eq!(
            out.generator["enc1.conv.weight"],
            fresh.generator["enc1.conv.weight"]
        );
        assert_ne!(
            out.generator["enc1.conv.weight"],
            src.generator["enc1.conv.weight"]
        );
    }

    #[test]
    fn missing_and_mismatched_tensors_are_reported() {
        let mut src = Checkpoint::initialize(tiny_specs(3), 5, "c").unwrap();
        src.generator.remove("dec1.convt.bias");
        src.generator.insert(
            "extra.weight".into(),
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[2])),
        );
        let mut wide = tiny_specs(3);
        wide.generator.encoder_filters[2] = 16;
        let (_, r) = transfer_weights(&src, &wide, 1).unwrap();
        assert!(r
            .reinitialized
            .contains(&"generator.dec1.convt.bias".to_string()));
        assert_eq!(
            names(&r, ExclusionReason::MissingInTarget),
            ["generator.extra.weight"]
        );
        assert!(names(&r, ExclusionReason::ShapeMismatch).contains(&"generator.enc3.conv.weight"));
    }

    #[test]
    fn transfer_is_idempotent_on_copied_tensors() {
        let src = Checkpoint::initialize(tiny_specs(3), 5, "c").unwrap();
        let (a, _) = transfer_weights(&src, &tiny_specs(4), 2).unwrap();
        let (b, _) = transfer_weights(&a, &tiny_specs(4), 2).unwrap();
        assert_eq!(a.generator, b.generator);
        assert_eq!(a.discriminator, b.discriminator);
    }
}
