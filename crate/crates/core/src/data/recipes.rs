//! Dataset preprocessing recipes.
//!
//! * FF: 350×350×4 tiles → four corner-anchored 256×256 crops × five
//!   variants (identity, three rotations, horizontal flip) = 20 per tile.
//! * FC: 1200×1200×3 slices → resized to 512×512 → four corners + centre
//!   256×256 crops × four rotations (incl. identity) = 20 per slice.
//! * COCO: keep images containing a class, binarize class-vs-rest, resize
//!   to 256×256.
//!
//! Recipes stream one raw pair at a time into a [`SampleSink`].

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, SampleRecord, Split};
use super::raster::{
    crop_image, crop_mask, resize_bilinear, resize_nearest, AugmentOp, Image, Mask,
};
use super::store::{read_image, read_label_plane, read_mask, SampleSink};
use crate::{Error, Result};

pub const FF_SIDE: usize = 350;
pub const FF_CHANNELS: usize = 4;
pub const FC_SIDE: usize = 1200;
pub const FC_CHANNELS: usize = 3;
pub const FC_RESIZED: usize = 512;
pub const COCO_SIDE: usize = 256;
pub const CROP: usize = 256;

pub const FF_AUGMENTS: [AugmentOp; 5] = [
    AugmentOp::Identity,
    AugmentOp::Rot90,
    AugmentOp::Rot180,
    AugmentOp::Rot270,
    AugmentOp::Hflip,
];

pub const FC_AUGMENTS: [AugmentOp; 4] = [
    AugmentOp::Identity,
    AugmentOp::Rot90,
    AugmentOp::Rot180,
    AugmentOp::Rot270,
];

pub fn ff_channel_semantics() -> Vec<String> {
    ["blue", "green", "red", "nir"].map(String::from).to_vec()
}

pub fn rgb_channel_semantics() -> Vec<String> {
    ["red", "green", "blue"].map(String::from).to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Recipe {
    Ff,
    Fc,
    Coco,
}

/// A raw, unprocessed image–mask pair.
#[derive(Debug, Clone)]
pub struct RawPair {
    pub id: String,
    pub split: Split,
    pub image: Image,
    /// Binary for FF/FC; per-pixel class ids for COCO.
    pub mask: Mask,
}

/// Top-left corners of the four corner-anchored crops.
pub fn corner_offsets(side: usize, crop: usize) -> [(usize, usize); 4] {
    let far = side - crop;
    [(0, 0), (0, far), (far, 0), (far, far)]
}

fn check_raw(pair: &RawPair, side: usize, channels: usize, recipe: &str) -> Result<()> {
    let (c, h, w) = pair.image.dim();
    if (c, h, w) != (channels, side, side) {
        return Err(Error::Data(format!(
            "{recipe} recipe: raw pair `{}` image is {c}x{h}x{w}, expected {channels}x{side}x{side}",
            pair.id
        )));
    }
    if pair.mask.dim() != (side, side) {
        return Err(Error::Data(format!(
            "{recipe} recipe: raw pair `{}` mask is {:?}, expected {side}x{side}",
            pair.id,
            pair.mask.dim()
        )));
    }
    Ok(())
}

fn emit_crops(
    pair: &RawPair,
    image: &Image,
    mask: &Mask,
    offsets: &[(usize, usize)],
    augments: &[AugmentOp],
    sink: &mut dyn SampleSink,
) -> Result<usize> {
    let channels = image.dim().0;
    let mut n = 0;
    for (k, &(top, left)) in offsets.iter().enumerate() {
        let ci = crop_image(image, top, left, CROP);
        let cm = crop_mask(mask, top, left, CROP);
        for &op in augments {
            let id = format!("{}_c{k}_{}", pair.id, op.name());
            let record = SampleRecord {
                image_path: format!("images/{id}.pgt"),
                mask_path: format!("masks/{id}.pgt"),
                id,
                height: CROP,
                width: CROP,
                channels,
                split: pair.split,
                source_id: pair.id.clone(),
            };
            sink.accept(
                record,
                &op.apply_image(ci.view()),
                &op.apply_mask(cm.view()),
            )?;
            n += 1;
        }
    }
    Ok(n)
}

/// Returns the number of records emitted (20 per raw pair).
pub fn preprocess_ff<I>(pairs: I, sink: &mut dyn SampleSink) -> Result<usize>
where
    I: IntoIterator<Item = Result<RawPair>>,
{
    let mut total = 0;
    for pair in pairs {
        let pair = pair?;
        check_raw(&pair, FF_SIDE, FF_CHANNELS, "FF")?;
        let offsets = corner_offsets(FF_SIDE, CROP);
        total += emit_crops(&pair, &pair.image, &pair.mask, &offsets, &FF_AUGMENTS, sink)?;
    }
    Ok(total)
}

pub fn preprocess_fc<I>(pairs: I, sink: &mut dyn SampleSink) -> Result<usize>
where
    I: IntoIterator<Item = Result<RawPair>>,
{
    let mut total = 0;
    for pair in pairs {
        let pair = pair?;
        check_raw(&pair, FC_SIDE, FC_CHANNELS, "FC")?;
        let image = resize_bilinear(&pair.image, FC_RESIZED, FC_RESIZED);
        let mask = resize_nearest(&pair.mask, FC_RESIZED, FC_RESIZED);
        let centre = (FC_RESIZED - CROP) / 2;
        let mut offsets = corner_offsets(FC_RESIZED, CROP).to_vec();
        offsets.push((centre, centre));
        total += emit_crops(&pair, &image, &mask, &offsets, &FC_AUGMENTS, sink)?;
    }
    Ok(total)
}

/// Keeps pairs whose class map contains `class_name`, binarizes against
/// it, and resizes to 256×256.
pub fn preprocess_coco<I>(
    pairs: I,
    class_name: &str,
    classes: &BTreeMap<String, u8>,
    sink: &mut dyn SampleSink,
) -> Result<usize>
where
    I: IntoIterator<Item = Result<RawPair>>,
{
    let class_id = *classes
        .get(class_name)
        .ok_or_else(|| Error::Data(format!("unknown class name `{class_name}`")))?;
    let mut total = 0;
    for pair in pairs {
        let pair = pair?;
        let (c, h, w) = pair.image.dim();
        if pair.mask.dim() != (h, w) {
            return Err(Error::Data(format!(
                "COCO recipe: raw pair `{}` mask {:?} does not match image {h}x{w}",
                pair.id,
                pair.mask.dim()
            )));
        }
        if !pair.mask.iter().any(|&v| v == class_id) {
            continue;
        }
        let binary: Array2<u8> = pair.mask.mapv(|v| u8::from(v == class_id));
        let image = resize_bilinear(&pair.image, COCO_SIDE, COCO_SIDE);
        let mask = resize_nearest(&binary, COCO_SIDE, COCO_SIDE);
        let record = SampleRecord {
            id: pair.id.clone(),
            image_path: format!("images/{}.pgt", pair.id),
            mask_path: format!("masks/{}.pgt", pair.id),
            height: COCO_SIDE,
            width: COCO_SIDE,
            channels: c,
            split: pair.split,
            source_id: pair.id.clone(),
        };
        sink.accept(record, &image, &mask)?;
        total += 1;
    }
    Ok(total)
}

/// Streams the raw pairs listed by a manifest. With `class_labels` the mask
/// planes are read as raw class ids instead of binary masks.
pub fn raw_pairs(
    manifest: &DatasetManifest,
    class_labels: bool,
) -> impl Iterator<Item = Result<RawPair>> + '_ {
    manifest.records.iter().map(move |r| {
        let image = read_image(&manifest.resolve(&r.image_path))?;
        let mask_path = manifest.resolve(&r.mask_path);
        let mask = if class_labels {
            read_label_plane(&mask_path)?
        } else {
            read_mask(&mask_path)?
        };
        Ok(RawPair {
            id: r.id.clone(),
            split: r.split,
            image,
            mask,
        })
    })
}

/// Reads a `{"name": id, ...}` class table.
pub fn read_class_table(path: &Path) -> Result<BTreeMap<String, u8>> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format("class table", path, e))
}
