//! Validation metrics: soft Focal Tversky / Tversky on raw probabilities,
//! hard IoU / Dice after thresholding. Every metric is computed per sample
//! and averaged, so results do not depend on the evaluation batch size.

use ndarray::{Array4, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::data::manifest::{DatasetManifest, SampleRecord, Split};
use crate::data::store::load_batch;
use crate::generator::Generator;
use crate::losses::{ConfusionSums, TverskyParams};
use crate::{Error, Result};

/// Anything that maps an image batch to foreground probabilities.
pub trait Predictor {
    fn predict(&self, images: ArrayView4<f32>) -> Result<Array4<f32>>;
}

impl Predictor for Generator<f32> {
    fn predict(&self, images: ArrayView4<f32>) -> Result<Array4<f32>> {
        self.forward(images)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub ftl: f64,
    pub ti: f64,
    pub iou: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub threshold: f64,
    pub ftl: f64,
    pub ti: f64,
    pub iou: f64,
    pub dice: f64,
    pub per_sample: Vec<SampleMetrics>,
}

/// Hard IoU and Dice of one binarized prediction. An empty union counts as
/// a perfect match.
pub fn hard_scores(pred: &[f32], truth: &[f32], threshold: f64) -> (f64, f64) {
    let (mut inter, mut p_sum, mut t_sum) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let p = f64::from(p) >= threshold;
        let t = t >= 0.5;
        inter += usize::from(p && t);
        p_sum += usize::from(p);
        t_sum += usize::from(t);
    }
    let union = p_sum + t_sum - inter;
    if union == 0 {
        return (1.0, 1.0);
    }
    (
        inter as f64 / union as f64,
        2.0 * inter as f64 / (p_sum + t_sum) as f64,
    )
}

/// Scores a batch of predictions against truth masks.
pub fn score_batch(
    ids: &[&str],
    pred: ArrayView4<f32>,
    truth: ArrayView4<f32>,
    params: &TverskyParams,
    threshold: f64,
) -> Result<Vec<SampleMetrics>> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(
            "prediction vs truth",
            truth.shape(),
            pred.shape(),
        ));
    }
    let mut out = Vec::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        let p = pred.index_axis(Axis(0), i).as_standard_layout().to_owned();
        let t = truth.index_axis(Axis(0), i).as_standard_layout().to_owned();
        let (ps, ts) = (
            p.as_slice().expect("standard"),
            t.as_slice().expect("standard"),
        );
        let sums = ConfusionSums::from_slices(ps, ts);
        let (iou, dice) = hard_scores(ps, ts, threshold);
        out.push(SampleMetrics {
            id: id.to_string(),
            ftl: sums.focal_tversky_loss(params),
            ti: sums.tversky_index(params),
            iou,
            dice,
        });
    }
    Ok(out)
}

/// Evaluates `model` on the records of `split`.
pub fn evaluate(
    model: &dyn Predictor,
    manifest: &DatasetManifest,
    split: Split,
    params: &TverskyParams,
    threshold: f64,
    batch_size: usize,
) -> Result<EvalReport> {
    let records: Vec<&SampleRecord> = manifest.split(split).collect();
    evaluate_records(
        model, manifest, &records, split, params, threshold, batch_size,
    )
}

pub(crate) fn evaluate_records(
    model: &dyn Predictor,
    manifest: &DatasetManifest,
    records: &[&SampleRecord],
    split: Split,
    params: &TverskyParams,
    threshold: f64,
    batch_size: usize,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Data(format!(
            "{}: {split:?} split is empty, nothing to evaluate",
            manifest.name
        )));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Value(format!(
            "threshold must be in [0, 1], got {threshold}"
        )));
    }
    let mut per_sample = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let (images, masks) = load_batch(manifest, chunk)?;
        let pred = model.predict(images.view())?;
        let ids: Vec<&str> = chunk.iter().map(|r| r.id.as_str()).collect();
        per_sample.extend(score_batch(
            &ids,
            pred.view(),
            masks.view(),
            params,
            threshold,
        )?);
    }
    let n = per_sample.len() as f64;
    let mean = |f: fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        split,
        threshold,
        ftl: mean(|s| s.ftl),
        ti: mean(|s| s.ti),
        iou: mean(|s| s.iou),
        dice: mean(|s| s.dice),
        per_sample,
    })
}
