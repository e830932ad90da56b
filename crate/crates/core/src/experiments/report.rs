//! Comparison artifacts for a finished experiment: a loss table, a loss vs
//! fraction plot, mask grids, and a JSON summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use image::{Rgb, RgbImage};
use log::warn;
use ndarray::{Array2, Axis};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::RunResult;
use crate::data::manifest::{write_json, DatasetManifest, Split};
use crate::data::store::load_sample;
use crate::data::tensor_file::write_atomic;
use crate::trainer::{read_metrics, Checkpoint};
use crate::{Error, Result};

pub const CSV_FILE: &str = "loss_comparison.csv";
pub const PLOT_FILE: &str = "loss_comparison.png";
pub const REPORT_FILE: &str = "report.json";
pub const SCRATCH_FAMILY: &str = "scratch:A";
pub const A_FAMILIES: [&str; 3] = [SCRATCH_FAMILY, "transfer:B→A", "transfer:C→A"];

const FONT_PATHS: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionPoint {
    pub fraction: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySummary {
    pub family: String,
    /// Ascending fraction.
    pub points: Vec<FractionPoint>,
    /// Steps where the mean loss rises as the fraction grows.
    pub inversions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub families: Vec<FamilySummary>,
    /// Mean final validation FTL of the scratch family at fraction 1.
    pub scratch_reference: Option<f64>,
    /// Per transfer family, the smallest fraction whose mean loss is at most
    /// the scratch reference.
    pub matched_at_fraction: BTreeMap<String, Option<f64>>,
    pub mask_grid_columns: Vec<String>,
    pub mask_grids: Vec<String>,
}

/// Final validation FTL per run, read back from each run's metrics file
/// and checked against the recorded result.
fn final_losses(exp_dir: &Path, results: &[RunResult]) -> Result<Vec<(RunResult, f64)>> {
    results
        .iter()
        .map(|r| {
            let path = exp_dir.join(&r.metrics_path);
            let metrics = read_metrics(&path)?;
            let last = metrics
                .last()
                .ok_or_else(|| Error::format("metrics table", &path, "no epochs recorded"))?;
            if last.val_ftl.to_bits() != r.final_val_ftl.to_bits() {
                return Err(Error::format(
                    "metrics table",
                    &path,
                    format!(
                        "last val_ftl {} disagrees with recorded result {}",
                        last.val_ftl, r.final_val_ftl
                    ),
                ));
            }
            Ok((r.clone(), last.val_ftl))
        })
        .collect()
}

fn summarize(losses: &[(RunResult, f64)]) -> Vec<FamilySummary> {
    A_FAMILIES
        .iter()
        .filter_map(|family| {
            let mut by_fraction: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
            for (r, l) in losses.iter().filter(|(r, _)| r.family == *family) {
                by_fraction
                    .entry(r.fraction.to_bits())
                    .or_default()
                    .push(*l);
            }
            if by_fraction.is_empty() {
                return None;
            }
            let mut points: Vec<FractionPoint> = by_fraction
                .into_iter()
                .map(|(bits, v)| FractionPoint {
                    fraction: f64::from_bits(bits),
                    mean: v.iter().sum::<f64>() / v.len() as f64,
                    min: v.iter().copied().fold(f64::INFINITY, f64::min),
                    max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    seeds: v.len(),
                })
                .collect();
            points.sort_by(|a, b| a.fraction.total_cmp(&b.fraction));
            let inversions = points.windows(2).filter(|w| w[1].mean > w[0].mean).count();
            Some(FamilySummary {
                family: family.to_string(),
                points,
                inversions,
            })
        })
        .collect()
}

/// Smallest fraction at which each transfer family's mean loss is at most
/// the scratch family's mean loss at fraction 1.
pub fn matched_fractions(
    families: &[FamilySummary],
) -> (Option<f64>, BTreeMap<String, Option<f64>>) {
    let reference = families
        .iter()
        .find(|f| f.family == SCRATCH_FAMILY)
        .and_then(|f| f.points.iter().find(|p| p.fraction == 1.0))
        .map(|p| p.mean);
    let matched = families
        .iter()
        .filter(|f| f.family != SCRATCH_FAMILY)
        .map(|f| {
            let m =
                reference.and_then(|r| f.points.iter().find(|p| p.mean <= r).map(|p| p.fraction));
            (f.family.clone(), m)
        })
        .collect();
    (reference, matched)
}

fn write_csv(path: &Path, losses: &[(RunResult, f64)], families: &[FamilySummary]) -> Result<()> {
    let err = |e: csv::Error| Error::format("loss table", path, e);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model_family", "fraction", "seed", "final_val_ftl"])
        .map_err(err)?;
    for family in A_FAMILIES {
        let mut rows: Vec<&(RunResult, f64)> =
            losses.iter().filter(|(r, _)| r.family == family).collect();
        rows.sort_by(|a, b| {
            a.0.fraction
                .total_cmp(&b.0.fraction)
                .then(a.0.seed.cmp(&b.0.seed))
        });
        for (r, l) in rows {
            w.write_record([
                family.to_string(),
                format!("{:.2}", r.fraction),
                r.seed.to_string(),
                l.to_string(),
            ])
            .map_err(err)?;
        }
    }
    for f in families {
        for p in &f.points {
            w.write_record([
                f.family.clone(),
                format!("{:.2}", p.fraction),
                "mean".into(),
                p.mean.to_string(),
            ])
            .map_err(err)?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format("loss table", path, e))?;
    write_atomic(path, &bytes)
}

fn font_available() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        for p in FONT_PATHS {
            if let Ok(bytes) = std::fs::read(p) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        warn!("no TrueType font found; plot is drawn without text");
        false
    })
}

fn draw_plot(path: &Path, families: &[FamilySummary]) -> Result<()> {
    let fail = |e: &dyn std::fmt::Display| Error::format("loss plot", path, e);
    let text = font_available();
    let root = BitMapBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| fail(&e))?;
    let all: Vec<f64> = families
        .iter()
        .flat_map(|f| f.points.iter().map(|p| p.mean))
        .collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.1).max(1e-3);
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20);
    if text {
        builder
            .caption(
                "Mean final validation FTL vs training fraction",
                ("sans-serif", 22),
            )
            .x_label_area_size(40)
            .y_label_area_size(60);
    }
    let mut chart = builder
        .build_cartesian_2d(0.0f64..1.05, (lo - pad).max(0.0)..hi + pad)
        .map_err(|e| fail(&e))?;
    if text {
        chart
            .configure_mesh()
            .x_desc("training fraction")
            .y_desc("final validation FTL")
            .draw()
            .map_err(|e| fail(&e))?;
    }
    for (i, f) in families.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64)> = f.points.iter().map(|p| (p.fraction, p.mean)).collect();
        let series = chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(|e| fail(&e))?;
        if text {
            series.label(f.family.clone()).legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2))
            });
        }
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 4, color.filled())))
            .map_err(|e| fail(&e))?;
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| fail(&e))?;
    }
    root.present().map_err(|e| fail(&e))
}

fn composite_channels(manifest: &DatasetManifest, channels: usize) -> [usize; 3] {
    let find = |name: &str| manifest.channel_semantics.iter().position(|c| c == name);
    match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => [r, g, b],
        _ if channels >= 3 => [0, 1, 2],
        _ => [0, 0, 0],
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One row: input composite, truth, then each model's probability map.
fn draw_grid(
    path: &Path,
    rgb: [Array2<f32>; 3],
    truth: &Array2<f32>,
    preds: &[Array2<f32>],
) -> Result<()> {
    const GAP: u32 = 4;
    let (h, w) = truth.dim();
    let scale = (128 / h.max(w)).max(1) as u32;
    let (th, tw) = (h as u32 * scale, w as u32 * scale);
    let cols = 2 + preds.len() as u32;
    let mut img = RgbImage::from_pixel(cols * tw + (cols - 1) * GAP, th, Rgb([255, 255, 255]));
    let mut put = |col: u32, f: &dyn Fn(usize, usize) -> [u8; 3]| {
        for y in 0..th {
            for x in 0..tw {
                let px = f((y / scale) as usize, (x / scale) as usize);
                img.put_pixel(col * (tw + GAP) + x, y, Rgb(px));
            }
        }
    };
    put(0, &|y, x| {
        [
            to_byte(rgb[0][[y, x]]),
            to_byte(rgb[1][[y, x]]),
            to_byte(rgb[2][[y, x]]),
        ]
    });
    put(1, &|y, x| [to_byte(truth[[y, x]]); 3]);
    for (i, p) in preds.iter().enumerate() {
        put(2 + i as u32, &|y, x| [to_byte(p[[y, x]]); 3]);
    }
    img.save(path)
        .map_err(|e| Error::format("mask grid", path, e))
}

fn mask_grids(
    exp_dir: &Path,
    results: &[RunResult],
    manifest: &DatasetManifest,
    samples: usize,
    out_dir: &Path,
) -> Result<(Vec<String>, Vec<String>)> {
    // Per family: the largest-fraction run, lowest seed on ties.
    let mut models = Vec::new();
    let mut columns = vec!["input".to_string(), "truth".to_string()];
    for family in A_FAMILIES {
        let best = results
            .iter()
            .filter(|r| r.family == family)
            .max_by(|a, b| a.fraction.total_cmp(&b.fraction).then(b.seed.cmp(&a.seed)));
        if let Some(r) = best {
            models.push(Checkpoint::load(&exp_dir.join(&r.checkpoint_path))?.build_generator()?);
            columns.push(r.model_id.clone());
        }
    }
    let mut files = Vec::new();
    for record in manifest.split(Split::Test).take(samples) {
        let (image, mask) = load_sample(manifest, record)?;
        let idx = composite_channels(manifest, image.dim().0);
        let rgb = idx.map(|c| image.index_axis(Axis(0), c).to_owned());
        let batch = image.clone().insert_axis(Axis(0));
        let preds = models
            .iter()
            .map(|g| {
                Ok(g.forward(batch.view())?
                    .index_axis_move(Axis(0), 0)
                    .index_axis_move(Axis(0), 0))
            })
            .collect::<Result<Vec<_>>>()?;
        let name = format!("masks_{}.png", record.id);
        draw_grid(&out_dir.join(&name), rgb, &mask.mapv(f32::from), &preds)?;
        files.push(name);
    }
    Ok((columns, files))
}

/// Writes the report bundle for `results` (paths relative to `exp_dir`)
/// into `out_dir`. Mask grids are drawn when the role-A manifest is given.
pub fn build_report(
    exp_dir: &Path,
    results: &[RunResult],
    role_a: Option<&DatasetManifest>,
    samples: usize,
    out_dir: &Path,
) -> Result<Report> {
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let losses = final_losses(exp_dir, results)?;
    let families = summarize(&losses);
    write_csv(&out_dir.join(CSV_FILE), &losses, &families)?;
    if !families.is_empty() {
        draw_plot(&out_dir.join(PLOT_FILE), &families)?;
    }
    let (mask_grid_columns, mask_grids) = match role_a {
        Some(m) if samples > 0 => mask_grids(exp_dir, results, m, samples, out_dir)?,
        _ => (Vec::new(), Vec::new()),
    };
    let (scratch_reference, matched_at_fraction) = matched_fractions(&families);
    let report = Report {
        families,
        scratch_reference,
        matched_at_fraction,
        mask_grid_columns,
        mask_grids,
    };
    write_json(&out_dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

pub fn report_paths(out_dir: &Path) -> [PathBuf; 3] {
    [
        out_dir.join(CSV_FILE),
        out_dir.join(PLOT_FILE),
        out_dir.join(REPORT_FILE),
    ]
}
