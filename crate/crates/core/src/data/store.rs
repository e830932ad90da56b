//! Reading and writing sample files, and the sinks recipes emit into.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis, Ix2, Ix3};

use super::manifest::{DatasetManifest, SampleRecord};
use super::raster::{is_binary, Image, Mask};
use super::tensor_file::{self, TensorData};
use crate::{Error, Result};

fn is_png(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Loads a `[C,H,W]` float image from PGT1 (float32) or 8-bit PNG.
pub fn read_image(path: &Path) -> Result<Image> {
    if is_png(path) {
        let img = image::open(path).map_err(|e| Error::format("PNG image", path, e))?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                out[[c, y as usize, x as usize]] = px[c] as f32 / 255.0;
            }
        }
        return Ok(out);
    }
    let a = tensor_file::read_f32(path)?;
    a.into_dimensionality::<Ix3>()
        .map_err(|_| Error::format("image tensor", path, "expected rank 3 [C,H,W]"))
}

/// Loads a raw single-channel label plane (PGT1 uint8 `[1,H,W]`/`[H,W]` or
/// 8-bit grayscale PNG) without reinterpreting values.
pub fn read_label_plane(path: &Path) -> Result<Array2<u8>> {
    if is_png(path) {
        let img = image::open(path).map_err(|e| Error::format("PNG mask", path, e))?;
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        return Ok(
            Array2::from_shape_vec((h as usize, w as usize), gray.into_raw()).expect("dims"),
        );
    }
    match tensor_file::read(path)? {
        TensorData::U8(a) => {
            let a = if a.ndim() == 3 && a.shape()[0] == 1 {
                a.index_axis_move(Axis(0), 0)
            } else {
                a
            };
            a.into_dimensionality::<Ix2>()
                .map_err(|_| Error::format("mask tensor", path, "expected [1,H,W] or [H,W]"))
        }
        TensorData::F32(_) => Err(Error::format("mask tensor", path, "masks must be uint8")),
    }
}

/// Loads a binary mask. PNG masks use `{0,255}` and are mapped to `{0,1}`.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let mut m = read_label_plane(path)?;
    if is_png(path) {
        m.mapv_inplace(|v| if v == 255 { 1 } else { v });
    }
    if !is_binary(&m) {
        return Err(Error::format("mask", path, "values outside {0,1}"));
    }
    Ok(m)
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    tensor_file::write(path, &TensorData::F32(image.clone().into_dyn()))
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let m = mask.clone().insert_axis(Axis(0)).into_dyn();
    tensor_file::write(path, &TensorData::U8(m))
}

/// Loads one record and checks it against its declared shape.
pub fn load_sample(manifest: &DatasetManifest, record: &SampleRecord) -> Result<(Image, Mask)> {
    let image_path = manifest.resolve(&record.image_path);
    let image = read_image(&image_path)?;
    let mask = read_mask(&manifest.resolve(&record.mask_path))?;
    let want = (record.channels, record.height, record.width);
    if image.dim() != want {
        return Err(Error::shape(
            format!("image of record `{}`", record.id),
            want,
            image.dim(),
        ));
    }
    if mask.dim() != (record.height, record.width) {
        return Err(Error::shape(
            format!("mask of record `{}`", record.id),
            (record.height, record.width),
            mask.dim(),
        ));
    }
    Ok((image, mask))
}

/// Stacks records into `(images [N,C,H,W], masks [N,1,H,W])` float batches.
pub fn load_batch(
    manifest: &DatasetManifest,
    records: &[&SampleRecord],
) -> Result<(Array4<f32>, Array4<f32>)> {
    let first = records
        .first()
        .ok_or_else(|| Error::Data("cannot load an empty batch".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut images = Array4::<f32>::zeros((records.len(), c, h, w));
    let mut masks = Array4::<f32>::zeros((records.len(), 1, h, w));
    for (i, r) in records.iter().enumerate() {
        if (r.channels, r.height, r.width) != (c, h, w) {
            return Err(Error::Data(format!(
                "record `{}` is {}x{}x{}, batch expects {c}x{h}x{w}",
                r.id, r.channels, r.height, r.width
            )));
        }
        let (img, mask) = load_sample(manifest, r)?;
        images.index_axis_mut(Axis(0), i).assign(&img);
        masks
            .index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(0), 0)
            .assign(&mask.mapv(f32::from));
    }
    Ok((images, masks))
}

/// Destination for samples produced by a recipe or generator.
pub trait SampleSink {
    fn accept(&mut self, record: SampleRecord, image: &Image, mask: &Mask) -> Result<()>;
}

/// Writes each sample as `images/<id>.pgt` + `masks/<id>.pgt` under `root`.
pub struct DiskSink {
    root: PathBuf,
    records: Vec<SampleRecord>,
}

impl DiskSink {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            records: Vec::new(),
        }
    }

    /// Writes the manifest files and returns the manifest.
    pub fn finish(self, name: &str, channel_semantics: Vec<String>) -> Result<DatasetManifest> {
        let m = DatasetManifest {
            name: name.to_string(),
            records: self.records,
            channel_semantics,
            root: self.root,
        };
        m.validate()?;
        m.save(&m.root)?;
        Ok(m)
    }
}

impl SampleSink for DiskSink {
    fn accept(&mut self, mut record: SampleRecord, image: &Image, mask: &Mask) -> Result<()> {
        record.image_path = format!("images/{}.pgt", record.id);
        record.mask_path = format!("masks/{}.pgt", record.id);
        write_image(&self.root.join(&record.image_path), image)?;
        write_mask(&self.root.join(&record.mask_path), mask)?;
        self.records.push(record);
        Ok(())
    }
}

/// Keeps everything in memory.
#[derive(Default)]
pub struct MemorySink {
    pub samples: Vec<(SampleRecord, Image, Mask)>,
}

impl SampleSink for MemorySink {
    fn accept(&mut self, record: SampleRecord, image: &Image, mask: &Mask) -> Result<()> {
        self.samples.push((record, image.clone(), mask.clone()));
        Ok(())
    }
}

/// Keeps records only and checks mask binarity as samples stream past.
#[derive(Default)]
pub struct RecordSink {
    pub records: Vec<SampleRecord>,
    pub non_binary_masks: usize,
}

impl SampleSink for RecordSink {
    fn accept(&mut self, record: SampleRecord, _image: &Image, mask: &Mask) -> Result<()> {
        if !is_binary(mask) {
            self.non_binary_masks += 1;
        }
        self.records.push(record);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::Split;

    #[test]
    fn png_masks_map_255_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let img = image::GrayImage::from_raw(2, 2, vec![0, 255, 255, 0]).unwrap();
        img.save(&p).unwrap();
        let m = read_mask(&p).unwrap();
        assert_eq!(m.into_raw_vec_and_offset().0, vec![0, 1, 1, 0]);
        let bad = dir.path().join("bad.png");
        image::GrayImage::from_raw(1, 1, vec![7])
            .unwrap()
            .save(&bad)
            .unwrap();
        assert!(read_mask(&bad).is_err());
    }

    #[test]
    fn png_images_load_as_unit_floats() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.png");
        image::RgbImage::from_raw(1, 1, vec![255, 0, 51])
            .unwrap()
            .save(&p)
            .unwrap();
        let img = read_image(&p).unwrap();
        assert_eq!(img.dim(), (3, 1, 1));
        assert_eq!(img[[0, 0, 0]], 1.0);
        assert!((img[[2, 0, 0]] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn disk_sink_round_trips_through_load_batch() {
        let dir = tempfile::tempdir().unwrap();
        let mut sink = DiskSink::new(dir.path());
        for i in 0..3 {
            let img = Array3::from_elem((2, 4, 4), i as f32 / 4.0);
            let mask = Array2::from_shape_fn((4, 4), |(y, x)| ((x + y + i) % 2) as u8);
            let rec = SampleRecord {
                id: format!("s{i}"),
                image_path: String::new(),
                mask_path: String::new(),
                height: 4,
                width: 4,
                channels: 2,
                split: if i == 2 { Split::Test } else { Split::Train },
                source_id: format!("s{i}"),
            };
            sink.accept(rec, &img, &mask).unwrap();
        }
        let m = sink.finish("demo", vec!["a".into(), "b".into()]).unwrap();
        let loaded = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(loaded, m);
        let recs: Vec<_> = loaded.split(Split::Train).collect();
        let (imgs, masks) = load_batch(&loaded, &recs).unwrap();
        assert_eq!(imgs.dim(), (2, 2, 4, 4));
        assert_eq!(masks.dim(), (2, 1, 4, 4));
        assert_eq!(imgs[[1, 0, 0, 0]], 0.25);
        assert_eq!(masks[[1, 0, 0, 0]], 1.0);
    }

    #[test]
    fn declared_shape_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_image(&dir.path().join("images/a.pgt"), &Array3::zeros((3, 4, 4))).unwrap();
        write_mask(&dir.path().join("masks/a.pgt"), &Array2::zeros((4, 4))).unwrap();
        let m = DatasetManifest {
            name: "x".into(),
            records: vec![SampleRecord {
                id: "a".into(),
                image_path: "images/a.pgt".into(),
                mask_path: "masks/a.pgt".into(),
                height: 4,
                width: 4,
                channels: 4,
                split: Split::Train,
                source_id: "a".into(),
            }],
            channel_semantics: vec![],
            root: dir.path().to_path_buf(),
        };
        assert!(matches!(
            load_sample(&m, &m.records[0]),
            Err(Error::Shape { .. })
        ));
    }
}
