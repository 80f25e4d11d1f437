//! Label CSVs, image files and prediction CSVs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::dataset::{LabeledSet, UnlabeledSet};
use crate::error::{Error, Result};
use crate::metrics::{LabelMatrix, PredictionMatrix, CLASS_NAMES};

/// Extensions tried, in order, when resolving an image id.
pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "ppm", "pnm"];
const ROW_SUM_TOL: f64 = 1e-9;

pub fn csv_header() -> String {
    std::iter::once("image_id").chain(CLASS_NAMES).collect::<Vec<_>>().join(",")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetManifest {
    pub labels_csv: PathBuf,
    pub images_dir: PathBuf,
    /// Optional id list (header `image_id`) of images without labels.
    pub unlabeled_csv: Option<PathBuf>,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            labels_csv: PathBuf::from("labels.csv"),
            images_dir: PathBuf::from("images"),
            unlabeled_csv: None,
            train_fraction: 0.8,
            split_seed: 0,
        }
    }
}

/// A manifest's data after the stratified train/validation split.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub unlabeled: Option<UnlabeledSet>,
}

pub fn load_dataset(manifest: &DatasetManifest) -> Result<LoadedDataset> {
    let all = load_labeled(&manifest.labels_csv, &manifest.images_dir)?;
    let (train, val) = all.stratified_split(manifest.train_fraction, manifest.split_seed)?;
    let unlabeled = manifest
        .unlabeled_csv
        .as_ref()
        .map(|p| load_unlabeled(p, &manifest.images_dir))
        .transpose()?;
    Ok(LoadedDataset { train, val, unlabeled })
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::MalformedCsv {
        line,
        reason: e.to_string(),
    }
}

/// Rows in CSV order. Labels must lie in `[0, 1]` and sum to 1.
pub fn load_labeled(csv_path: &Path, images_dir: &Path) -> Result<LabeledSet> {
    let mut reader = open_csv(csv_path)?;
    let header: Vec<String> = reader.headers().map_err(csv_error)?.iter().map(str::to_owned).collect();
    if header.join(",") != csv_header() {
        return Err(Error::MalformedCsv {
            line: 1,
            reason: format!("header must be `{}`, found `{}`", csv_header(), header.join(",")),
        });
    }
    let (mut ids, mut images, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(i + 2, |p| p.line() as usize);
        let bad = |reason: String| Error::MalformedCsv { line, reason };
        if record.len() != header.len() {
            return Err(bad(format!("expected {} fields, found {}", header.len(), record.len())));
        }
        let id = record[0].trim().to_owned();
        if id.is_empty() {
            return Err(bad("empty image_id".into()));
        }
        let row: Vec<f64> = record
            .iter()
            .skip(1)
            .map(|f| f.trim().parse::<f64>().map_err(|_| bad(format!("`{f}` is not a number"))))
            .collect::<Result<_>>()?;
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(bad(format!("label value {v} outside [0, 1]")));
        }
        let sum: f64 = row.iter().sum();
        if sum == 0.0 {
            return Err(bad(format!("no class assigned to `{id}`")));
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(bad(format!("labels of `{id}` sum to {sum}, not 1")));
        }
        images.push(Arc::new(load_image(&resolve_image(images_dir, &id)?)?));
        labels.extend(row);
        ids.push(id);
    }
    let labels = if ids.is_empty() {
        LabelMatrix::empty(CLASS_NAMES.len())
    } else {
        LabelMatrix::new(CLASS_NAMES.len(), labels)?
    };
    LabeledSet::new(ids, images, labels)
}

/// Images listed under an `image_id` column; other columns are ignored.
pub fn load_unlabeled(csv_path: &Path, images_dir: &Path) -> Result<UnlabeledSet> {
    let mut reader = open_csv(csv_path)?;
    let header = reader.headers().map_err(csv_error)?.clone();
    if header.get(0) != Some("image_id") {
        return Err(Error::MalformedCsv {
            line: 1,
            reason: "first column must be `image_id`".into(),
        });
    }
    let (mut ids, mut images) = (Vec::new(), Vec::new());
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let id = record[0].trim().to_owned();
        images.push(Arc::new(load_image(&resolve_image(images_dir, &id)?)?));
        ids.push(id);
    }
    UnlabeledSet::new(ids, images)
}

/// `<dir>/<id>.<ext>` for the first supported extension that exists.
pub fn resolve_image(dir: &Path, id: &str) -> Result<PathBuf> {
    for ext in IMAGE_EXTENSIONS {
        let p = dir.join(format!("{id}.{ext}"));
        if p.is_file() {
            return Ok(p);
        }
    }
    if let Ok(entries) = fs::read_dir(dir) {
        for entry in entries.flatten() {
            let p = entry.path();
            if p.file_stem().and_then(|s| s.to_str()) == Some(id) {
                return Err(Error::UnsupportedImageFormat(p));
            }
        }
    }
    Err(Error::MissingImage(id.to_owned()))
}

/// Decodes PNG or binary PPM into `[0, 1]` RGB.
pub fn load_image(path: &Path) -> Result<Image> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    if !matches!(ext.as_deref(), Some(e) if IMAGE_EXTENSIONS.contains(&e)) {
        return Err(Error::UnsupportedImageFormat(path.to_owned()));
    }
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        _ => Error::UnsupportedImageFormat(path.to_owned()),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let pixels = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(h as usize, w as usize, 3, pixels)
}

/// Writes a `[0, 1]` RGB image as PNG (values are clamped and quantized).
pub fn save_image_png(path: &Path, img: &Image) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::shape(format!("PNG export expects 3 channels, got {}", img.channels())));
    }
    let bytes: Vec<u8> = img
        .pixels()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .ok_or_else(|| Error::shape("pixel buffer size"))?;
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    })
}

/// Writes `labels.csv` and `images/<id>.png` under `dir`.
pub fn write_labeled_set(dir: &Path, set: &LabeledSet) -> Result<()> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    for (id, img) in set.ids().iter().zip(set.images()) {
        save_image_png(&images_dir.join(format!("{id}.png")), img)?;
    }
    write_probability_csv(&dir.join("labels.csv"), set.ids(), set.labels(), None)
}

fn write_probability_csv(path: &Path, ids: &[String], m: &LabelMatrix, decimals: Option<usize>) -> Result<()> {
    if ids.len() != m.rows() {
        return Err(Error::shape(format!("{} ids for {} rows", ids.len(), m.rows())));
    }
    let mut out = csv_header();
    out.push('\n');
    for (id, row) in ids.iter().zip(m.iter_rows()) {
        out.push_str(id);
        for v in row {
            match decimals {
                Some(d) => out.push_str(&format!(",{v:.d$}")),
                None => out.push_str(&format!(",{v}")),
            }
        }
        out.push('\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Submission-style CSV with six decimal places.
pub fn write_predictions_csv(path: &Path, ids: &[String], preds: &PredictionMatrix) -> Result<()> {
    write_probability_csv(path, ids, preds, Some(6))
}

/// Parses a prediction CSV back into ids and raw row values.
pub fn read_predictions_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = open_csv(path)?;
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(csv_error)?;
        ids.push(record[0].to_owned());
        let row = record
            .iter()
            .skip(1)
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::MalformedCsv {
                    line: i + 2,
                    reason: format!("`{f}` is not a number"),
                })
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    Ok((ids, rows))
}
