//! Source-format parsers, preprocessing and dataset ingestion.
//!
//! Cytology images come with `x,y` contour files; ECG records use the WFDB
//! header, format 212/16 signal and MIT annotation layouts. Both are turned
//! into fixed-size samples with a localisation target and written to a
//! [`container`].

mod annotations;
pub mod container;
mod contour;
mod image;
pub mod wfdb;
mod window;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AffineRanges, EcgAugmentConfig};
use crate::encode::{IMAGE_EXTENT, WINDOW_SAMPLES};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub use annotations::{
    extract_changepoints, is_dangerous_label, parse_annotations, rhythm_events, write_annotations, Annotation,
    RhythmEvent, DANGEROUS_RHYTHMS, RHYTHM,
};
pub use container::{Dataset, DatasetWriter, ManifestRecord};
pub use contour::{
    parse_contour_dat, polygon_centroid, validate_sample, write_contour_dat, Centroid, ContourAnnotation,
};
pub use image::{load_rgb, normalize_image, pad_to_square, preprocess_image, resample_isotropic, Normalized};
pub use wfdb::{
    parse_wfdb_header, read_signal, read_signal_adu, write_signal, write_wfdb_header, SignalSpec, WfdbRecord,
};
pub use window::{extract_window, resample_window, window_len};

/// Which localisation problem a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Nucleus-centre regression on 256x256 RGB images.
    Image,
    /// Changepoint-time regression on 20 s two-lead ECG windows.
    Ecg,
}

impl Task {
    pub fn sample_shape(self) -> &'static [usize] {
        match self {
            Task::Image => &[3, IMAGE_EXTENT, IMAGE_EXTENT],
            Task::Ecg => &[2, WINDOW_SAMPLES],
        }
    }

    pub fn target_dim(self) -> usize {
        match self {
            Task::Image => 2,
            Task::Ecg => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Image => "image",
            Task::Ecg => "ecg",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Task::Image),
            "ecg" => Ok(Task::Ecg),
            other => Err(Error::invalid(format!(
                "unknown task '{other}' (expected image or ecg)"
            ))),
        }
    }
}

/// A preprocessed image with its nucleus centre `[x, y]` in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: Tensor<f32>,
    pub center: [f64; 2],
    pub base_id: String,
    /// 0 for the original, 1.. for augmented variants.
    pub augment_index: u32,
}

/// A 20 s two-lead ECG window with its changepoint time in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgWindow {
    pub signal: [Vec<f64>; 2],
    pub fs: f64,
    pub changepoint_s: f64,
    pub base_id: String,
    pub augment_index: u32,
    /// Half-open range of samples that came from the record; the rest is
    /// zero padding.
    pub valid: (usize, usize),
}

impl EcgWindow {
    pub fn len(&self) -> usize {
        self.signal[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.signal[0].is_empty()
    }
}

/// Options shared by the directory ingesters.
#[derive(Debug, Clone)]
#[derive(Default)]
pub struct IngestOptions {
    /// Augmented variants per base sample (0 disables augmentation).
    pub augment_count: usize,
    pub seed: u64,
    pub force: bool,
    pub affine: AffineRanges,
    pub ecg: EcgAugmentConfig,
}


/// Outcome of a directory ingestion.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub written: usize,
    /// `(source name, reason)` for every sample left out.
    pub excluded: Vec<(String, String)>,
    /// Sources that could not be read at all.
    pub failures: Vec<(String, String)>,
    pub container: PathBuf,
}

pub const EXCLUDED_FILE: &str = "excluded.txt";

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::file(dir, e))? {
        let p = entry?.path();
        if p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn write_excluded(writer: &DatasetWriter, report: &IngestReport) -> Result<()> {
    let mut text = String::new();
    for (name, reason) in report.excluded.iter().chain(&report.failures) {
        text.push_str(&format!("{name}\t{reason}\n"));
    }
    let p = writer.staging_dir().join(EXCLUDED_FILE);
    std::fs::write(&p, text).map_err(|e| Error::file(p, e))
}

enum Parsed<T> {
    Kept(Vec<T>),
    Excluded(String, String),
    Failed(String, String),
}

const IMAGE_EXTENSIONS: [&str; 6] = ["bmp", "png", "jpg", "jpeg", "tif", "tiff"];

/// Finds the nucleus contour for an image: `<stem>_nuc.dat`, else `<stem>.dat`.
fn contour_for(image: &Path) -> Option<PathBuf> {
    let s = stem(image);
    [format!("{s}_nuc.dat"), format!("{s}.dat")]
        .into_iter()
        .map(|n| image.with_file_name(n))
        .find(|p| p.is_file())
}

/// Ingests a directory of cropped cell images with nucleus contours.
/// Samples whose contour leaves the image are listed in `excluded.txt`.
pub fn ingest_sipakmed(in_dir: &Path, out: &Path, opts: &IngestOptions) -> Result<IngestReport> {
    let images: Vec<PathBuf> = sorted_entries(in_dir)?
        .into_iter()
        .filter(|p| {
            p.extension()
                .map(|e| IMAGE_EXTENSIONS.contains(&e.to_string_lossy().to_ascii_lowercase().as_str()))
                .unwrap_or(false)
        })
        .collect();
    if images.is_empty() {
        return Err(Error::Dataset(format!("no records found in {}", in_dir.display())));
    }
    let parsed: Vec<Parsed<ImageSample>> = images
        .par_iter()
        .map(|path| {
            let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let id = stem(path);
            let Some(cpath) = contour_for(path) else {
                return Parsed::Failed(name, "no contour file".into());
            };
            let result = (|| -> Result<Parsed<ImageSample>> {
                let raw = load_rgb(path)?;
                let text = std::fs::read(&cpath).map_err(|e| Error::file(&cpath, e))?;
                let ann = parse_contour_dat(&text, &id)?;
                let (h, w) = (raw.shape()[1], raw.shape()[2]);
                if !validate_sample(&ann, h, w) {
                    return Ok(Parsed::Excluded(name.clone(), "contour point outside the image".into()));
                }
                let base = preprocess_image(&raw, &ann, &id, IMAGE_EXTENT)?;
                let mut out = vec![base.clone()];
                if opts.augment_count > 0 {
                    out.extend(augment::augment_image(
                        &base,
                        opts.augment_count,
                        &opts.affine,
                        opts.seed,
                    )?);
                }
                Ok(Parsed::Kept(out))
            })();
            result.unwrap_or_else(|e| Parsed::Failed(name, e.to_string()))
        })
        .collect();
    finish_ingest(parsed, Task::Image, out, opts, |w, s: &ImageSample| w.push_image(s))
}

fn finish_ingest<T>(
    parsed: Vec<Parsed<T>>,
    task: Task,
    out: &Path,
    opts: &IngestOptions,
    push: impl Fn(&mut DatasetWriter, &T) -> Result<()>,
) -> Result<IngestReport> {
    let mut report = IngestReport {
        container: out.to_path_buf(),
        ..Default::default()
    };
    let mut writer = DatasetWriter::create(out, task, opts.force)?;
    let total = parsed.len();
    for p in parsed {
        match p {
            Parsed::Kept(samples) => {
                for s in &samples {
                    push(&mut writer, s)?;
                }
            }
            Parsed::Excluded(name, why) => report.excluded.push((name, why)),
            Parsed::Failed(name, why) => {
                log::warn!("{name}: {why}");
                report.failures.push((name, why));
            }
        }
    }
    if report.failures.len() == total {
        return Err(Error::Dataset(format!("all {total} sources failed to ingest")));
    }
    report.written = writer.len();
    write_excluded(&writer, &report)?;
    writer.finish()?;
    Ok(report)
}

/// Reads one WFDB record (header, signal and `.atr` annotations).
pub fn read_record(header_path: &Path) -> Result<(WfdbRecord, Vec<Vec<f64>>, Vec<Annotation>)> {
    let text = std::fs::read_to_string(header_path).map_err(|e| Error::file(header_path, e))?;
    let rec = parse_wfdb_header(&text)?;
    let dat = header_path.with_file_name(&rec.signals[0].file_name);
    let bytes = std::fs::read(&dat).map_err(|e| Error::file(&dat, e))?;
    let leads = read_signal(&bytes, &rec)?;
    let atr = header_path.with_extension("atr");
    let abytes = std::fs::read(&atr).map_err(|e| Error::file(&atr, e))?;
    let n = if rec.n_samples > 0 {
        Some(rec.n_samples as u64)
    } else {
        None
    };
    let anns = parse_annotations(&abytes, n)?;
    Ok((rec, leads, anns))
}

/// Ingests every WFDB record in a directory, cutting one window per
/// dangerous-rhythm changepoint. Augmentation runs on the raw-rate window
/// before resampling.
pub fn ingest_vfdb(in_dir: &Path, out: &Path, opts: &IngestOptions) -> Result<IngestReport> {
    let headers: Vec<PathBuf> = sorted_entries(in_dir)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "hea"))
        .collect();
    if headers.is_empty() {
        return Err(Error::Dataset(format!("no records found in {}", in_dir.display())));
    }
    let parsed: Vec<Vec<Parsed<EcgWindow>>> = headers
        .par_iter()
        .map(|h| {
            let name = stem(h);
            let (rec, leads, anns) = match read_record(h) {
                Ok(r) => r,
                Err(e) => return vec![Parsed::Failed(name, e.to_string())],
            };
            if leads.len() < 2 {
                return vec![Parsed::Failed(
                    name,
                    format!("record has {} signal(s), need 2", leads.len()),
                )];
            }
            let changepoints = extract_changepoints(&rhythm_events(&anns));
            changepoints
                .iter()
                .enumerate()
                .map(|(i, &cp)| {
                    let id = format!("{name}_{cp}");
                    let result = (|| -> Result<Vec<EcgWindow>> {
                        let raw = extract_window(&leads[..2], rec.fs, cp, &changepoints[..i], &id)?;
                        let mut out = vec![resample_window(&raw)?];
                        if opts.augment_count > 0 {
                            for v in augment::augment_ecg(&raw, opts.augment_count, &opts.ecg, opts.seed)? {
                                out.push(resample_window(&v)?);
                            }
                        }
                        Ok(out)
                    })();
                    match result {
                        Ok(w) => Parsed::Kept(w),
                        Err(e) => Parsed::Excluded(id, e.to_string()),
                    }
                })
                .collect()
        })
        .collect();
    let flat: Vec<Parsed<EcgWindow>> = parsed.into_iter().flatten().collect();
    finish_ingest(flat, Task::Ecg, out, opts, |w, s: &EcgWindow| w.push_ecg(s))
}
