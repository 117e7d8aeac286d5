//! On-disk dataset container.
//!
//! A container is a directory holding `meta.json`, `manifest.jsonl` (one
//! JSON record per sample) and `samples.f32`, the little-endian float32
//! sample tensors stored back to back. Samples are read lazily by offset.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

use super::{EcgWindow, ImageSample, Task};

pub const META_FILE: &str = "meta.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SAMPLES_FILE: &str = "samples.f32";
const FORMAT_NAME: &str = "coordloc-dataset";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerMeta {
    pub format: String,
    pub version: u32,
    pub task: Task,
    pub sample_shape: Vec<usize>,
    pub count: usize,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: usize,
    pub base_id: String,
    pub augment_index: u32,
    /// `[x, y]` pixel centre for images, `[seconds]` for ECG windows.
    pub target: Vec<f64>,
    /// Byte offset of the sample in `samples.f32`.
    pub offset: u64,
    /// Non-padded sample range of an ECG window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid: Option<[usize; 2]>,
}

/// Streams samples into a staging directory that is renamed into place by
/// [`DatasetWriter::finish`].
pub struct DatasetWriter {
    task: Task,
    target: PathBuf,
    staging: PathBuf,
    force: bool,
    manifest: BufWriter<File>,
    samples: BufWriter<File>,
    count: usize,
    offset: u64,
}

fn staging_path(target: &Path) -> Result<PathBuf> {
    let name = target
        .file_name()
        .ok_or_else(|| Error::invalid(format!("'{}' is not a usable directory name", target.display())))?;
    let parent = match target.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    Ok(parent.join(format!(".{}.partial", name.to_string_lossy())))
}

impl DatasetWriter {
    /// Fails if `dir` exists unless `force` is set.
    pub fn create(dir: &Path, task: Task, force: bool) -> Result<Self> {
        if dir.exists() && !force {
            return Err(Error::invalid(format!(
                "{} already exists (use --force to overwrite)",
                dir.display()
            )));
        }
        let staging = staging_path(dir)?;
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::file(&staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| Error::file(&staging, e))?;
        let open = |name: &str| {
            let p = staging.join(name);
            File::create(&p).map(BufWriter::new).map_err(|e| Error::file(p, e))
        };
        Ok(DatasetWriter {
            task,
            target: dir.to_path_buf(),
            manifest: open(MANIFEST_FILE)?,
            samples: open(SAMPLES_FILE)?,
            staging,
            force,
            count: 0,
            offset: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Directory receiving auxiliary files before the rename.
    pub fn staging_dir(&self) -> &Path {
        &self.staging
    }

    fn push_raw(
        &mut self,
        base_id: &str,
        augment_index: u32,
        target: Vec<f64>,
        valid: Option<[usize; 2]>,
        data: &[f32],
    ) -> Result<()> {
        let expected: usize = self.task.sample_shape().iter().product();
        if data.len() != expected {
            return Err(Error::shape(format!(
                "sample has {} values, container expects {expected}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Dataset(format!(
                "sample {base_id}/{augment_index} has non-finite values"
            )));
        }
        let rec = ManifestRecord {
            index: self.count,
            base_id: base_id.to_string(),
            augment_index,
            target,
            offset: self.offset,
            valid,
        };
        serde_json::to_writer(&mut self.manifest, &rec)?;
        self.manifest.write_all(b"\n")?;
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.samples.write_all(&bytes)?;
        self.offset += bytes.len() as u64;
        self.count += 1;
        Ok(())
    }

    pub fn push_image(&mut self, s: &ImageSample) -> Result<()> {
        if self.task != Task::Image {
            return Err(Error::Dataset("image sample pushed into an ECG container".into()));
        }
        self.push_raw(&s.base_id, s.augment_index, s.center.to_vec(), None, s.pixels.data())
    }

    /// Windows must already be resampled to 500 samples.
    pub fn push_ecg(&mut self, w: &EcgWindow) -> Result<()> {
        if self.task != Task::Ecg {
            return Err(Error::Dataset("ECG window pushed into an image container".into()));
        }
        let data: Vec<f32> = w.signal.iter().flatten().map(|&v| v as f32).collect();
        self.push_raw(
            &w.base_id,
            w.augment_index,
            vec![w.changepoint_s],
            Some([w.valid.0, w.valid.1]),
            &data,
        )
    }

    /// Writes `meta.json` and moves the container into place.
    pub fn finish(mut self) -> Result<PathBuf> {
        self.manifest.flush()?;
        self.samples.flush()?;
        let meta = ContainerMeta {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            task: self.task,
            sample_shape: self.task.sample_shape().to_vec(),
            count: self.count,
        };
        let p = self.staging.join(META_FILE);
        fs::write(&p, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::file(p, e))?;
        if self.target.exists() {
            if !self.force {
                return Err(Error::invalid(format!(
                    "{} appeared while writing",
                    self.target.display()
                )));
            }
            fs::remove_dir_all(&self.target).map_err(|e| Error::file(&self.target, e))?;
        }
        fs::rename(&self.staging, &self.target).map_err(|e| Error::file(&self.target, e))?;
        Ok(self.target.clone())
    }
}

/// Read-only view of a container.
#[derive(Debug)]
pub struct Dataset {
    pub meta: ContainerMeta,
    pub records: Vec<ManifestRecord>,
    dir: PathBuf,
    samples: Mutex<File>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let p = dir.join(META_FILE);
        let meta: ContainerMeta = serde_json::from_str(&fs::read_to_string(&p).map_err(|e| Error::file(&p, e))?)?;
        if meta.format != FORMAT_NAME || meta.version != FORMAT_VERSION {
            return Err(Error::Dataset(format!(
                "{}: unknown container format {} v{}",
                dir.display(),
                meta.format,
                meta.version
            )));
        }
        if meta.sample_shape != meta.task.sample_shape() {
            return Err(Error::Dataset(format!(
                "sample shape {:?} does not match task {:?}",
                meta.sample_shape, meta.task
            )));
        }
        let p = dir.join(MANIFEST_FILE);
        let reader = BufReader::new(File::open(&p).map_err(|e| Error::file(&p, e))?);
        let mut records = Vec::with_capacity(meta.count);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if rec.index != records.len() {
                return Err(Error::Dataset(format!(
                    "manifest line {} has index {}",
                    i + 1,
                    rec.index
                )));
            }
            if rec.target.len() != meta.task.target_dim() {
                return Err(Error::Dataset(format!(
                    "manifest line {}: target has {} values",
                    i + 1,
                    rec.target.len()
                )));
            }
            records.push(rec);
        }
        if records.len() != meta.count {
            return Err(Error::Dataset(format!(
                "manifest lists {} samples, meta declares {}",
                records.len(),
                meta.count
            )));
        }
        let p = dir.join(SAMPLES_FILE);
        let samples = File::open(&p).map_err(|e| Error::file(&p, e))?;
        let size = samples.metadata()?.len();
        let need = (meta.count * Self::sample_len_of(&meta) * 4) as u64;
        if size != need {
            return Err(Error::Truncated(format!(
                "{SAMPLES_FILE} holds {size} bytes, expected {need}"
            )));
        }
        Ok(Dataset {
            meta,
            records,
            dir: dir.to_path_buf(),
            samples: Mutex::new(samples),
        })
    }

    fn sample_len_of(meta: &ContainerMeta) -> usize {
        meta.sample_shape.iter().product()
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn task(&self) -> Task {
        self.meta.task
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        Self::sample_len_of(&self.meta)
    }

    /// Reads sample `index` into `out`, which must hold `sample_len()` values.
    pub fn read_into(&self, index: usize, out: &mut [f32]) -> Result<()> {
        let rec = self
            .records
            .get(index)
            .ok_or_else(|| Error::invalid(format!("sample index {index} out of range")))?;
        if out.len() != self.sample_len() {
            return Err(Error::shape(format!(
                "buffer of {} values for samples of {}",
                out.len(),
                self.sample_len()
            )));
        }
        let mut bytes = vec![0u8; out.len() * 4];
        {
            let mut f = self.samples.lock().unwrap_or_else(|e| e.into_inner());
            f.seek(SeekFrom::Start(rec.offset))?;
            f.read_exact(&mut bytes)?;
        }
        for (v, b) in out.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
        Ok(())
    }

    pub fn read(&self, index: usize) -> Result<Vec<f32>> {
        let mut out = vec![0.0; self.sample_len()];
        self.read_into(index, &mut out)?;
        Ok(out)
    }
}
