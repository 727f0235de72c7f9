//! Core sequence tensors, the on-disk container format and the reflectance
//! normalization contract shared by every other module.
//!
//! A sample is one co-registered image time series:
//!
//! - `images`: `(T, C, H, W)` reflectance volume, values in `[0, 1]`,
//! - `mask`: `(T, 1, H, W)` validity volume, `1` = observed, `0` = missing,
//! - `days`: acquisition day-of-year per frame, strictly increasing,
//! - `channel_roles`: which channels are reconstruction targets and which are
//!   input-only auxiliary channels.
//!
//! On disk a sample is a directory with a JSON metadata file and two raw
//! little-endian binary payloads (`f32` images, `u8` masks); see
//! `docs/formats.md` for the exact byte layout. Frames that are missing
//! entirely are stored already imprinted (`images = 1.0`, `mask = 0`), so no
//! undefined values ever enter the pipeline.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Sensor-unit ceiling used by [`normalize_reflectance`].
pub const REFLECTANCE_SCALE: f32 = 10_000.0;

pub const CONTAINER_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelRole {
    /// Channel is regressed by the model and enters the loss and metrics.
    Reconstruct,
    /// Input-only channel (e.g. radar amplitudes); never imprinted, never
    /// reconstructed.
    Auxiliary,
}

/// One co-registered multi-spectral image time series.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// Reflectance volume `(T, C, H, W)` in `[0, 1]`.
    pub images: Array4<f32>,
    /// Validity volume `(T, 1, H, W)`; `1` = valid observation, `0` = missing.
    pub mask: Array4<u8>,
    /// Acquisition day-of-year per frame, in `[1, 366]`, strictly increasing.
    pub days: Vec<u32>,
    /// Role per channel; length `C`, at least one `Reconstruct`.
    pub channel_roles: Vec<ChannelRole>,
    pub sample_id: String,
}

impl SampleRecord {
    pub fn t_len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[3]
    }

    /// Indices of channels tagged [`ChannelRole::Reconstruct`], in order.
    pub fn reconstruct_indices(&self) -> Vec<usize> {
        self.channel_roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == ChannelRole::Reconstruct)
            .map(|(i, _)| i)
            .collect()
    }

    /// Copy of the frame range `[start, end)`.
    pub fn slice_frames(&self, start: usize, end: usize) -> SampleRecord {
        use ndarray::s;
        SampleRecord {
            images: self.images.slice(s![start..end, .., .., ..]).to_owned(),
            mask: self.mask.slice(s![start..end, .., .., ..]).to_owned(),
            days: self.days[start..end].to_vec(),
            channel_roles: self.channel_roles.clone(),
            sample_id: self.sample_id.clone(),
        }
    }
}

/// One violated [`SampleRecord`] invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    ImageOutOfRange { index: usize },
    ImageNotFinite { index: usize },
    MaskNotBinary { index: usize },
    DaysNotStrictlyIncreasing { frame: usize },
    DayOutOfRange { frame: usize, day: u32 },
    DaysLengthMismatch { expected: usize, actual: usize },
    MaskShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },
    ChannelRolesLengthMismatch { expected: usize, actual: usize },
    NoReconstructChannel,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::ImageOutOfRange { index } => {
                write!(f, "image value outside [0,1] at flat index {index}")
            }
            Violation::ImageNotFinite { index } => {
                write!(f, "image value not finite at flat index {index}")
            }
            Violation::MaskNotBinary { index } => {
                write!(f, "mask not binary at flat index {index}")
            }
            Violation::DaysNotStrictlyIncreasing { frame } => {
                write!(f, "days not strictly increasing at frame {frame}")
            }
            Violation::DayOutOfRange { frame, day } => {
                write!(f, "day {day} outside [1,366] at frame {frame}")
            }
            Violation::DaysLengthMismatch { expected, actual } => {
                write!(f, "days length {actual}, expected {expected}")
            }
            Violation::MaskShapeMismatch { expected, actual } => {
                write!(f, "mask shape {actual:?}, expected {expected:?}")
            }
            Violation::ChannelRolesLengthMismatch { expected, actual } => {
                write!(f, "channel_roles length {actual}, expected {expected}")
            }
            Violation::NoReconstructChannel => write!(f, "no channel tagged reconstruct"),
        }
    }
}

/// Result of [`validate_sample`]; violations are report content, not errors.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub sample_id: String,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Clip a raw sensor-unit volume to `[0, 10 000]` and rescale to `[0, 1]`.
///
/// A volume whose values already all lie in `[0, 1]` is treated as normalized
/// and returned unchanged, which makes the operation idempotent.
///
/// Fails on the first non-finite input value, naming its flat index.
pub fn normalize_reflectance(raw: &Array4<f32>) -> Result<Array4<f32>> {
    let slice = raw
        .as_slice()
        .expect("reflectance volume must be contiguous");
    let mut already_unit = true;
    for (i, &v) in slice.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                index: i,
                value: v as f64,
            });
        }
        if !(0.0..=1.0).contains(&v) {
            already_unit = false;
        }
    }
    if already_unit {
        return Ok(raw.clone());
    }
    Ok(raw.mapv(|v| v.clamp(0.0, REFLECTANCE_SCALE) / REFLECTANCE_SCALE))
}

/// Check every [`SampleRecord`] invariant and report all violations.
///
/// Deterministic: violations are listed in a fixed order (shape consistency,
/// image range, mask binarity, day ordering, channel roles). Only the first
/// offending index per category is reported.
pub fn validate_sample(record: &SampleRecord) -> ValidationReport {
    let mut violations = Vec::new();
    let (t, c, h, w) = (
        record.t_len(),
        record.channels(),
        record.height(),
        record.width(),
    );

    let mask_shape = record.mask.shape().to_vec();
    if mask_shape != [t, 1, h, w] {
        violations.push(Violation::MaskShapeMismatch {
            expected: vec![t, 1, h, w],
            actual: mask_shape,
        });
    }
    if record.days.len() != t {
        violations.push(Violation::DaysLengthMismatch {
            expected: t,
            actual: record.days.len(),
        });
    }

    if let Some(slice) = record.images.as_slice() {
        if let Some(i) = slice.iter().position(|v| !v.is_finite()) {
            violations.push(Violation::ImageNotFinite { index: i });
        }
        if let Some(i) = slice
            .iter()
            .position(|v| v.is_finite() && !(0.0..=1.0).contains(v))
        {
            violations.push(Violation::ImageOutOfRange { index: i });
        }
    }
    if let Some(slice) = record.mask.as_slice() {
        if let Some(i) = slice.iter().position(|&v| v > 1) {
            violations.push(Violation::MaskNotBinary { index: i });
        }
    }

    for frame in 1..record.days.len() {
        if record.days[frame] <= record.days[frame - 1] {
            violations.push(Violation::DaysNotStrictlyIncreasing { frame });
            break;
        }
    }
    if let Some((frame, &day)) = record
        .days
        .iter()
        .enumerate()
        .find(|(_, &d)| !(1..=366).contains(&d))
    {
        violations.push(Violation::DayOutOfRange { frame, day });
    }

    if record.channel_roles.len() != c {
        violations.push(Violation::ChannelRolesLengthMismatch {
            expected: c,
            actual: record.channel_roles.len(),
        });
    }
    if !record
        .channel_roles
        .iter()
        .any(|r| *r == ChannelRole::Reconstruct)
    {
        violations.push(Violation::NoReconstructChannel);
    }

    ValidationReport {
        sample_id: record.sample_id.clone(),
        violations,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleMeta {
    format_version: u32,
    sample_id: String,
    t_len: usize,
    channels: usize,
    height: usize,
    width: usize,
    days: Vec<u32>,
    channel_roles: Vec<ChannelRole>,
    images_sha256: String,
    mask_sha256: String,
}

const META_FILE: &str = "meta.json";
const IMAGES_FILE: &str = "images.bin";
const MASK_FILE: &str = "mask.bin";

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn images_to_bytes(images: &Array4<f32>) -> Vec<u8> {
    let slice = images.as_slice().expect("images must be contiguous");
    let mut bytes = Vec::with_capacity(slice.len() * 4);
    for v in slice {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn bytes_to_images(bytes: &[u8], shape: (usize, usize, usize, usize)) -> Array4<f32> {
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array4::from_shape_vec(shape, values).expect("payload length checked by caller")
}

/// Write `record` into directory `path` (created if absent).
///
/// Refuses records that fail [`validate_sample`]; the directory layout is the
/// toolkit's canonical dataset interchange format.
pub fn save_sample(record: &SampleRecord, path: &Path) -> Result<()> {
    let report = validate_sample(record);
    if !report.pass() {
        return Err(Error::InvalidRecord {
            id: record.sample_id.clone(),
            violations: report.violations.iter().map(|v| v.to_string()).collect(),
        });
    }

    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;

    let image_bytes = images_to_bytes(&record.images);
    let mask_bytes: Vec<u8> = record.mask.as_slice().expect("contiguous mask").to_vec();

    let meta = SampleMeta {
        format_version: CONTAINER_FORMAT_VERSION,
        sample_id: record.sample_id.clone(),
        t_len: record.t_len(),
        channels: record.channels(),
        height: record.height(),
        width: record.width(),
        days: record.days.clone(),
        channel_roles: record.channel_roles.clone(),
        images_sha256: sha256_hex(&image_bytes),
        mask_sha256: sha256_hex(&mask_bytes),
    };

    let meta_path = path.join(META_FILE);
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;

    let images_path = path.join(IMAGES_FILE);
    let mut f = fs::File::create(&images_path).map_err(|e| Error::io(&images_path, e))?;
    f.write_all(&image_bytes)
        .map_err(|e| Error::io(&images_path, e))?;

    let mask_path = path.join(MASK_FILE);
    let mut f = fs::File::create(&mask_path).map_err(|e| Error::io(&mask_path, e))?;
    f.write_all(&mask_bytes)
        .map_err(|e| Error::io(&mask_path, e))?;

    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

/// Load a sample directory written by [`save_sample`].
///
/// Structural problems are reported distinctly: missing files as i/o errors,
/// truncated or oversized payloads as shape mismatches, corrupted payloads as
/// checksum failures.
pub fn load_sample(path: &Path) -> Result<SampleRecord> {
    let meta_path = path.join(META_FILE);
    let meta_bytes = read_file(&meta_path)?;
    let meta: SampleMeta = serde_json::from_slice(&meta_bytes).map_err(|e| Error::Metadata {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    if meta.format_version != CONTAINER_FORMAT_VERSION {
        return Err(Error::Metadata {
            path: meta_path,
            reason: format!("unsupported format version {}", meta.format_version),
        });
    }

    let (t, c, h, w) = (meta.t_len, meta.channels, meta.height, meta.width);

    let images_path = path.join(IMAGES_FILE);
    let image_bytes = read_file(&images_path)?;
    let expected_len = t * c * h * w * 4;
    if image_bytes.len() != expected_len {
        return Err(Error::shape(
            format!("{}", images_path.display()),
            format!("{expected_len} bytes"),
            format!("{} bytes", image_bytes.len()),
        ));
    }
    let actual = sha256_hex(&image_bytes);
    if actual != meta.images_sha256 {
        return Err(Error::Checksum {
            path: images_path,
            expected: meta.images_sha256,
            actual,
        });
    }

    let mask_path = path.join(MASK_FILE);
    let mask_bytes = read_file(&mask_path)?;
    if mask_bytes.len() != t * h * w {
        return Err(Error::shape(
            format!("{}", mask_path.display()),
            format!("{} bytes", t * h * w),
            format!("{} bytes", mask_bytes.len()),
        ));
    }
    let actual = sha256_hex(&mask_bytes);
    if actual != meta.mask_sha256 {
        return Err(Error::Checksum {
            path: mask_path,
            expected: meta.mask_sha256,
            actual,
        });
    }

    Ok(SampleRecord {
        images: bytes_to_images(&image_bytes, (t, c, h, w)),
        mask: Array4::from_shape_vec((t, 1, h, w), mask_bytes).expect("length checked"),
        days: meta.days,
        channel_roles: meta.channel_roles,
        sample_id: meta.sample_id,
    })
}

/// Index of one dataset split; samples live under `<root>/samples/<id>/`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub split: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<String>,
    /// Dataset root; set to the manifest's directory on load.
    #[serde(default)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(split: &str, channels: usize, height: usize, width: usize) -> Self {
        DatasetManifest {
            format_version: CONTAINER_FORMAT_VERSION,
            split: split.to_string(),
            channels,
            height,
            width,
            samples: Vec::new(),
            root: PathBuf::new(),
        }
    }

    pub fn file_name(split: &str) -> String {
        format!("manifest-{split}.json")
    }

    pub fn sample_dir(&self, id: &str) -> PathBuf {
        self.root.join("samples").join(id)
    }

    /// Save under `<root>/manifest-<split>.json`.
    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(Self::file_name(&self.split));
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut manifest: DatasetManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::Metadata {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        manifest.root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(manifest)
    }

    /// Load one listed sample, checking that it matches the manifest shape.
    pub fn load_sample(&self, id: &str) -> Result<SampleRecord> {
        if !self.samples.iter().any(|s| s == id) {
            return Err(Error::MissingSample {
                id: id.to_string(),
                root: self.root.clone(),
            });
        }
        let dir = self.sample_dir(id);
        if !dir.is_dir() {
            return Err(Error::MissingSample {
                id: id.to_string(),
                root: self.root.clone(),
            });
        }
        let record = load_sample(&dir)?;
        let (c, h, w) = (record.channels(), record.height(), record.width());
        if (c, h, w) != (self.channels, self.height, self.width) {
            return Err(Error::shape(
                format!("sample {id}"),
                format!("C×H×W = {}×{}×{}", self.channels, self.height, self.width),
                format!("C×H×W = {c}×{h}×{w}"),
            ));
        }
        Ok(record)
    }
}
