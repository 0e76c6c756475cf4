//! RF frame and sequence data model, plus the on-disk sequence and dataset
//! manifest formats.
//!
//! A sequence directory holds `manifest.json`, `pre.f32`, `post_0001.f32` …
//! and optionally `gt_0001.f32` …. Blobs are raw little-endian `f32`,
//! row-major `[row][col]`. Ground-truth blobs hold `d_y` followed by `d_x`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldops::{DisplacementField, Grid};

pub const SEQUENCE_FORMAT_VERSION: u32 = 1;
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Smallest accepted frame extent along either axis.
pub const MIN_FRAME_EXTENT: usize = 16;

/// One RF frame: `H` fast-time samples by `W` scan lines.
#[derive(Debug, Clone, PartialEq)]
pub struct RfFrame {
    pub samples: Grid,
    /// Meters per axial sample.
    pub axial_spacing: f64,
    /// Meters per scan line.
    pub lateral_spacing: f64,
}

impl RfFrame {
    pub fn new(samples: Grid, axial_spacing: f64, lateral_spacing: f64) -> Result<Self> {
        let frame = Self {
            samples,
            axial_spacing,
            lateral_spacing,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn height(&self) -> usize {
        self.samples.nrows()
    }

    pub fn width(&self) -> usize {
        self.samples.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.samples.dim()
    }

    /// Same spacings, new samples. Used by operations that preserve geometry.
    pub fn with_samples(&self, samples: Grid) -> Self {
        Self {
            samples,
            axial_spacing: self.axial_spacing,
            lateral_spacing: self.lateral_spacing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.shape();
        if h < MIN_FRAME_EXTENT || w < MIN_FRAME_EXTENT {
            return Err(Error::Shape(format!(
                "frame {h}x{w} is smaller than {MIN_FRAME_EXTENT}x{MIN_FRAME_EXTENT}"
            )));
        }
        if !(self.axial_spacing > 0.0 && self.lateral_spacing > 0.0) {
            return Err(Error::Parameter(format!(
                "spacings must be positive, got ({}, {})",
                self.axial_spacing, self.lateral_spacing
            )));
        }
        if self.samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::CorruptData("frame contains non-finite samples".into()));
        }
        Ok(())
    }
}

/// A reference frame followed by `T` post-compression frames.
#[derive(Debug, Clone, PartialEq)]
pub struct RfSequence {
    pub pre: RfFrame,
    pub posts: Vec<RfFrame>,
    pub ground_truth: Option<Vec<DisplacementField>>,
    pub source_id: String,
}

impl RfSequence {
    pub fn new(
        pre: RfFrame,
        posts: Vec<RfFrame>,
        ground_truth: Option<Vec<DisplacementField>>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let seq = Self {
            pre,
            posts,
            ground_truth,
            source_id: source_id.into(),
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pre.shape()
    }

    pub fn validate(&self) -> Result<()> {
        self.pre.validate()?;
        if self.posts.is_empty() {
            return Err(Error::InconsistentSequence(
                "sequence needs at least one post frame".into(),
            ));
        }
        let shape = self.pre.shape();
        for (i, post) in self.posts.iter().enumerate() {
            post.validate()?;
            if post.shape() != shape {
                return Err(Error::InconsistentSequence(format!(
                    "post {} has shape {:?}, reference has {:?}",
                    i + 1,
                    post.shape(),
                    shape
                )));
            }
            if post.axial_spacing != self.pre.axial_spacing
                || post.lateral_spacing != self.pre.lateral_spacing
            {
                return Err(Error::InconsistentSequence(format!(
                    "post {} spacing differs from the reference",
                    i + 1
                )));
            }
        }
        if let Some(gt) = &self.ground_truth {
            if gt.len() != self.posts.len() {
                return Err(Error::InconsistentSequence(format!(
                    "{} ground-truth fields for {} post frames",
                    gt.len(),
                    self.posts.len()
                )));
            }
            for (i, field) in gt.iter().enumerate() {
                if field.shape() != shape {
                    return Err(Error::InconsistentSequence(format!(
                        "ground truth {} has shape {:?}, frames have {:?}",
                        i + 1,
                        field.shape(),
                        shape
                    )));
                }
                field.validate()?;
            }
        }
        Ok(())
    }

    /// Keeps the first `frames` post frames (and their ground truth).
    pub fn truncated(&self, frames: usize) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Parameter("cannot truncate to zero frames".into()));
        }
        if frames > self.posts.len() {
            return Err(Error::InconsistentSequence(format!(
                "sequence {} has {} post frames, {} requested",
                self.source_id,
                self.posts.len(),
                frames
            )));
        }
        Ok(Self {
            pre: self.pre.clone(),
            posts: self.posts[..frames].to_vec(),
            ground_truth: self.ground_truth.as_ref().map(|gt| gt[..frames].to_vec()),
            source_id: self.source_id.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizeMode {
    Zscore,
    Maxabs,
}

/// Amplitude normalization of one frame.
///
/// `Zscore` maps to zero mean and unit population standard deviation and
/// refuses constant frames. `Maxabs` scales so that `max |sample| = 1`; an
/// all-zero frame is returned unchanged.
pub fn normalize_rf(frame: &RfFrame, mode: NormalizeMode) -> Result<RfFrame> {
    let samples = normalize_grid(&frame.samples, mode)?;
    Ok(frame.with_samples(samples))
}

pub(crate) fn normalize_grid(samples: &Grid, mode: NormalizeMode) -> Result<Grid> {
    match mode {
        NormalizeMode::Zscore => {
            let n = samples.len() as f64;
            let mean = samples.sum() / n;
            let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            let scale = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if !(std > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
                return Err(Error::DegenerateFrame(
                    "zscore normalization of a constant frame".into(),
                ));
            }
            Ok(samples.mapv(|v| (v - mean) / std))
        }
        NormalizeMode::Maxabs => {
            let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if peak == 0.0 {
                return Ok(samples.clone());
            }
            Ok(samples.mapv(|v| v / peak))
        }
    }
}

/// `(I_pre, I_post^t)` for t = 1..T, always against the first frame.
pub fn make_pairs(seq: &RfSequence) -> Vec<(&RfFrame, &RfFrame)> {
    seq.posts.iter().map(|post| (&seq.pre, post)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SequenceManifest {
    format_version: u32,
    #[serde(rename = "H")]
    height: usize,
    #[serde(rename = "W")]
    width: usize,
    #[serde(rename = "T")]
    frames: usize,
    axial_spacing: f64,
    lateral_spacing: f64,
    has_ground_truth: bool,
    source_id: String,
}

pub fn post_blob_name(t: usize) -> String {
    format!("post_{t:04}.f32")
}

pub fn gt_blob_name(t: usize) -> String {
    format!("gt_{t:04}.f32")
}

pub fn save_sequence(seq: &RfSequence, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    seq.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = seq.shape();
    let manifest = SequenceManifest {
        format_version: SEQUENCE_FORMAT_VERSION,
        height: h,
        width: w,
        frames: seq.len(),
        axial_spacing: seq.pre.axial_spacing,
        lateral_spacing: seq.pre.lateral_spacing,
        has_ground_truth: seq.ground_truth.is_some(),
        source_id: seq.source_id.clone(),
    };
    remove_stale_blobs(dir, seq.len(), seq.ground_truth.is_some())?;
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_grid_blob(&dir.join("pre.f32"), &[&seq.pre.samples])?;
    for (i, post) in seq.posts.iter().enumerate() {
        write_grid_blob(&dir.join(post_blob_name(i + 1)), &[&post.samples])?;
    }
    if let Some(gt) = &seq.ground_truth {
        for (i, field) in gt.iter().enumerate() {
            write_grid_blob(&dir.join(gt_blob_name(i + 1)), &[&field.d_y, &field.d_x])?;
        }
    }
    Ok(())
}

fn remove_stale_blobs(dir: &Path, frames: usize, keep_gt: bool) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let stale = if let Some(idx) = blob_index(name, "post_") {
            idx == 0 || idx > frames
        } else if let Some(idx) = blob_index(name, "gt_") {
            !keep_gt || idx == 0 || idx > frames
        } else {
            false
        };
        if stale {
            let path = entry.path();
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

fn blob_index(name: &str, prefix: &str) -> Option<usize> {
    let digits = name.strip_prefix(prefix)?.strip_suffix(".f32")?;
    if digits.len() != 4 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

pub fn load_sequence(dir: impl AsRef<Path>) -> Result<RfSequence> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.is_file() {
        return Err(Error::Format(format!(
            "missing manifest.json in {}",
            dir.display()
        )));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: SequenceManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format_version != SEQUENCE_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported sequence format_version {}",
            manifest.format_version
        )));
    }
    if manifest.frames == 0 {
        return Err(Error::Format("manifest declares T = 0".into()));
    }
    let (h, w) = (manifest.height, manifest.width);
    let frame = |name: &str| -> Result<RfFrame> {
        let mut grids = read_grid_blob(&dir.join(name), h, w, 1)?;
        RfFrame::new(
            grids.remove(0),
            manifest.axial_spacing,
            manifest.lateral_spacing,
        )
    };
    let pre = frame("pre.f32")?;
    let posts = (1..=manifest.frames)
        .map(|t| frame(&post_blob_name(t)))
        .collect::<Result<Vec<_>>>()?;
    let ground_truth = if manifest.has_ground_truth {
        let fields = (1..=manifest.frames)
            .map(|t| {
                let mut grids = read_grid_blob(&dir.join(gt_blob_name(t)), h, w, 2)?;
                let d_x = grids.pop().expect("two grids");
                let d_y = grids.pop().expect("two grids");
                Ok(DisplacementField { d_y, d_x })
            })
            .collect::<Result<Vec<_>>>()?;
        Some(fields)
    } else {
        None
    };
    RfSequence::new(pre, posts, ground_truth, manifest.source_id)
}

/// Writes grids back to back as little-endian `f32`.
pub fn write_grid_blob(path: &Path, grids: &[&Grid]) -> Result<()> {
    let total: usize = grids.iter().map(|g| g.len()).sum();
    let mut bytes = Vec::with_capacity(total * 4);
    for grid in grids {
        for v in grid.iter() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads `count` consecutive `h x w` grids from a raw `f32` blob.
pub fn read_grid_blob(path: &Path, h: usize, w: usize, count: usize) -> Result<Vec<Grid>> {
    if !path.is_file() {
        return Err(Error::Format(format!("missing blob {}", path.display())));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = h * w * count * 4;
    if bytes.len() != expected {
        return Err(Error::InconsistentSequence(format!(
            "{} holds {} bytes, expected {expected} for {count} x {h}x{w}",
            path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::CorruptData(format!(
            "{} contains non-finite values",
            path.display()
        )));
    }
    Ok(values
        .chunks_exact(h * w)
        .map(|chunk| Array2::from_shape_vec((h, w), chunk.to_vec()).expect("chunk size"))
        .collect())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiKind {
    Target,
    Background,
}

/// Elliptical region of interest in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec {
    /// (row, col)
    pub center: (f64, f64),
    /// (a_rows, b_cols)
    pub semi_axes: (f64, f64),
    pub kind: RoiKind,
}

impl RoiSpec {
    pub fn new(center: (f64, f64), semi_axes: (f64, f64), kind: RoiKind) -> Self {
        Self {
            center,
            semi_axes,
            kind,
        }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        let dr = (row as f64 - self.center.0) / self.semi_axes.0;
        let dc = (col as f64 - self.center.1) / self.semi_axes.1;
        dr * dr + dc * dc <= 1.0
    }

    /// Pixels inside the ellipse, row-major order.
    pub fn pixels(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let r_lo = (self.center.0 - self.semi_axes.0).floor().max(0.0) as usize;
        let c_lo = (self.center.1 - self.semi_axes.1).floor().max(0.0) as usize;
        let r_hi = ((self.center.0 + self.semi_axes.0).ceil() as usize).min(h.saturating_sub(1));
        let c_hi = ((self.center.1 + self.semi_axes.1).ceil() as usize).min(w.saturating_sub(1));
        let mut out = Vec::new();
        for r in r_lo..=r_hi {
            for c in c_lo..=c_hi {
                if self.contains(r, c) {
                    out.push((r, c));
                }
            }
        }
        out
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let (a, b) = self.semi_axes;
        if !(a >= 2.0 && b >= 2.0) {
            return Err(Error::Parameter(format!(
                "ROI semi-axes ({a}, {b}) must be at least 2 px"
            )));
        }
        let (r, c) = self.center;
        if r - a < 0.0 || c - b < 0.0 || r + a > (h - 1) as f64 || c + b > (w - 1) as f64 {
            return Err(Error::Parameter(format!(
                "ROI centered at ({r}, {c}) with semi-axes ({a}, {b}) leaves the {h}x{w} frame"
            )));
        }
        Ok(())
    }
}

/// Target and background ellipses of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiPair {
    pub target: RoiSpec,
    pub background: RoiSpec,
}

impl RoiPair {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.target.kind != RoiKind::Target || self.background.kind != RoiKind::Background {
            return Err(Error::Parameter("ROI pair kinds must be (target, background)".into()));
        }
        self.target.validate(h, w)?;
        self.background.validate(h, w)?;
        let overlap = self
            .target
            .pixels(h, w)
            .into_iter()
            .any(|(r, c)| self.background.contains(r, c));
        if overlap {
            return Err(Error::Parameter("target and background ROIs overlap".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rois: Option<RoiPair>,
}

/// List of sequence directories with split tags. Relative entry paths are
/// resolved against the manifest file's directory on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ManifestFile {
    Object(DatasetManifest),
    Array(Vec<ManifestEntry>),
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self {
            format_version: DATASET_FORMAT_VERSION,
            entries,
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: ManifestFile = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut manifest = match parsed {
            ManifestFile::Object(m) => m,
            ManifestFile::Array(entries) => DatasetManifest::new(entries),
        };
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset format_version {}",
                manifest.format_version
            )));
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for entry in &mut manifest.entries {
            if entry.path.is_relative() {
                entry.path = base.join(&entry.path);
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for entry in &self.entries {
            if !seen.insert(&entry.path) {
                return Err(Error::Format(format!(
                    "duplicate manifest path {}",
                    entry.path.display()
                )));
            }
            if !entry.path.join("manifest.json").is_file() {
                return Err(Error::Format(format!(
                    "manifest entry {} is not a sequence directory",
                    entry.path.display()
                )));
            }
        }
        Ok(())
    }
}
