//! Domain types and dataset manifest loading.
//!
//! A dataset on disk is a `manifest.json` plus one raw feature file per
//! video and stream. Feature files are row-major little-endian f32, shape
//! `num_snippets x d`, with the dimensions declared in the manifest. All
//! timing throughout the crate is in snippet units.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One annotated action: a half-open interval `[start, end)` in snippets.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionInstance {
    pub start: f64,
    pub end: f64,
    pub class_name: String,
}

impl ActionInstance {
    pub fn new(start: f64, end: f64, class_name: impl Into<String>) -> Result<Self> {
        let instance = ActionInstance {
            start,
            end,
            class_name: class_name.into(),
        };
        instance.check()?;
        Ok(instance)
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn check(&self) -> Result<()> {
        if !(self.start >= 0.0 && self.start < self.end) {
            return Err(Error::validation(format!(
                "instance [{}, {}) violates 0 <= start < end",
                self.start, self.end
            )));
        }
        if self.class_name.is_empty() {
            return Err(Error::validation("instance class name is empty"));
        }
        Ok(())
    }
}

/// Train/test membership of a video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Train,
    Test,
}

/// Snippet-level features and ground truth for one video.
///
/// `rgb` and `flow` always share the same row count. When the loader pads,
/// rows at index `valid_len..` are zero and masked out downstream.
#[derive(Debug, Clone)]
pub struct VideoFeatures {
    pub video_id: String,
    pub rgb: Array2<f64>,
    pub flow: Array2<f64>,
    pub annotations: Vec<ActionInstance>,
    pub subset: Subset,
    /// Number of real (unpadded) snippets.
    pub valid_len: usize,
}

impl VideoFeatures {
    /// Total rows including padding.
    pub fn num_snippets(&self) -> usize {
        self.rgb.nrows()
    }
}

/// Seeded partition of category names into base (seen) and novel (unseen),
/// with optional per-class support exemplars for few-shot runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub base: Vec<String>,
    pub novel: Vec<String>,
    #[serde(default)]
    pub support: BTreeMap<String, Vec<String>>,
}

impl SplitSpec {
    pub fn check(&self) -> Result<()> {
        let base: BTreeSet<_> = self.base.iter().collect();
        let novel: BTreeSet<_> = self.novel.iter().collect();
        if let Some(shared) = base.intersection(&novel).next() {
            return Err(Error::validation(format!(
                "split has class {shared} in both base and novel"
            )));
        }
        for class in self.support.keys() {
            if !novel.contains(class) {
                return Err(Error::validation(format!(
                    "support class {class} is not a novel class"
                )));
            }
        }
        Ok(())
    }

    pub fn is_novel(&self, class: &str) -> bool {
        self.novel.iter().any(|c| c == class)
    }
}

/// Read one or more splits from a JSON file holding either a single object
/// or an array of them.
pub fn load_splits(path: &Path) -> Result<Vec<SplitSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    let splits: Vec<SplitSpec> = if value.is_array() {
        serde_json::from_value(value).map_err(|e| Error::parse(path, e.to_string()))?
    } else {
        vec![serde_json::from_value(value).map_err(|e| Error::parse(path, e.to_string()))?]
    };
    for split in &splits {
        split.check()?;
    }
    Ok(splits)
}

/// Write splits: a single object for one split, an array otherwise.
pub fn save_splits(path: &Path, splits: &[SplitSpec]) -> Result<()> {
    let text = if splits.len() == 1 {
        serde_json::to_string_pretty(&splits[0]).expect("split serializes")
    } else {
        serde_json::to_string_pretty(splits).expect("splits serialize")
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `manifest.json` annotation entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestAnnotation {
    pub start: f64,
    pub end: f64,
    pub class: String,
}

/// `manifest.json` video entry. File paths are relative to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestVideo {
    pub id: String,
    pub num_snippets: usize,
    pub rgb_file: String,
    pub flow_file: String,
    pub subset: Subset,
    pub annotations: Vec<ManifestAnnotation>,
}

/// Top-level `manifest.json` schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub d_rgb: usize,
    pub d_flow: usize,
    pub videos: Vec<ManifestVideo>,
    /// Free-form generator metadata (e.g. achieved text/visual coupling).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Write a matrix as row-major little-endian f32.
pub fn write_f32_matrix(path: &Path, matrix: &Array2<f64>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    for value in matrix.iter() {
        writer
            .write_all(&(*value as f32).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    writer.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    Ok(())
}

/// Read a row-major little-endian f32 matrix with an exact byte-count check.
pub fn read_f32_matrix(path: &Path, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::DimMismatch {
            what: path.display().to_string(),
            expected: format!("{expected} bytes ({rows}x{cols} f32)"),
            actual: format!("{} bytes", bytes.len()),
        });
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in bytes.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape matches data length"))
}

fn pad_matrix(matrix: Array2<f64>, target_rows: usize) -> Array2<f64> {
    let (rows, cols) = matrix.dim();
    if rows >= target_rows {
        return matrix;
    }
    let mut padded = Array2::zeros((target_rows, cols));
    padded.slice_mut(ndarray::s![..rows, ..]).assign(&matrix);
    padded
}

/// Load and validate every video listed in a manifest, in manifest order.
///
/// `pad_to` optionally zero-pads all videos to a fixed snippet count; rows
/// past each video's true length stay masked downstream.
pub fn load_dataset(manifest_path: &Path, pad_to: Option<usize>) -> Result<Vec<VideoFeatures>> {
    let manifest = Manifest::load(manifest_path)?;
    load_videos(manifest_path, &manifest, pad_to)
}

/// As [`load_dataset`] but with the manifest already parsed.
pub fn load_videos(
    manifest_path: &Path,
    manifest: &Manifest,
    pad_to: Option<usize>,
) -> Result<Vec<VideoFeatures>> {
    let base_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let class_set: BTreeSet<&str> = manifest.classes.iter().map(|s| s.as_str()).collect();
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        let t = entry.num_snippets;
        if t < 1 {
            return Err(Error::validation(format!(
                "video {}: num_snippets must be >= 1",
                entry.id
            )));
        }
        if let Some(target) = pad_to {
            if t > target {
                return Err(Error::validation(format!(
                    "video {}: {t} snippets exceed pad_to={target}",
                    entry.id
                )));
            }
        }
        let rgb = read_f32_matrix(&base_dir.join(&entry.rgb_file), t, manifest.d_rgb)?;
        let flow = read_f32_matrix(&base_dir.join(&entry.flow_file), t, manifest.d_flow)?;
        let mut annotations = Vec::with_capacity(entry.annotations.len());
        for ann in &entry.annotations {
            let instance = ActionInstance::new(ann.start, ann.end, ann.class.clone())
                .map_err(|e| Error::validation(format!("video {}: {e}", entry.id)))?;
            if instance.end > t as f64 {
                return Err(Error::validation(format!(
                    "video {}: annotation [{}, {}) ends past {} snippets",
                    entry.id, ann.start, ann.end, t
                )));
            }
            if !class_set.contains(instance.class_name.as_str()) {
                return Err(Error::validation(format!(
                    "video {}: class {} not in manifest class list",
                    entry.id, instance.class_name
                )));
            }
            annotations.push(instance);
        }
        let (rgb, flow) = match pad_to {
            Some(target) => (pad_matrix(rgb, target), pad_matrix(flow, target)),
            None => (rgb, flow),
        };
        videos.push(VideoFeatures {
            video_id: entry.id.clone(),
            rgb,
            flow,
            annotations,
            subset: entry.subset,
            valid_len: t,
        });
    }
    Ok(videos)
}

/// Load a descriptions file: `{class: {"what": ..., "where": ..., "how": ...}}`.
pub fn load_descriptions(path: &Path) -> Result<BTreeMap<String, ClassDescription>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn save_descriptions(path: &Path, descriptions: &BTreeMap<String, ClassDescription>) -> Result<()> {
    let text = serde_json::to_string_pretty(descriptions).expect("descriptions serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The three attribute answers describing one class.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ClassDescription {
    pub what: String,
    #[serde(rename = "where")]
    pub where_: String,
    pub how: String,
}
