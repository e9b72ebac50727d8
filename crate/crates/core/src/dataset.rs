//! On-disk layout of RGB-D scenes and detection files.
//!
//! ```text
//! <root>/scene_<id>/color.png          8-bit RGB
//! <root>/scene_<id>/depth.png          16-bit gray, raw depth units
//! <root>/scene_<id>/intrinsics.json    {fx, fy, cx, cy, depth_scale}
//! <root>/scene_<id>/annotations.json   [{box, class_index, object_type_id}]
//! ```
//!
//! Detections are stored one file per frame as `<frame_id>.detections.json`,
//! a JSON array of [`DetectionRecord`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::eval::{DetectionRecord, GroundTruthBox};
use crate::frame::{DepthImage, FrameError, RgbdFrame};
use crate::geometry::CameraIntrinsics;
use crate::io::{atomic_write, encode_png, write_json, write_png};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{frame}: cannot read {path}: {reason}")]
    Read { frame: String, path: PathBuf, reason: String },
    #[error("{frame}: {source}")]
    Frame { frame: String, source: FrameError },
    #[error("{frame}: annotation {index} is outside the {width}x{height} image")]
    AnnotationOutOfBounds { frame: String, index: usize, width: u32, height: u32 },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("cannot list {path}: {source}")]
    List { path: PathBuf, source: std::io::Error },
}

/// One annotated frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frame: RgbdFrame,
    pub ground_truth: Vec<GroundTruthBox>,
}

pub const COLOR_FILE: &str = "color.png";
pub const DEPTH_FILE: &str = "depth.png";
pub const INTRINSICS_FILE: &str = "intrinsics.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const DETECTIONS_SUFFIX: &str = ".detections.json";

fn write_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Write { path: path.to_path_buf(), source }
}

/// Write one frame under `root/<frame_id>/`. Returns the scene directory.
pub fn write_sample(root: &Path, frame: &RgbdFrame, ground_truth: &[GroundTruthBox]) -> Result<PathBuf, DatasetError> {
    let dir = root.join(&frame.frame_id);
    fs::create_dir_all(&dir).map_err(write_err(&dir))?;
    let p = dir.join(COLOR_FILE);
    write_png(&p, &frame.color).map_err(write_err(&p))?;
    let p = dir.join(DEPTH_FILE);
    encode_png(&frame.depth).and_then(|bytes| atomic_write(&p, &bytes)).map_err(write_err(&p))?;
    let p = dir.join(INTRINSICS_FILE);
    write_json(&p, &frame.intrinsics).map_err(write_err(&p))?;
    let p = dir.join(ANNOTATIONS_FILE);
    write_json(&p, ground_truth).map_err(write_err(&p))?;
    Ok(dir)
}

/// Load one scene directory; the frame id is the directory name.
pub fn load_sample(dir: &Path) -> Result<Sample, DatasetError> {
    let frame_id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let read_err = |path: &Path, reason: String| DatasetError::Read { frame: frame_id.clone(), path: path.to_path_buf(), reason };

    let p = dir.join(COLOR_FILE);
    let color = image::open(&p).map_err(|e| read_err(&p, e.to_string()))?;
    let color = match color {
        image::DynamicImage::ImageRgb8(c) => c,
        other => other.to_rgb8(),
    };

    let p = dir.join(DEPTH_FILE);
    let depth: DepthImage = match image::open(&p).map_err(|e| read_err(&p, e.to_string()))? {
        image::DynamicImage::ImageLuma16(d) => d,
        _ => return Err(read_err(&p, "depth must be a 16-bit single channel PNG".into())),
    };

    let read_json = |p: &Path| fs::read_to_string(p).map_err(|e| read_err(p, e.to_string()));
    let p = dir.join(INTRINSICS_FILE);
    let intrinsics: CameraIntrinsics = serde_json::from_str(&read_json(&p)?).map_err(|e| read_err(&p, e.to_string()))?;
    let p = dir.join(ANNOTATIONS_FILE);
    let ground_truth: Vec<GroundTruthBox> = serde_json::from_str(&read_json(&p)?).map_err(|e| read_err(&p, e.to_string()))?;

    let frame = RgbdFrame::new(frame_id.clone(), color, depth, intrinsics)
        .map_err(|source| DatasetError::Frame { frame: frame_id.clone(), source })?;
    let bounds = frame.bounds();
    if let Some(index) = ground_truth.iter().position(|g| !bounds.contains_box(&g.bbox)) {
        return Err(DatasetError::AnnotationOutOfBounds { frame: frame_id, index, width: frame.width(), height: frame.height() });
    }
    Ok(Sample { frame, ground_truth })
}

/// Every scene directory under `root` (those holding a `color.png`),
/// sorted by frame id.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>, DatasetError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|source| DatasetError::List { path: root.to_path_buf(), source })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join(COLOR_FILE).exists())
        .collect();
    dirs.sort();
    let mut samples = dirs.iter().map(|d| load_sample(d)).collect::<Result<Vec<_>, _>>()?;
    samples.sort_by(|a, b| a.frame.frame_id.cmp(&b.frame.frame_id));
    Ok(samples)
}

pub fn ground_truth_map(samples: &[Sample]) -> BTreeMap<String, Vec<GroundTruthBox>> {
    samples.iter().map(|s| (s.frame.frame_id.clone(), s.ground_truth.clone())).collect()
}

pub fn detections_path(dir: &Path, frame_id: &str) -> PathBuf {
    dir.join(format!("{frame_id}{DETECTIONS_SUFFIX}"))
}

pub fn write_detections(dir: &Path, frame_id: &str, records: &[DetectionRecord]) -> Result<PathBuf, DatasetError> {
    fs::create_dir_all(dir).map_err(write_err(dir))?;
    let p = detections_path(dir, frame_id);
    write_json(&p, records).map_err(write_err(&p))?;
    Ok(p)
}

/// All detection files in `dir`, concatenated in file-name order.
pub fn load_detections(dir: &Path) -> Result<Vec<DetectionRecord>, DatasetError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|source| DatasetError::List { path: dir.to_path_buf(), source })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().ends_with(DETECTIONS_SUFFIX)))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        let frame = f.file_name().unwrap().to_string_lossy().trim_end_matches(DETECTIONS_SUFFIX).to_string();
        let text = fs::read_to_string(&f).map_err(|e| DatasetError::Read { frame: frame.clone(), path: f.clone(), reason: e.to_string() })?;
        let records: Vec<DetectionRecord> =
            serde_json::from_str(&text).map_err(|e| DatasetError::Read { frame, path: f.clone(), reason: e.to_string() })?;
        out.extend(records);
    }
    Ok(out)
}
