//! Class probability vectors, category aggregation and classifier adapters.
//!
//! Two adapters ship with the crate. [`StubClassifier`] is a seeded stand-in
//! that looks up the ground-truth label of a crop and emits a peaked vector,
//! optionally confused. [`ExternalClassifier`] runs a user command per crop:
//! the crop is written as a PNG whose path is the last argument, and the
//! command prints one JSON array of `num_classes` numbers on stdout.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::GroundTruthBox;
use crate::frame::RgbdFrame;
use crate::geometry::{iou, BoundingBox};
use crate::proposals::{preprocess, PreprocessedCrop, Proposal, ProposalConfig, ProposalError};

#[derive(Debug, Error, PartialEq)]
pub enum ClassifyError {
    #[error("classifier unavailable: {0}")]
    Unavailable(String),
    #[error("invalid probability vector: {0}")]
    InvalidVector(String),
    #[error("class index {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },
    #[error("category {0:?} has no class indices")]
    EmptyCategory(String),
    #[error(transparent)]
    Crop(#[from] ProposalError),
}

/// Tolerance on `|Σp − 1|` for a vector to count as normalised.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;
/// Adapter outputs summing inside this band are renormalised, outside it
/// they are rejected.
pub const ADAPTER_SUM_BAND: (f64, f64) = (0.9, 1.1);

/// Non-negative vector summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ClassProbs(Vec<f64>);

impl ClassProbs {
    pub fn new(probs: Vec<f64>) -> Result<Self, ClassifyError> {
        let sum = check_entries(&probs)?;
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(ClassifyError::InvalidVector(format!("sums to {sum}")));
        }
        Ok(Self(probs))
    }

    /// Accept a vector from an adapter: already-normalised vectors are kept
    /// bit for bit, small drift is renormalised, anything else rejected.
    pub fn from_adapter(probs: Vec<f64>) -> Result<Self, ClassifyError> {
        let sum = check_entries(&probs)?;
        if (sum - 1.0).abs() <= NORMALIZATION_TOLERANCE {
            return Ok(Self(probs));
        }
        if sum < ADAPTER_SUM_BAND.0 || sum > ADAPTER_SUM_BAND.1 {
            return Err(ClassifyError::InvalidVector(format!("sums to {sum}, outside {ADAPTER_SUM_BAND:?}")));
        }
        Ok(Self(probs.into_iter().map(|p| p / sum).collect()))
    }

    pub(crate) fn from_normalized_unchecked(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn one_hot(classes: usize, index: usize) -> Self {
        let mut v = vec![0.0; classes];
        v[index] = 1.0;
        Self(v)
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0 / classes as f64; classes])
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// First index of the maximum.
    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0
    }

    pub fn max(&self) -> f64 {
        self.0[self.argmax()]
    }
}

fn check_entries(probs: &[f64]) -> Result<f64, ClassifyError> {
    if probs.is_empty() {
        return Err(ClassifyError::InvalidVector("empty".into()));
    }
    if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !p.is_finite() || **p < 0.0) {
        return Err(ClassifyError::InvalidVector(format!("entry {i} is {p}")));
    }
    Ok(probs.iter().sum())
}

impl TryFrom<Vec<f64>> for ClassProbs {
    type Error = ClassifyError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        ClassProbs::new(v)
    }
}

impl From<ClassProbs> for Vec<f64> {
    fn from(p: ClassProbs) -> Self {
        p.0
    }
}

/// A named set of classes whose probabilities are summed, e.g. several
/// fine-grained labels that together mean "box".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub class_indices: Vec<usize>,
}

impl CategorySpec {
    pub fn new(name: impl Into<String>, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut class_indices: Vec<usize> = indices.into_iter().collect();
        class_indices.sort_unstable();
        class_indices.dedup();
        Self { name: name.into(), class_indices }
    }

    pub fn validate(&self, classes: usize) -> Result<(), ClassifyError> {
        if self.class_indices.is_empty() {
            return Err(ClassifyError::EmptyCategory(self.name.clone()));
        }
        match self.class_indices.iter().find(|&&i| i >= classes) {
            Some(&index) => Err(ClassifyError::IndexOutOfRange { index, classes }),
            None => Ok(()),
        }
    }

    pub fn contains(&self, class_index: usize) -> bool {
        self.class_indices.contains(&class_index)
    }

    /// Union of several categories.
    pub fn union<'a>(name: impl Into<String>, specs: impl IntoIterator<Item = &'a CategorySpec>) -> Self {
        Self::new(name, specs.into_iter().flat_map(|s| s.class_indices.iter().copied()))
    }
}

pub fn aggregate_category(p: &ClassProbs, spec: &CategorySpec) -> Result<f64, ClassifyError> {
    spec.validate(p.num_classes())?;
    // Indices are unique after construction, but specs can be deserialised.
    let mut seen = std::collections::BTreeSet::new();
    Ok(spec.class_indices.iter().filter(|i| seen.insert(**i)).map(|&i| p.0[i]).sum())
}

/// What a classifier gets for one proposal. Pixels are materialised on
/// demand so adapters that do not look at them pay nothing.
pub struct CropRequest<'a> {
    pub frame: &'a RgbdFrame,
    pub proposal: &'a Proposal,
    pub preprocess: &'a ProposalConfig,
}

impl CropRequest<'_> {
    pub fn preprocessed(&self) -> Result<PreprocessedCrop, ProposalError> {
        preprocess(&self.frame.color, self.proposal, self.preprocess)
    }
}

pub trait Classifier: Send + Sync {
    fn num_classes(&self) -> usize;

    fn classify(&self, request: &CropRequest<'_>) -> Result<ClassProbs, ClassifyError>;

    /// Adapters that cannot take concurrent calls return `true`.
    fn single_flight(&self) -> bool {
        false
    }
}

/// Classify every proposal of a frame, in order. Calls run on several
/// threads unless the adapter is single-flight; the output order never
/// depends on scheduling.
pub fn classify_all(
    classifier: &dyn Classifier,
    frame: &RgbdFrame,
    proposals: &[Proposal],
    preprocess: &ProposalConfig,
) -> Result<Vec<ClassProbs>, ClassifyError> {
    let run = |p: &Proposal| classifier.classify(&CropRequest { frame, proposal: p, preprocess });
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(proposals.len());
    if classifier.single_flight() || threads <= 1 {
        return proposals.iter().map(run).collect();
    }
    let chunk = proposals.len().div_ceil(threads);
    let parts: Vec<Vec<Result<ClassProbs, ClassifyError>>> = std::thread::scope(|s| {
        let handles: Vec<_> = proposals
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(run).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("classifier thread panicked")).collect()
    });
    parts.into_iter().flatten().collect()
}

// ---------------------------------------------------------------------------
// Stub
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StubConfig {
    pub num_classes: usize,
    /// Mass placed on the predicted label.
    pub peak: f64,
    /// Probability that the peak lands on a wrong label.
    pub label_noise: f64,
    pub seed: u64,
    /// Label of crops that overlap no ground-truth object.
    pub background_class: usize,
    /// Minimum IOU with a ground-truth box for a crop to take its label.
    pub min_iou: f64,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self { num_classes: 1000, peak: 0.6, label_noise: 0.0, seed: 0, background_class: 0, min_iou: 0.5 }
    }
}

fn crop_key(seed: u64, frame_id: &str, instance_id: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    eat(&seed.to_le_bytes());
    eat(frame_id.as_bytes());
    eat(&[0xff]);
    eat(&(instance_id as u64).to_le_bytes());
    h
}

/// Peaked vector for one crop. The draw is keyed on
/// `(cfg.seed, frame_id, instance_id)`.
pub fn stub_classify(frame_id: &str, instance_id: usize, truth_label: usize, cfg: &StubConfig) -> Result<ClassProbs, ClassifyError> {
    let c = cfg.num_classes;
    if truth_label >= c {
        return Err(ClassifyError::IndexOutOfRange { index: truth_label, classes: c });
    }
    if c == 1 {
        return Ok(ClassProbs::one_hot(1, 0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(crop_key(cfg.seed, frame_id, instance_id));
    let correct = rng.gen::<f64>() >= cfg.label_noise;
    let label = if correct {
        truth_label
    } else {
        let r = rng.gen_range(0..c - 1);
        if r >= truth_label {
            r + 1
        } else {
            r
        }
    };
    let peak = cfg.peak.clamp(0.0, 1.0);
    let rest = (1.0 - peak) / (c - 1) as f64;
    let mut v = vec![rest; c];
    v[label] = peak;
    Ok(ClassProbs::from_normalized_unchecked(v))
}

/// Stub adapter holding per-frame ground truth.
#[derive(Debug, Clone, Default)]
pub struct StubClassifier {
    pub cfg: StubConfig,
    truth: BTreeMap<String, Vec<GroundTruthBox>>,
}

impl StubClassifier {
    pub fn new(cfg: StubConfig) -> Self {
        Self { cfg, truth: BTreeMap::new() }
    }

    pub fn with_ground_truth(mut self, frame_id: impl Into<String>, gts: Vec<GroundTruthBox>) -> Self {
        self.insert_ground_truth(frame_id, gts);
        self
    }

    pub fn insert_ground_truth(&mut self, frame_id: impl Into<String>, gts: Vec<GroundTruthBox>) {
        self.truth.insert(frame_id.into(), gts);
    }

    pub fn truth_label(&self, frame_id: &str, bbox: &BoundingBox) -> usize {
        let best = self.truth.get(frame_id).and_then(|gts| {
            gts.iter()
                .map(|g| (iou(bbox, &g.bbox), g.class_index))
                .filter(|(v, _)| *v >= self.cfg.min_iou)
                .fold(None, |best: Option<(f64, usize)>, cur| match best {
                    Some(b) if b.0 >= cur.0 => Some(b),
                    _ => Some(cur),
                })
        });
        best.map_or(self.cfg.background_class, |(_, c)| c)
    }
}

impl Classifier for StubClassifier {
    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn classify(&self, request: &CropRequest<'_>) -> Result<ClassProbs, ClassifyError> {
        let label = self.truth_label(&request.frame.frame_id, &request.proposal.bbox);
        stub_classify(&request.frame.frame_id, request.proposal.instance_id, label, &self.cfg)
    }
}

// ---------------------------------------------------------------------------
// External command
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalConfig {
    /// Program followed by its leading arguments; the crop path is appended.
    pub command: Vec<String>,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_true")]
    pub single_flight: bool,
}

fn default_classes() -> usize {
    1000
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone)]
pub struct ExternalClassifier {
    cfg: ExternalConfig,
    scratch: PathBuf,
}

impl ExternalClassifier {
    pub fn new(cfg: ExternalConfig) -> Result<Self, ClassifyError> {
        if cfg.command.is_empty() {
            return Err(ClassifyError::Unavailable("empty command".into()));
        }
        Ok(Self { cfg, scratch: std::env::temp_dir() })
    }

    /// Directory that receives the temporary crop files.
    pub fn with_scratch_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.scratch = dir.into();
        self
    }

    /// Run the command on an already written crop and parse its reply.
    pub fn classify_file(&self, png: &std::path::Path) -> Result<ClassProbs, ClassifyError> {
        let unavailable = ClassifyError::Unavailable;
        let output = Command::new(&self.cfg.command[0])
            .args(&self.cfg.command[1..])
            .arg(png)
            .output()
            .map_err(|e| unavailable(format!("failed to run {:?}: {e}", self.cfg.command[0])))?;
        if !output.status.success() {
            let stderr = String::from_utf8_lossy(&output.stderr);
            return Err(unavailable(format!("{} ({})", output.status, stderr.trim())));
        }
        let stdout = String::from_utf8_lossy(&output.stdout);
        let values: Vec<f64> = serde_json::from_str(stdout.trim())
            .map_err(|e| unavailable(format!("malformed output: {e}")))?;
        if values.len() != self.cfg.num_classes {
            return Err(unavailable(format!("expected {} classes, got {}", self.cfg.num_classes, values.len())));
        }
        ClassProbs::from_adapter(values).map_err(|e| unavailable(e.to_string()))
    }
}

impl Classifier for ExternalClassifier {
    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn classify(&self, request: &CropRequest<'_>) -> Result<ClassProbs, ClassifyError> {
        let crop = request.preprocessed()?;
        let file = tempfile::Builder::new()
            .prefix("crop-")
            .suffix(".png")
            .tempfile_in(&self.scratch)
            .map_err(|e| ClassifyError::Unavailable(format!("cannot create crop file: {e}")))?;
        crop.pixels
            .save_with_format(file.path(), image::ImageFormat::Png)
            .map_err(|e| ClassifyError::Unavailable(format!("cannot write crop: {e}")))?;
        self.classify_file(file.path())
    }

    fn single_flight(&self) -> bool {
        self.cfg.single_flight
    }
}
