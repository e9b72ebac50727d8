//! Configuration and end-to-end runs: discovery-driven proposals, joint
//! classification, the window baseline, and evaluation over a dataset.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{run_baseline, BaselineConfig, BaselineError};
use crate::classify::{
    aggregate_category, classify_all, CategorySpec, ClassProbs, Classifier, ClassifyError, ExternalClassifier, ExternalConfig, StubClassifier,
    StubConfig,
};
use crate::dataset::Sample;
use crate::discovery::{discover, Discovery, DiscoveryConfig, DiscoveryError};
use crate::eval::{
    area_under_curve, dataset_counts, pr_curve_dataset, DetectionRecord, EvalCounts, EvalError, GroundTruthBox,
    LabeledCurve, ScoreMode, Source,
};
use crate::frame::RgbdFrame;
use crate::fusion::{joint_probability, FusionError};
use crate::proposals::{propose, Proposal, ProposalConfig, ProposalError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Discovery(#[from] DiscoveryError),
    #[error(transparent)]
    Proposal(#[from] ProposalError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassifierConfig {
    Stub(StubConfig),
    External(ExternalConfig),
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig::Stub(StubConfig::default())
    }
}

impl ClassifierConfig {
    pub fn num_classes(&self) -> usize {
        match self {
            ClassifierConfig::Stub(s) => s.num_classes,
            ClassifierConfig::External(e) => e.num_classes,
        }
    }
}

/// What to do when a group's product of vectors has no mass left.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionFallback {
    /// Keep each instance's own vector.
    #[default]
    Independent,
    /// Fail the frame.
    Error,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreModeName {
    #[default]
    PerClass,
    /// Union of all configured categories as one binary task.
    Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// IOU used for the plotted curves.
    pub iou_min: f64,
    /// Further IOU thresholds written as extra CSV files.
    pub extra_iou: Vec<f64>,
    pub score_mode: ScoreModeName,
    pub categories: Vec<CategorySpec>,
    /// Detections below this score are left off the overlays.
    pub display_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_min: 0.5,
            extra_iou: vec![0.25],
            score_mode: ScoreModeName::PerClass,
            categories: vec![CategorySpec::new("packet", [692]), CategorySpec::new("comic book", [917])],
            display_threshold: 0.4,
        }
    }
}

impl EvalConfig {
    pub fn score_mode(&self) -> ScoreMode {
        match self.score_mode {
            ScoreModeName::PerClass => ScoreMode::PerClass,
            ScoreModeName::Category => ScoreMode::Category(CategorySpec::union("category", &self.categories)),
        }
    }

    /// Score compared against `display_threshold` when drawing overlays:
    /// the summed mass of the configured categories, or the argmax
    /// probability when none are configured.
    pub fn display_score(&self, probs: &ClassProbs) -> f64 {
        if self.categories.is_empty() {
            return probs.max();
        }
        aggregate_category(probs, &CategorySpec::union("category", &self.categories)).unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// When set, replaces the discovery and stub seeds.
    pub seed: Option<u64>,
    pub discovery: DiscoveryConfig,
    pub proposal: ProposalConfig,
    pub classifier: ClassifierConfig,
    pub fusion_fallback: FusionFallback,
    pub eval: EvalConfig,
    pub baseline: BaselineConfig,
}

impl PipelineConfig {
    /// Copy with the global seed pushed into the sections that use one.
    pub fn resolved(&self) -> PipelineConfig {
        let mut c = self.clone();
        if let Some(seed) = self.seed {
            c.discovery.rng_seed = seed;
            if let ClassifierConfig::Stub(s) = &mut c.classifier {
                s.seed = seed;
            }
        }
        c.baseline.preprocess = c.proposal.clone();
        c
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        for &t in std::iter::once(&self.eval.iou_min).chain(&self.eval.extra_iou) {
            if !(t > 0.0 && t <= 1.0) {
                return bad(format!("iou threshold {t} outside (0, 1]"));
            }
        }
        let classes = self.classifier.num_classes();
        if classes == 0 {
            return bad("num_classes must be positive".into());
        }
        for c in &self.eval.categories {
            c.validate(classes).map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        if let ClassifierConfig::Stub(s) = &self.classifier {
            if s.background_class >= classes {
                return bad(format!("background_class {} out of range", s.background_class));
            }
            if !(0.0..=1.0).contains(&s.peak) || !(0.0..=1.0).contains(&s.label_noise) {
                return bad("stub peak and label_noise must lie in [0, 1]".into());
            }
        }
        if let ClassifierConfig::External(e) = &self.classifier {
            let Some(program) = e.command.first() else { return bad("external command is empty".into()) };
            if program.contains(std::path::MAIN_SEPARATOR) && !Path::new(program).exists() {
                return bad(format!("classifier command {program} does not exist"));
            }
        }
        self.baseline.windows.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg.resolved())
    }
}

/// Classifier for a run. The stub is handed every frame's ground truth.
pub fn build_classifier(cfg: &ClassifierConfig, samples: &[Sample]) -> Result<Box<dyn Classifier>, PipelineError> {
    Ok(match cfg {
        ClassifierConfig::Stub(s) => {
            let mut stub = StubClassifier::new(s.clone());
            for sample in samples {
                stub.insert_ground_truth(sample.frame.frame_id.clone(), sample.ground_truth.clone());
            }
            Box::new(stub)
        }
        ClassifierConfig::External(e) => Box::new(ExternalClassifier::new(e.clone())?),
    })
}

/// Discovery plus one expanded proposal per instance cluster.
pub fn propose_instances(frame: &RgbdFrame, cfg: &PipelineConfig) -> Result<(Discovery, Vec<Proposal>), PipelineError> {
    let d = discover(frame, &cfg.discovery)?;
    let bounds = frame.bounds();
    let proposals = d
        .clusters
        .iter()
        .map(|c| propose(c, &d.features, &bounds, &cfg.proposal))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((d, proposals))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OursOutput {
    pub independent: Vec<DetectionRecord>,
    pub joint: Vec<DetectionRecord>,
    /// Groups whose joint was degenerate and fell back to independent vectors.
    pub fallbacks: Vec<usize>,
}

/// Fuse per-group vectors. `probs[k]` belongs to `proposals[k]`.
pub fn fuse_groups(
    proposals: &[Proposal],
    probs: &[ClassProbs],
    fallback: FusionFallback,
) -> Result<(Vec<ClassProbs>, Vec<usize>), PipelineError> {
    let mut groups: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (k, p) in proposals.iter().enumerate() {
        groups.entry(p.group_id).or_default().push(k);
    }
    let mut joint = probs.to_vec();
    let mut fallbacks = Vec::new();
    for (group, members) in groups {
        // Proposals without a group stay independent.
        let Some(gid) = group else { continue };
        let vectors: Vec<ClassProbs> = members.iter().map(|&k| probs[k].clone()).collect();
        match joint_probability(&vectors) {
            Ok(j) => members.iter().for_each(|&k| joint[k] = j.clone()),
            Err(FusionError::DegenerateJoint) if fallback == FusionFallback::Independent => fallbacks.push(gid),
            Err(e) => return Err(e.into()),
        }
    }
    Ok((joint, fallbacks))
}

/// Classify given proposals and build both record lists.
pub fn classify_and_fuse(
    frame: &RgbdFrame,
    proposals: &[Proposal],
    cfg: &PipelineConfig,
    classifier: &dyn Classifier,
) -> Result<OursOutput, PipelineError> {
    let probs = classify_all(classifier, frame, proposals, &cfg.proposal)?;
    let (joint, fallbacks) = fuse_groups(proposals, &probs, cfg.fusion_fallback)?;
    let record = |p: &Proposal, probs: ClassProbs, source| DetectionRecord {
        frame_id: frame.frame_id.clone(),
        bbox: p.bbox,
        group_id: p.group_id,
        instance_id: Some(p.instance_id),
        probs,
        source,
    };
    Ok(OursOutput {
        independent: proposals.iter().zip(probs).map(|(p, v)| record(p, v, Source::OursIndependent)).collect(),
        joint: proposals.iter().zip(joint).map(|(p, v)| record(p, v, Source::OursJoint)).collect(),
        fallbacks,
    })
}

pub fn run_ours(frame: &RgbdFrame, cfg: &PipelineConfig, classifier: &dyn Classifier) -> Result<OursOutput, PipelineError> {
    let (_, proposals) = propose_instances(frame, cfg)?;
    classify_and_fuse(frame, &proposals, cfg, classifier)
}

/// [`run_ours`] over many frames. A failing frame yields its error and the
/// loop moves on.
pub fn run_ours_frames<'a>(
    samples: &'a [Sample],
    cfg: &PipelineConfig,
    classifier: &dyn Classifier,
) -> Vec<(&'a str, Result<OursOutput, PipelineError>)> {
    samples.iter().map(|s| (s.frame.frame_id.as_str(), run_ours(&s.frame, cfg, classifier))).collect()
}

pub fn run_window_baseline(frame: &RgbdFrame, cfg: &PipelineConfig, classifier: &dyn Classifier) -> Result<Vec<DetectionRecord>, PipelineError> {
    Ok(run_baseline(frame, &cfg.baseline, classifier)?)
}

/// Per-source summary of an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub label: String,
    pub iou_min: f64,
    pub auc: f64,
    pub detections: usize,
    /// Counts with every detection kept.
    pub counts_all: Totals,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl From<&EvalCounts> for Totals {
    fn from(c: &EvalCounts) -> Self {
        let (tp, fp, fn_) = c.totals();
        Totals { tp, fp, fn_ }
    }
}

pub fn curve_label(source: Source, iou_min: f64, primary: f64) -> String {
    if iou_min == primary {
        source.as_str().to_string()
    } else {
        format!("{}-iou{}", source.as_str(), iou_min)
    }
}

/// Curves for every source present in `dets`, at every configured IOU.
/// Returns `(curves, summaries)`; curves at the primary IOU come first.
pub fn evaluate(
    dets: &[DetectionRecord],
    gts: &BTreeMap<String, Vec<GroundTruthBox>>,
    cfg: &EvalConfig,
) -> Result<(Vec<LabeledCurve>, Vec<CurveSummary>), PipelineError> {
    let mode = cfg.score_mode();
    let mut curves = Vec::new();
    let mut summaries = Vec::new();
    let ious: Vec<f64> = std::iter::once(cfg.iou_min).chain(cfg.extra_iou.iter().copied().filter(|t| *t != cfg.iou_min)).collect();
    for &t in &ious {
        for source in Source::ALL {
            let subset: Vec<DetectionRecord> = dets.iter().filter(|d| d.source == source).cloned().collect();
            if subset.is_empty() && !dets.is_empty() {
                continue;
            }
            let points = pr_curve_dataset(&subset, gts, t, &mode)?;
            let counts = dataset_counts(&subset, gts, t, &mode, f64::NEG_INFINITY)?;
            let label = curve_label(source, t, cfg.iou_min);
            summaries.push(CurveSummary {
                label: label.clone(),
                iou_min: t,
                auc: area_under_curve(&points),
                detections: subset.len(),
                counts_all: (&counts).into(),
            });
            curves.push(LabeledCurve { label, points });
        }
    }
    Ok((curves, summaries))
}
