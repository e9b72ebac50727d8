//! Ground-truth matching, micro-averaged precision/recall, PR curves and
//! report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{aggregate_category, CategorySpec, ClassProbs};
use crate::geometry::{iou, BoundingBox};
use crate::io::{atomic_write, write_png};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Category(#[from] crate::classify::ClassifyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_index: usize,
    pub object_type_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    OursIndependent,
    OursJoint,
    Baseline,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::OursIndependent, Source::OursJoint, Source::Baseline];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::OursIndependent => "ours-independent",
            Source::OursJoint => "ours-joint",
            Source::Baseline => "baseline",
        }
    }
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Source::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| format!("unknown source {s:?}"))
    }
}

/// One scored region as written to a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame_id: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub group_id: Option<usize>,
    pub instance_id: Option<usize>,
    pub probs: ClassProbs,
    pub source: Source,
}

/// A detection reduced to what matching needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredDetection {
    pub bbox: BoundingBox,
    pub class_index: usize,
    pub score: f64,
}

/// Per-class tallies.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    #[serde(rename = "fn")]
    pub fn_: Vec<u64>,
}

impl EvalCounts {
    pub fn new(classes: usize) -> Self {
        Self { tp: vec![0; classes], fp: vec![0; classes], fn_: vec![0; classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    fn ensure(&mut self, class: usize) {
        if class >= self.tp.len() {
            self.tp.resize(class + 1, 0);
            self.fp.resize(class + 1, 0);
            self.fn_.resize(class + 1, 0);
        }
    }

    /// `(Σtp, Σfp, Σfn)`.
    pub fn totals(&self) -> (u64, u64, u64) {
        (self.tp.iter().sum(), self.fp.iter().sum(), self.fn_.iter().sum())
    }

    pub fn add(&mut self, other: &EvalCounts) {
        if other.num_classes() > 0 {
            self.ensure(other.num_classes() - 1);
        }
        for c in 0..other.num_classes() {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
    }
}

/// Greedy matching in descending score order; ties keep input order. Each
/// detection takes the unconsumed same-class GT of highest IOU, provided
/// that IOU reaches `iou_min`.
pub fn match_detections(dets: &[ScoredDetection], gts: &[GroundTruthBox], iou_min: f64, num_classes: usize) -> EvalCounts {
    let mut counts = EvalCounts::new(num_classes);
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut consumed = vec![false; gts.len()];
    for &d in &order {
        let det = &dets[d];
        counts.ensure(det.class_index);
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if consumed[g] || gt.class_index != det.class_index {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v >= iou_min && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                consumed[g] = true;
                counts.tp[det.class_index] += 1;
            }
            None => counts.fp[det.class_index] += 1,
        }
    }
    for (g, gt) in gts.iter().enumerate() {
        if !consumed[g] {
            counts.ensure(gt.class_index);
            counts.fn_[gt.class_index] += 1;
        }
    }
    counts
}

/// Micro-averaged `(P, R)`. Empty denominators give 1.
pub fn compute_pr(counts: &EvalCounts) -> (f64, f64) {
    let (tp, fp, fn_) = counts.totals();
    let p = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    (p, r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// How a probability vector becomes a class and a score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Argmax class, scored by its probability.
    PerClass,
    /// Binary task: every detection claims the category, scored by the
    /// summed category probability. Only GTs whose class is in the
    /// category are evaluated.
    Category(CategorySpec),
}

fn score(probs: &ClassProbs, mode: &ScoreMode) -> Result<(usize, f64), EvalError> {
    Ok(match mode {
        ScoreMode::PerClass => (probs.argmax(), probs.max()),
        ScoreMode::Category(spec) => (0, aggregate_category(probs, spec)?),
    })
}

/// A frame's detections and ground truth, ready for matching.
#[derive(Debug, Clone, Default)]
struct Prepared {
    dets: Vec<ScoredDetection>,
    gts: Vec<GroundTruthBox>,
}

fn prepare(dets: &[&DetectionRecord], gts: &[GroundTruthBox], mode: &ScoreMode) -> Result<Prepared, EvalError> {
    let dets = dets
        .iter()
        .map(|d| score(&d.probs, mode).map(|(class_index, score)| ScoredDetection { bbox: d.bbox, class_index, score }))
        .collect::<Result<_, _>>()?;
    let gts = match mode {
        ScoreMode::PerClass => gts.to_vec(),
        ScoreMode::Category(spec) => gts
            .iter()
            .filter(|g| spec.contains(g.class_index))
            .map(|g| GroundTruthBox { class_index: 0, ..*g })
            .collect(),
    };
    Ok(Prepared { dets, gts })
}

fn sweep(frames: &[Prepared], iou_min: f64) -> Vec<PRPoint> {
    let mut scores: Vec<f64> = frames.iter().flat_map(|f| f.dets.iter().map(|d| d.score)).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();
    if scores.last().is_none_or(|&s| s > 0.0) {
        scores.push(0.0);
    }
    scores
        .into_iter()
        .map(|t| {
            let mut total = EvalCounts::default();
            for f in frames {
                let kept: Vec<ScoredDetection> = f.dets.iter().copied().filter(|d| d.score >= t).collect();
                total.add(&match_detections(&kept, &f.gts, iou_min, 0));
            }
            let (precision, recall) = compute_pr(&total);
            PRPoint { threshold: t, precision, recall }
        })
        .collect()
}

/// PR curve for one frame, ordered by descending threshold. The last point
/// always keeps every detection (threshold 0).
pub fn pr_curve(dets: &[DetectionRecord], gts: &[GroundTruthBox], iou_min: f64, mode: &ScoreMode) -> Result<Vec<PRPoint>, EvalError> {
    let refs: Vec<&DetectionRecord> = dets.iter().collect();
    Ok(sweep(&[prepare(&refs, gts, mode)?], iou_min))
}

/// PR curve over many frames: counts are summed across frames at each
/// threshold. Detections are routed to frames by `frame_id`.
pub fn pr_curve_dataset(
    dets: &[DetectionRecord],
    gts: &BTreeMap<String, Vec<GroundTruthBox>>,
    iou_min: f64,
    mode: &ScoreMode,
) -> Result<Vec<PRPoint>, EvalError> {
    let mut by_frame: BTreeMap<&str, Vec<&DetectionRecord>> = gts.keys().map(|k| (k.as_str(), Vec::new())).collect();
    for d in dets {
        by_frame.entry(d.frame_id.as_str()).or_default().push(d);
    }
    let empty = Vec::new();
    let frames = by_frame
        .iter()
        .map(|(id, ds)| prepare(ds, gts.get(*id).unwrap_or(&empty), mode))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(sweep(&frames, iou_min))
}

/// Counts at a single threshold over many frames.
pub fn dataset_counts(
    dets: &[DetectionRecord],
    gts: &BTreeMap<String, Vec<GroundTruthBox>>,
    iou_min: f64,
    mode: &ScoreMode,
    threshold: f64,
) -> Result<EvalCounts, EvalError> {
    let mut total = EvalCounts::default();
    for (id, frame_gts) in gts {
        let ds: Vec<&DetectionRecord> = dets.iter().filter(|d| &d.frame_id == id).collect();
        let p = prepare(&ds, frame_gts, mode)?;
        let kept: Vec<ScoredDetection> = p.dets.into_iter().filter(|d| d.score >= threshold).collect();
        total.add(&match_detections(&kept, &p.gts, iou_min, 0));
    }
    Ok(total)
}

/// Area under a PR curve: `Σ (R_k − R_{k−1}) · P_k` with `R_0 = 0`,
/// walking from the highest threshold down.
pub fn area_under_curve(curve: &[PRPoint]) -> f64 {
    let mut prev = 0.0;
    let mut area = 0.0;
    for p in curve {
        area += (p.recall - prev).max(0.0) * p.precision;
        prev = prev.max(p.recall);
    }
    area
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCurve {
    pub label: String,
    pub points: Vec<PRPoint>,
}

/// Boxes to draw on one frame.
#[derive(Debug, Clone)]
pub struct Overlay {
    pub frame_id: String,
    pub image: RgbImage,
    pub boxes: Vec<(BoundingBox, Option<usize>)>,
}

pub fn curve_csv(points: &[PRPoint]) -> String {
    let mut s = String::from("threshold,precision,recall\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.threshold, p.precision, p.recall);
    }
    s
}

pub fn parse_curve_csv(text: &str) -> Result<Vec<PRPoint>, String> {
    let mut lines = text.lines();
    if lines.next() != Some("threshold,precision,recall") {
        return Err("missing header".into());
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
            match v[..] {
                [threshold, precision, recall] => Ok(PRPoint { threshold, precision, recall }),
                _ => Err(format!("bad row {l:?}")),
            }
        })
        .collect()
}

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [44, 160, 44],
    [214, 39, 40],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
    [227, 119, 194],
    [188, 189, 34],
];

fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Line plot of recall (x) against precision (y), one polyline per curve.
pub fn curves_svg(curves: &[LabeledCurve]) -> String {
    let (w, h, m) = (480.0, 400.0, 50.0);
    let px = |r: f64| m + r * (w - 2.0 * m);
    let py = |p: f64| h - m - p * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{} {} L{} {} L{} {}" fill="none" stroke="black"/>"#,
        px(0.0),
        py(1.0),
        px(0.0),
        py(0.0),
        px(1.0),
        py(0.0)
    );
    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{t:.1}</text>"#, px(t), py(0.0) + 16.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{t:.1}</text>"#, px(0.0) - 6.0, py(t) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">recall</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-size="13" text-anchor="middle" transform="rotate(-90 14 {})">precision</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let colour = hex(PALETTE[i % PALETTE.len()]);
        let pts: Vec<String> = c.points.iter().map(|p| format!("{:.2},{:.2}", px(p.recall), py(p.precision))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#, pts.join(" "));
        let ly = m + 16.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/>"#, w - m - 150.0, w - m - 130.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12">{}</text>"#, w - m - 125.0, ly + 4.0, escape(&c.label));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Draw box outlines, coloured by group. Ungrouped boxes are white.
pub fn draw_overlay(image: &RgbImage, boxes: &[(BoundingBox, Option<usize>)]) -> RgbImage {
    let mut out = image.clone();
    let (w, h) = (out.width() as i64, out.height() as i64);
    for (b, group) in boxes {
        let colour = Rgb(group.map_or([255, 255, 255], |g| PALETTE[g % PALETTE.len()]));
        let x0 = b.x_min.floor() as i64;
        let y0 = b.y_min.floor() as i64;
        let x1 = b.x_max.ceil() as i64 - 1;
        let y1 = b.y_max.ceil() as i64 - 1;
        for t in 0..2 {
            for x in x0..=x1 {
                for y in [y0 + t, y1 - t] {
                    if (0..w).contains(&x) && (0..h).contains(&y) {
                        out.put_pixel(x as u32, y as u32, colour);
                    }
                }
            }
            for y in y0..=y1 {
                for x in [x0 + t, x1 - t] {
                    if (0..w).contains(&x) && (0..h).contains(&y) {
                        out.put_pixel(x as u32, y as u32, colour);
                    }
                }
            }
        }
    }
    out
}

/// Write `prcurve_<label>.csv` per curve, `prcurve.svg`, and one
/// `detections_overlay_<frame>.png` per overlay. Returns the paths written.
pub fn emit_report(curves: &[LabeledCurve], overlays: &[Overlay], out_dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let mut written = Vec::new();
    let mut put = |path: PathBuf, bytes: &[u8]| -> Result<(), EvalError> {
        atomic_write(&path, bytes).map_err(|source| EvalError::Write { path: path.clone(), source })?;
        written.push(path);
        Ok(())
    };
    std::fs::create_dir_all(out_dir).map_err(|source| EvalError::Write { path: out_dir.to_path_buf(), source })?;
    for c in curves {
        put(out_dir.join(format!("prcurve_{}.csv", c.label)), curve_csv(&c.points).as_bytes())?;
    }
    put(out_dir.join("prcurve.svg"), curves_svg(curves).as_bytes())?;
    for o in overlays {
        let path = out_dir.join(format!("detections_overlay_{}.png", o.frame_id));
        write_png(&path, &draw_overlay(&o.image, &o.boxes)).map_err(|source| EvalError::Write { path: path.clone(), source })?;
        written.push(path);
    }
    Ok(written)
}
