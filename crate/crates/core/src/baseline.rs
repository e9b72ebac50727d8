//! Class-agnostic window proposer and the classify-everything baseline.
//!
//! Windows are laid out densely over several scales and aspect ratios,
//! ranked by mean gradient magnitude, pruned below an edge-density
//! percentile and capped. Every surviving window is classified and the
//! scored set goes through NMS.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{classify_all, Classifier, ClassifyError};
use crate::eval::{DetectionRecord, Source};
use crate::frame::RgbdFrame;
use crate::geometry::{nms_indices, BoundingBox};
use crate::imaging::Plane;
use crate::proposals::{Proposal, ProposalConfig};

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("invalid window config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    /// Window size in pixels: the side of the square window of aspect 1.
    pub scales: Vec<f64>,
    /// Step between windows as a fraction of the window size.
    pub stride_fraction: f64,
    /// Width over height. A window of scale `s` and aspect `a` is
    /// `s·√a` wide and `s/√a` tall.
    pub aspects: Vec<f64>,
    /// Windows whose edge density falls strictly below this percentile
    /// (0 to 100) of all windows are dropped. 0 disables the filter.
    pub edge_percentile: f64,
    pub max_regions: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            scales: vec![96.0, 128.0, 160.0, 224.0],
            stride_fraction: 0.5,
            aspects: vec![1.0],
            edge_percentile: 50.0,
            max_regions: 100,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        let bad = |m: &str| Err(BaselineError::InvalidConfig(m.to_string()));
        if self.scales.is_empty() || self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("scales must be positive");
        }
        if !(self.stride_fraction > 0.0 && self.stride_fraction <= 1.0) {
            return bad("stride_fraction must lie in (0, 1]");
        }
        if self.aspects.is_empty() || self.aspects.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return bad("aspects must be positive");
        }
        if !(0.0..=100.0).contains(&self.edge_percentile) {
            return bad("edge_percentile must lie in [0, 100]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub windows: WindowConfig,
    pub nms_threshold: f64,
    pub preprocess: ProposalConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { windows: WindowConfig::default(), nms_threshold: 0.5, preprocess: ProposalConfig::default() }
    }
}

/// Dense grid of windows in generation order: scale, aspect, row, column.
pub fn window_grid(width: u32, height: u32, cfg: &WindowConfig) -> Vec<BoundingBox> {
    let (w, h) = (width as f64, height as f64);
    let mut out = Vec::new();
    for &s in &cfg.scales {
        for &a in &cfg.aspects {
            let (ww, wh) = (s * a.sqrt(), s / a.sqrt());
            if ww > w || wh > h {
                continue;
            }
            let (sx, sy) = (ww * cfg.stride_fraction, wh * cfg.stride_fraction);
            let nx = ((w - ww) / sx + 1e-9).floor() as usize + 1;
            let ny = ((h - wh) / sy + 1e-9).floor() as usize + 1;
            for r in 0..ny {
                for c in 0..nx {
                    let (x0, y0) = (c as f64 * sx, r as f64 * sy);
                    out.push(BoundingBox { x_min: x0, y_min: y0, x_max: x0 + ww, y_max: y0 + wh });
                }
            }
        }
    }
    out
}

/// Summed-area table of gradient magnitude over the luma image.
struct EdgeIntegral {
    width: usize,
    sums: Vec<f64>,
}

impl EdgeIntegral {
    fn new(frame: &RgbdFrame) -> Self {
        let (gx, gy) = Plane::luma(&frame.color).gradients();
        let (w, h) = (gx.width, gx.height);
        let mut sums = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += (gx.get(x, y) as f64).hypot(gy.get(x, y) as f64);
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Self { width: w, sums }
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        self.sums[y * (self.width + 1) + x]
    }

    /// Mean magnitude over the pixels whose centres fall in `b`.
    fn density(&self, b: &BoundingBox) -> f64 {
        let x0 = (b.x_min - 0.5).ceil().max(0.0) as usize;
        let y0 = (b.y_min - 0.5).ceil().max(0.0) as usize;
        let x1 = ((b.x_max - 0.5).ceil().max(0.0) as usize).min(self.width);
        let y1 = ((b.y_max - 0.5).ceil().max(0.0) as usize).min(self.sums.len() / (self.width + 1) - 1);
        if x1 <= x0 || y1 <= y0 {
            return 0.0;
        }
        let s = self.at(x1, y1) - self.at(x0, y1) - self.at(x1, y0) + self.at(x0, y0);
        s / ((x1 - x0) * (y1 - y0)) as f64
    }
}

/// Nearest-rank percentile of `values` (0 to 100).
fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// Windows with edge density, densest first; ties keep grid order.
pub fn propose_windows_scored(frame: &RgbdFrame, cfg: &WindowConfig) -> Result<Vec<(BoundingBox, f64)>, BaselineError> {
    cfg.validate()?;
    let grid = window_grid(frame.width(), frame.height(), cfg);
    if grid.is_empty() {
        return Ok(Vec::new());
    }
    let edges = EdgeIntegral::new(frame);
    let density: Vec<f64> = grid.iter().map(|b| edges.density(b)).collect();
    let floor = if cfg.edge_percentile > 0.0 { percentile(&density, cfg.edge_percentile) } else { f64::NEG_INFINITY };
    let mut scored: Vec<(BoundingBox, f64)> = grid.into_iter().zip(density).filter(|(_, d)| *d >= floor).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(cfg.max_regions);
    Ok(scored)
}

pub fn propose_windows(frame: &RgbdFrame, cfg: &WindowConfig) -> Result<Vec<BoundingBox>, BaselineError> {
    Ok(propose_windows_scored(frame, cfg)?.into_iter().map(|(b, _)| b).collect())
}

/// The baseline output before and after suppression.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRun {
    /// Every classified window, in proposal order.
    pub all: Vec<DetectionRecord>,
    /// Indices into `all` that survive NMS, best score first.
    pub kept: Vec<usize>,
}

impl BaselineRun {
    pub fn detections(&self) -> Vec<DetectionRecord> {
        self.kept.iter().map(|&i| self.all[i].clone()).collect()
    }
}

/// Classify every window and apply NMS on the argmax-class score.
pub fn run_baseline_full(frame: &RgbdFrame, cfg: &BaselineConfig, classifier: &dyn Classifier) -> Result<BaselineRun, BaselineError> {
    let windows = propose_windows(frame, &cfg.windows)?;
    let proposals: Vec<Proposal> =
        windows.iter().enumerate().map(|(i, b)| Proposal { bbox: *b, instance_id: i, group_id: None }).collect();
    let probs = classify_all(classifier, frame, &proposals, &cfg.preprocess)?;
    let all: Vec<DetectionRecord> = proposals
        .iter()
        .zip(probs)
        .map(|(p, probs)| DetectionRecord {
            frame_id: frame.frame_id.clone(),
            bbox: p.bbox,
            group_id: None,
            instance_id: Some(p.instance_id),
            probs,
            source: Source::Baseline,
        })
        .collect();
    let scored: Vec<(BoundingBox, f64)> = all.iter().map(|d| (d.bbox, d.probs.max())).collect();
    let kept = nms_indices(&scored, cfg.nms_threshold);
    Ok(BaselineRun { all, kept })
}

pub fn run_baseline(frame: &RgbdFrame, cfg: &BaselineConfig, classifier: &dyn Classifier) -> Result<Vec<DetectionRecord>, BaselineError> {
    Ok(run_baseline_full(frame, cfg, classifier)?.detections())
}
