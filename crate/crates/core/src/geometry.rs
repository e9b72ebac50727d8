//! Boxes, overlap, suppression, pinhole back-projection and least-squares
//! rigid alignment.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("degenerate point configuration: {0}")]
    Degenerate(&'static str),
    #[error("point sets differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid bounding box ({0}, {1}, {2}, {3})")]
    InvalidBox(f64, f64, f64, f64),
}

/// Axis-aligned box in pixel coordinates, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let ok = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite())
            && x_min <= x_max
            && y_min <= y_max;
        if ok {
            Ok(Self { x_min, y_min, x_max, y_max })
        } else {
            Err(GeometryError::InvalidBox(x_min, y_min, x_max, y_max))
        }
    }

    /// Box covering `[0, width] x [0, height]`.
    pub fn image(width: u32, height: u32) -> Self {
        Self { x_min: 0.0, y_min: 0.0, x_max: width as f64, y_max: height as f64 }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) * 0.5, (self.y_min + self.y_max) * 0.5)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        other.x_min >= self.x_min
            && other.y_min >= self.y_min
            && other.x_max <= self.x_max
            && other.y_max <= self.y_max
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersect with `bounds`; a box entirely outside collapses onto the
    /// nearest edge of `bounds`.
    pub fn clip(&self, bounds: &BoundingBox) -> BoundingBox {
        let x_min = self.x_min.clamp(bounds.x_min, bounds.x_max);
        let y_min = self.y_min.clamp(bounds.y_min, bounds.y_max);
        let x_max = self.x_max.clamp(bounds.x_min, bounds.x_max).max(x_min);
        let y_max = self.y_max.clamp(bounds.y_min, bounds.y_max).max(y_min);
        BoundingBox { x_min, y_min, x_max, y_max }
    }

    /// Tight box over a set of points. `None` for an empty iterator.
    pub fn enclosing<I: IntoIterator<Item = (f64, f64)>>(points: I) -> Option<BoundingBox> {
        let mut it = points.into_iter();
        let (x0, y0) = it.next()?;
        let mut b = BoundingBox { x_min: x0, y_min: y0, x_max: x0, y_max: y0 };
        for (x, y) in it {
            b.x_min = b.x_min.min(x);
            b.y_min = b.y_min.min(y);
            b.x_max = b.x_max.max(x);
            b.y_max = b.y_max.max(y);
        }
        Some(b)
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

/// Intersection over union. Zero whenever the union has no area, which
/// includes two identical degenerate boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Greedy non-maximum suppression.
///
/// Candidates are visited by descending score (equal scores keep input
/// order) and a candidate is dropped iff its IOU with an already kept box
/// exceeds `overlap_threshold`. Returns indices into `detections` in the
/// order they were kept.
pub fn nms_indices(detections: &[(BoundingBox, f64)], overlap_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].1.total_cmp(&detections[a].1).then(a.cmp(&b)));

    let mut kept: Vec<usize> = Vec::new();
    for idx in order {
        let candidate = &detections[idx].0;
        if kept.iter().all(|&k| iou(&detections[k].0, candidate) <= overlap_threshold) {
            kept.push(idx);
        }
    }
    kept
}

pub fn nms(detections: &[(BoundingBox, f64)], overlap_threshold: f64) -> Vec<(BoundingBox, f64)> {
    nms_indices(detections, overlap_threshold)
        .into_iter()
        .map(|i| detections[i])
        .collect()
}

/// Scale width and height by `1 + factor` about the center, then clip.
pub fn expand_box(b: &BoundingBox, factor: f64, bounds: &BoundingBox) -> BoundingBox {
    let (cx, cy) = b.center();
    let half_w = 0.5 * b.width() * (1.0 + factor);
    let half_h = 0.5 * b.height() * (1.0 + factor);
    BoundingBox { x_min: cx - half_w, y_min: cy - half_h, x_max: cx + half_w, y_max: cy + half_h }
        .clip(bounds)
}

/// Pinhole intrinsics plus the metric size of one raw depth unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub depth_scale: f64,
}

impl CameraIntrinsics {
    pub fn is_valid(&self) -> bool {
        self.fx > 0.0
            && self.fy > 0.0
            && self.depth_scale > 0.0
            && [self.fx, self.fy, self.cx, self.cy, self.depth_scale].iter().all(|v| v.is_finite())
    }

    /// Pixel coordinates of a camera-frame point. `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

/// Back-project a pixel with raw depth into the camera frame (meters).
/// Returns `None` (no depth) for a zero raw value.
pub fn backproject(u: f64, v: f64, depth_raw: u16, k: &CameraIntrinsics) -> Option<Vector3<f64>> {
    if depth_raw == 0 {
        return None;
    }
    let z = depth_raw as f64 * k.depth_scale;
    Some(Vector3::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z))
}

/// Proper rigid motion `x -> rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Largest entry of `|RᵀR − I|` and `|det R − 1|`.
    pub fn orthonormality_error(&self) -> (f64, f64) {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        (ortho, (r.determinant() - 1.0).abs())
    }
}

/// Closed-form least-squares rigid alignment (Kabsch with reflection
/// correction) minimising `Σ ‖R·src_i + t − dst_i‖²`.
pub fn estimate_rigid_transform(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
) -> Result<RigidTransform, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::LengthMismatch(src.len(), dst.len()));
    }
    if src.len() < 3 {
        return Err(GeometryError::Degenerate("fewer than three correspondences"));
    }
    let n = src.len() as f64;
    let src_mean = src.iter().sum::<Vector3<f64>>() / n;
    let dst_mean = dst.iter().sum::<Vector3<f64>>() / n;

    let mut cov = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let sc = s - src_mean;
        cov += (d - dst_mean) * sc.transpose();
        scatter += sc * sc.transpose();
    }

    // Collinear sources leave rotation about the line undetermined.
    let mut spread = scatter.symmetric_eigenvalues().as_slice().to_vec();
    spread.sort_by(|a, b| b.total_cmp(a));
    if spread[0] <= 0.0 || spread[1] <= 1e-12 * spread[0].max(1e-12) {
        return Err(GeometryError::Degenerate("source points are collinear"));
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(GeometryError::Degenerate("svd failed")),
    };
    let sign = (u * v_t).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, if sign == 0.0 { 1.0 } else { sign }));
    let rotation = u * correction * v_t;
    let translation = dst_mean - rotation * src_mean;
    Ok(RigidTransform { rotation, translation })
}
