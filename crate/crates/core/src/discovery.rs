//! Multi-instance object discovery in a single RGB-D frame.
//!
//! The search runs in four stages:
//!
//! 1. [`detect_features`]: Harris corners picked per grid cell, each with a
//!    dominant gradient orientation and a steered binary (BRIEF-style)
//!    descriptor, plus a back-projected 3D point where depth is valid.
//! 2. [`match_intra_image`]: every feature is matched against the *same*
//!    image, skipping neighbours closer than `min_spatial_separation`, so
//!    only repetitions elsewhere in the scene can match.
//! 3. [`hypothesize_transforms`]: RANSAC over 3D correspondences finds rigid
//!    motions that map one instance onto another; disjoint hypotheses are
//!    pulled out greedily by support.
//! 4. [`extract_clusters`]: the two endpoint sets of every hypothesis become
//!    instance clusters and connected components of the association graph
//!    become object groups.
//!
//! [`discover`] chains the stages. Output is a pure function of the frame
//! and the config (including `rng_seed`).

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::RgbdFrame;
use crate::geometry::{backproject, estimate_rigid_transform, CameraIntrinsics, RigidTransform};
use crate::imaging::Plane;

#[derive(Debug, Error, PartialEq)]
pub enum DiscoveryError {
    #[error("image {width}x{height} is smaller than the {min}px descriptor support")]
    ImageTooSmall { width: u32, height: u32, min: u32 },
    #[error("descriptor_bits must be a positive multiple of 64, got {0}")]
    DescriptorBits(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoveryConfig {
    pub max_features: usize,
    pub knn: usize,
    pub ratio: f64,
    pub min_spatial_separation: f64,
    pub ransac_iters: usize,
    /// Meters.
    pub inlier_epsilon: f64,
    pub min_inliers: usize,
    pub min_cluster_size: usize,
    pub merge_overlap: f64,
    pub rng_seed: u64,
    /// Second and third RANSAC samples are drawn from matches whose
    /// endpoints lie within this many pixels of the first sample's.
    pub sample_radius_px: f64,

    pub harris_k: f64,
    /// Absolute floor on the corner response.
    pub harris_threshold: f64,
    /// Response must also exceed this fraction of the frame maximum.
    pub harris_relative_threshold: f64,
    pub smoothing_sigma: f64,
    pub tensor_sigma: f64,
    pub grid_cell: usize,
    pub per_cell: usize,
    pub patch_radius: f64,
    pub descriptor_bits: usize,
    pub descriptor_sigma: f64,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            max_features: 2000,
            knn: 4,
            ratio: 0.9,
            min_spatial_separation: 30.0,
            ransac_iters: 2000,
            inlier_epsilon: 0.01,
            min_inliers: 8,
            min_cluster_size: 8,
            merge_overlap: 0.5,
            rng_seed: 0,
            sample_radius_px: 120.0,
            harris_k: 0.04,
            harris_threshold: 200.0,
            harris_relative_threshold: 0.001,
            smoothing_sigma: 1.0,
            tensor_sigma: 1.5,
            grid_cell: 8,
            per_cell: 3,
            patch_radius: 14.0,
            descriptor_bits: 256,
            descriptor_sigma: 1.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub u: f64,
    pub v: f64,
    pub response: f64,
    pub orientation: f64,
    pub scale: f64,
}

/// Packed binary descriptor.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Descriptor(pub Vec<u64>);

impl Descriptor {
    pub fn bits(&self) -> usize {
        self.0.len() * 64
    }

    pub fn hamming(&self, other: &Descriptor) -> u32 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a ^ b).count_ones()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub keypoint: Keypoint,
    pub descriptor: Descriptor,
    pub point3d: Option<Vector3<f64>>,
}

impl Feature {
    fn pixel_distance(&self, other: &Feature) -> f64 {
        (self.keypoint.u - other.keypoint.u).hypot(self.keypoint.v - other.keypoint.v)
    }
}

/// Correspondence between two features of the same frame. Inside a
/// [`Hypothesis`] it is oriented: `i` is the source, `j` the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureMatch {
    pub i: usize,
    pub j: usize,
    pub distance: u32,
}

impl FeatureMatch {
    fn reversed(self) -> Self {
        Self { i: self.j, j: self.i, distance: self.distance }
    }

    fn key(&self) -> (usize, usize) {
        (self.i.min(self.j), self.i.max(self.j))
    }
}

/// A rigid motion mapping one instance onto another together with the
/// correspondences that support it.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub transform: RigidTransform,
    /// 3D inliers, each within `inlier_epsilon` of the transform.
    pub inliers: Vec<FeatureMatch>,
    /// Matches with one depthless endpoint, verified in the image plane.
    pub members: Vec<FeatureMatch>,
}

impl Hypothesis {
    pub fn support(&self) -> usize {
        self.inliers.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceCluster {
    pub instance_id: usize,
    pub feature_indices: Vec<usize>,
    pub group_id: usize,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectGroup {
    pub group_id: usize,
    pub instance_ids: Vec<usize>,
    /// Keyed by `(source instance, target instance)`.
    pub pairwise_transforms: BTreeMap<(usize, usize), (RigidTransform, usize)>,
}

/// Everything [`discover`] computed for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Discovery {
    pub features: Vec<Feature>,
    pub matches: Vec<FeatureMatch>,
    pub hypotheses: Vec<Hypothesis>,
    pub clusters: Vec<InstanceCluster>,
    pub groups: Vec<ObjectGroup>,
}

impl Discovery {
    pub fn cluster(&self, instance_id: usize) -> Option<&InstanceCluster> {
        self.clusters.iter().find(|c| c.instance_id == instance_id)
    }

    pub fn clusters_of(&self, group: &ObjectGroup) -> Vec<&InstanceCluster> {
        group.instance_ids.iter().filter_map(|&id| self.cluster(id)).collect()
    }
}

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

const PATTERN_SEED: u64 = 0x0b41_ef5e_ed00_0001;

/// Fixed sampling pattern: `bits` point pairs inside a disc of `radius`.
fn brief_pattern(bits: usize, radius: f64) -> Vec<[(f32, f32); 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(PATTERN_SEED);
    let sigma = radius / 2.0;
    let point = |rng: &mut ChaCha8Rng| loop {
        // Box-Muller, rejected outside the disc.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let mag = sigma * (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        let (x, y) = (mag * c, mag * s);
        if x * x + y * y <= radius * radius {
            return (x as f32, y as f32);
        }
    };
    (0..bits).map(|_| [point(&mut rng), point(&mut rng)]).collect()
}

fn harris_response(gray: &Plane, cfg: &DiscoveryConfig) -> Plane {
    let (gx, gy) = gray.gradients();
    let mut xx = Plane::new(gray.width, gray.height);
    let mut yy = Plane::new(gray.width, gray.height);
    let mut xy = Plane::new(gray.width, gray.height);
    for i in 0..gray.data.len() {
        xx.data[i] = gx.data[i] * gx.data[i];
        yy.data[i] = gy.data[i] * gy.data[i];
        xy.data[i] = gx.data[i] * gy.data[i];
    }
    let s = cfg.tensor_sigma as f32;
    let (xx, yy, xy) = (xx.gaussian_blur(s), yy.gaussian_blur(s), xy.gaussian_blur(s));
    let k = cfg.harris_k as f32;
    let mut r = Plane::new(gray.width, gray.height);
    for i in 0..r.data.len() {
        let det = xx.data[i] * yy.data[i] - xy.data[i] * xy.data[i];
        let tr = xx.data[i] + yy.data[i];
        r.data[i] = det - k * tr * tr;
    }
    r
}

fn is_local_max(r: &Plane, x: usize, y: usize, radius: usize) -> bool {
    let v = r.get(x, y);
    for yy in y - radius..=y + radius {
        for xx in x - radius..=x + radius {
            if (xx, yy) == (x, y) {
                continue;
            }
            let n = r.get(xx, yy);
            // Plateaus resolve to the first pixel in raster order.
            if n > v || (n == v && (yy, xx) < (y, x)) {
                return false;
            }
        }
    }
    true
}

fn parabolic_offset(a: f32, b: f32, c: f32) -> f64 {
    let denom = a - 2.0 * b + c;
    if denom.abs() < 1e-12 {
        0.0
    } else {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5) as f64
    }
}

/// Dominant gradient direction around `(u, v)` from a 36-bin
/// magnitude-weighted histogram with parabolic peak refinement.
fn dominant_orientation(gx: &Plane, gy: &Plane, u: f64, v: f64, radius: f64) -> f64 {
    const BINS: usize = 36;
    let mut hist = [0.0f64; BINS];
    let r = radius.ceil() as isize;
    let sigma2 = 2.0 * (radius / 2.0).powi(2);
    let (cx, cy) = (u.round() as isize, v.round() as isize);
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dx * dx + dy * dy) as f64;
            if d2 > radius * radius {
                continue;
            }
            let (x, y) = ((cx + dx) as usize, (cy + dy) as usize);
            let (ax, ay) = (gx.get(x, y) as f64, gy.get(x, y) as f64);
            let mag = ax.hypot(ay);
            if mag == 0.0 {
                continue;
            }
            let angle = ay.atan2(ax).rem_euclid(std::f64::consts::TAU);
            let bin = ((angle / std::f64::consts::TAU * BINS as f64) as usize).min(BINS - 1);
            hist[bin] += mag * (-d2 / sigma2).exp();
        }
    }
    let smoothed: Vec<f64> = (0..BINS)
        .map(|b| 0.25 * hist[(b + BINS - 1) % BINS] + 0.5 * hist[b] + 0.25 * hist[(b + 1) % BINS])
        .collect();
    let peak = (0..BINS).fold(0, |best, b| if smoothed[b] > smoothed[best] { b } else { best });
    let off = parabolic_offset(
        smoothed[(peak + BINS - 1) % BINS] as f32,
        smoothed[peak] as f32,
        smoothed[(peak + 1) % BINS] as f32,
    );
    ((peak as f64 + 0.5 + off) / BINS as f64 * std::f64::consts::TAU).rem_euclid(std::f64::consts::TAU)
}

fn describe(smooth: &Plane, pattern: &[[(f32, f32); 2]], u: f64, v: f64, orientation: f64) -> Descriptor {
    let (s, c) = (orientation.sin() as f32, orientation.cos() as f32);
    let (u, v) = (u as f32, v as f32);
    let at = |(px, py): (f32, f32)| smooth.sample(u + c * px - s * py, v + s * px + c * py);
    let mut words = vec![0u64; pattern.len() / 64];
    for (bit, [a, b]) in pattern.iter().enumerate() {
        if at(*a) < at(*b) {
            words[bit / 64] |= 1 << (bit % 64);
        }
    }
    Descriptor(words)
}

/// Pixels kept clear of the border so rotated descriptor samples stay inside.
fn border_margin(cfg: &DiscoveryConfig) -> usize {
    (cfg.patch_radius * std::f64::consts::SQRT_2).ceil() as usize + 2
}

/// Response, x, y.
type Corner = (f32, usize, usize);

pub fn detect_features(frame: &RgbdFrame, cfg: &DiscoveryConfig) -> Result<Vec<Feature>, DiscoveryError> {
    if cfg.descriptor_bits == 0 || !cfg.descriptor_bits.is_multiple_of(64) {
        return Err(DiscoveryError::DescriptorBits(cfg.descriptor_bits));
    }
    let margin = border_margin(cfg);
    let (w, h) = (frame.width() as usize, frame.height() as usize);
    if w <= 2 * margin || h <= 2 * margin {
        return Err(DiscoveryError::ImageTooSmall {
            width: frame.width(),
            height: frame.height(),
            min: (2 * margin + 1) as u32,
        });
    }

    let gray = Plane::luma(&frame.color).gaussian_blur(cfg.smoothing_sigma as f32);
    let response = harris_response(&gray, cfg);
    let peak = response.data.iter().copied().fold(0.0f32, f32::max) as f64;
    let threshold = cfg.harris_threshold.max(cfg.harris_relative_threshold * peak);

    // Strongest `per_cell` corners of every grid cell.
    let cell = cfg.grid_cell.max(1);
    let mut cells: BTreeMap<(usize, usize), Vec<Corner>> = BTreeMap::new();
    for y in margin..h - margin {
        for x in margin..w - margin {
            let r = response.get(x, y);
            if (r as f64) <= threshold || !is_local_max(&response, x, y, 2) {
                continue;
            }
            cells.entry((y / cell, x / cell)).or_default().push((r, x, y));
        }
    }
    let mut corners: Vec<(f32, usize, usize)> = Vec::new();
    for (_, mut list) in cells {
        list.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
        corners.extend(list.into_iter().take(cfg.per_cell));
    }
    corners.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
    corners.truncate(cfg.max_features);

    let (gx, gy) = gray.gradients();
    let smooth = gray.gaussian_blur(cfg.descriptor_sigma as f32);
    let pattern = brief_pattern(cfg.descriptor_bits, cfg.patch_radius);

    Ok(corners
        .into_iter()
        .map(|(r, x, y)| {
            let u = x as f64
                + parabolic_offset(response.get(x - 1, y), response.get(x, y), response.get(x + 1, y));
            let v = y as f64
                + parabolic_offset(response.get(x, y - 1), response.get(x, y), response.get(x, y + 1));
            let orientation = dominant_orientation(&gx, &gy, u, v, cfg.patch_radius);
            let descriptor = describe(&smooth, &pattern, u, v, orientation);
            let point3d = backproject(u, v, frame.depth_at(u, v), &frame.intrinsics);
            Feature {
                keypoint: Keypoint { u, v, response: r as f64, orientation, scale: cfg.patch_radius },
                descriptor,
                point3d,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Matching
// ---------------------------------------------------------------------------

/// Self-similarity search inside one frame.
///
/// For each feature the spatially admissible candidates are ranked by
/// Hamming distance. Walking the first `knn` of them, the accepted set ends
/// at the first gap where `d_l <= ratio * d_{l+1}`; a feature with no such
/// gap is ambiguous and contributes nothing. With a single repetition this
/// is Lowe's ratio test; with several it keeps all twins ahead of the gap.
pub fn match_intra_image(features: &[Feature], cfg: &DiscoveryConfig) -> Vec<FeatureMatch> {
    let mut out: BTreeMap<(usize, usize), u32> = BTreeMap::new();
    let k = cfg.knn.max(1);
    let mut candidates: Vec<(u32, usize)> = Vec::with_capacity(features.len());
    for (i, fi) in features.iter().enumerate() {
        candidates.clear();
        for (j, fj) in features.iter().enumerate() {
            if i != j && fi.pixel_distance(fj) >= cfg.min_spatial_separation {
                candidates.push((fi.descriptor.hamming(&fj.descriptor), j));
            }
        }
        if candidates.is_empty() {
            continue;
        }
        let take = (k + 1).min(candidates.len());
        candidates.select_nth_unstable(take - 1);
        candidates[..take].sort_unstable();

        let dist = |l: usize| candidates.get(l).map_or(f64::INFINITY, |c| c.0 as f64);
        let accepted = (0..k.min(candidates.len())).find(|&l| dist(l) <= cfg.ratio * dist(l + 1));
        if let Some(last) = accepted {
            for &(d, j) in &candidates[..=last] {
                out.insert((i.min(j), i.max(j)), d);
            }
        }
    }
    out.into_iter().map(|((i, j), distance)| FeatureMatch { i, j, distance }).collect()
}

// ---------------------------------------------------------------------------
// Rigid hypotheses
// ---------------------------------------------------------------------------

struct Correspondence {
    m: FeatureMatch,
    a: Vector3<f64>,
    b: Vector3<f64>,
}

/// Residual of `m` under `t`, trying both orientations. Returns the
/// oriented match with the smaller residual.
fn oriented_residual(t: &RigidTransform, c: &Correspondence) -> (f64, FeatureMatch) {
    let fwd = (t.apply(&c.a) - c.b).norm();
    let rev = (t.apply(&c.b) - c.a).norm();
    if fwd <= rev {
        (fwd, c.m)
    } else {
        (rev, c.m.reversed())
    }
}

fn inliers_of(t: &RigidTransform, corr: &[Correspondence], alive: &[bool], eps: f64) -> Vec<(usize, FeatureMatch)> {
    corr.iter()
        .enumerate()
        .filter(|(k, _)| alive[*k])
        .filter_map(|(k, c)| {
            let (r, m) = oriented_residual(t, c);
            (r <= eps).then_some((k, m))
        })
        .collect()
}

/// Drop oriented inliers whose either endpoint lies farther than `radius` pixels
/// from the coordinate-wise median of its side.
fn compact_inliers(features: &[Feature], inliers: Vec<(usize, FeatureMatch)>, radius: f64) -> Vec<(usize, FeatureMatch)> {
    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
    }
    if inliers.is_empty() {
        return inliers;
    }
    let kp = |i: usize| (features[i].keypoint.u, features[i].keypoint.v);
    let d = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).hypot(a.1 - b.1);
    let sides: Vec<((f64, f64), (f64, f64))> = inliers.iter().map(|(_, m)| (kp(m.i), kp(m.j))).collect();
    let ms = (median(sides.iter().map(|s| s.0 .0).collect()), median(sides.iter().map(|s| s.0 .1).collect()));
    let mt = (median(sides.iter().map(|s| s.1 .0).collect()), median(sides.iter().map(|s| s.1 .1).collect()));
    inliers
        .into_iter()
        .zip(sides)
        .filter(|(_, (a, b))| d(*a, ms) <= radius && d(*b, mt) <= radius)
        .map(|(m, _)| m)
        .collect()
}

/// Orient matches so that sources and targets form two coherent sides.
fn orient_by_sides(features: &[Feature], matches: &mut [FeatureMatch]) {
    let px = |idx: usize| (features[idx].keypoint.u, features[idx].keypoint.v);
    let dist = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).hypot(a.1 - b.1);
    let centroid = |ms: &[FeatureMatch], source: bool| {
        let n = ms.len() as f64;
        let (sx, sy) = ms.iter().fold((0.0, 0.0), |acc, m| {
            let p = px(if source { m.i } else { m.j });
            (acc.0 + p.0, acc.1 + p.1)
        });
        (sx / n, sy / n)
    };
    let Some(first) = matches.first() else { return };
    let (mut cs, mut ct) = (px(first.i), px(first.j));
    for _ in 0..10 {
        let mut changed = false;
        for m in matches.iter_mut() {
            let keep = dist(px(m.i), cs) + dist(px(m.j), ct);
            let flip = dist(px(m.j), cs) + dist(px(m.i), ct);
            if flip < keep {
                *m = m.reversed();
                changed = true;
            }
        }
        cs = centroid(matches, true);
        ct = centroid(matches, false);
        if !changed {
            break;
        }
    }
}

/// One polish round: gather inliers of `t`, orient them, drop spatial
/// outliers, refit, and keep matches whose forward residual under the
/// refit is within epsilon.
fn settle(
    features: &[Feature],
    corr: &[Correspondence],
    alive: &[bool],
    t: &RigidTransform,
    cfg: &DiscoveryConfig,
) -> Option<(RigidTransform, Vec<(usize, FeatureMatch)>)> {
    let inl = inliers_of(t, corr, alive, cfg.inlier_epsilon);
    let (keys, mut oriented): (Vec<usize>, Vec<FeatureMatch>) = inl.into_iter().unzip();
    orient_by_sides(features, &mut oriented);
    let compact = compact_inliers(features, keys.into_iter().zip(oriented).collect(), cfg.sample_radius_px);
    let ms: Vec<FeatureMatch> = compact.iter().map(|(_, m)| *m).collect();
    let refined = fit(features, &ms)?;
    let kept = compact
        .into_iter()
        .filter(|(_, m)| {
            let (a, b) = (features[m.i].point3d.unwrap(), features[m.j].point3d.unwrap());
            (refined.apply(&a) - b).norm() <= cfg.inlier_epsilon
        })
        .collect();
    Some((refined, kept))
}

fn fit(features: &[Feature], oriented: &[FeatureMatch]) -> Option<RigidTransform> {
    let src: Vec<_> = oriented.iter().map(|m| features[m.i].point3d.unwrap()).collect();
    let dst: Vec<_> = oriented.iter().map(|m| features[m.j].point3d.unwrap()).collect();
    estimate_rigid_transform(&src, &dst).ok()
}

/// RANSAC over 3D correspondences followed by greedy extraction of
/// disjoint hypotheses in order of current support.
pub fn hypothesize_transforms(features: &[Feature], matches: &[FeatureMatch], cfg: &DiscoveryConfig) -> Vec<Hypothesis> {
    let corr: Vec<Correspondence> = matches
        .iter()
        .filter_map(|m| {
            let a = features.get(m.i)?.point3d?;
            let b = features.get(m.j)?.point3d?;
            Some(Correspondence { m: *m, a, b })
        })
        .collect();
    if corr.len() < 3 {
        return Vec::new();
    }
    let eps = cfg.inlier_epsilon;
    let px = |idx: usize| (features[idx].keypoint.u, features[idx].keypoint.v);
    let near = |p: (f64, f64), q: (f64, f64)| (p.0 - q.0).hypot(p.1 - q.1) <= cfg.sample_radius_px;

    // Matches whose endpoints are close to another match's endpoints, in
    // either orientation.
    let neighbours: Vec<Vec<usize>> = corr
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let (a, b) = (px(c.m.i), px(c.m.j));
            corr.iter()
                .enumerate()
                .filter(|&(l, d)| {
                    let (x, y) = (px(d.m.i), px(d.m.j));
                    l != k && ((near(a, x) && near(b, y)) || (near(a, y) && near(b, x)))
                })
                .map(|(l, _)| l)
                .collect()
        })
        .collect();

    let alive_all = vec![true; corr.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut heap: BinaryHeap<(usize, Reverse<usize>)> = BinaryHeap::new();
    let mut candidates: Vec<RigidTransform> = Vec::new();

    for _ in 0..cfg.ransac_iters {
        let first = rng.gen_range(0..corr.len());
        let pool = &neighbours[first];
        let (second, third) = if pool.len() >= 2 {
            let s = rng.gen_range(0..pool.len());
            let mut t = rng.gen_range(0..pool.len() - 1);
            if t >= s {
                t += 1;
            }
            (pool[s], pool[t])
        } else {
            let s = rng.gen_range(0..corr.len());
            let t = rng.gen_range(0..corr.len());
            (s, t)
        };
        if first == second || first == third || second == third {
            continue;
        }

        // Orient the second and third samples to agree with the first under
        // distance preservation.
        let c1 = &corr[first];
        let mut sample = vec![(c1.a, c1.b)];
        for &idx in &[second, third] {
            let c = &corr[idx];
            let fwd = ((c1.a - c.a).norm() - (c1.b - c.b).norm()).abs();
            let rev = ((c1.a - c.b).norm() - (c1.b - c.a).norm()).abs();
            sample.push(if fwd <= rev { (c.a, c.b) } else { (c.b, c.a) });
        }
        let consistent = (0..3).all(|p| {
            (p + 1..3).all(|q| {
                ((sample[p].0 - sample[q].0).norm() - (sample[p].1 - sample[q].1).norm()).abs() <= 2.0 * eps
            })
        });
        if !consistent {
            continue;
        }
        let src: Vec<_> = sample.iter().map(|s| s.0).collect();
        let dst: Vec<_> = sample.iter().map(|s| s.1).collect();
        let Ok(t) = estimate_rigid_transform(&src, &dst) else { continue };
        let count = inliers_of(&t, &corr, &alive_all, eps).len();
        if count >= cfg.min_inliers {
            // Slots are allocated in iteration order, so ties go to the
            // earlier iteration.
            heap.push((count, Reverse(candidates.len())));
            candidates.push(t);
        }
    }

    let mut alive = vec![true; corr.len()];
    let mut out = Vec::new();
    while let Some((count, Reverse(slot))) = heap.pop() {
        let t = candidates[slot];
        let inl = inliers_of(&t, &corr, &alive, eps);
        if inl.len() < cfg.min_inliers {
            continue;
        }
        if inl.len() < count {
            heap.push((inl.len(), Reverse(slot)));
            continue;
        }

        // Least-squares polish on the oriented, compact inlier set.
        let (mut best_t, mut best) = (t, Vec::new());
        for _ in 0..3 {
            let Some((refined, kept)) = settle(features, &corr, &alive, &best_t, cfg) else { break };
            if kept.len() <= best.len() {
                break;
            }
            best_t = refined;
            best = kept;
        }
        if best.len() < cfg.min_inliers {
            continue;
        }
        for (k, _) in &best {
            alive[*k] = false;
        }
        let inliers = best.into_iter().map(|(_, m)| m).collect();
        out.push(Hypothesis { transform: best_t, inliers, members: Vec::new() });
    }
    out
}

/// Attach matches that lack depth on exactly one endpoint to the hypothesis
/// they agree with in the image plane. These count towards cluster
/// membership but never towards a transform.
pub fn attach_depthless_matches(
    features: &[Feature],
    matches: &[FeatureMatch],
    hypotheses: &mut [Hypothesis],
    intrinsics: &CameraIntrinsics,
    cfg: &DiscoveryConfig,
) {
    let used: BTreeSet<(usize, usize)> =
        hypotheses.iter().flat_map(|h| h.inliers.iter().map(FeatureMatch::key)).collect();
    for m in matches {
        if used.contains(&m.key()) {
            continue;
        }
        let (fi, fj) = (&features[m.i], &features[m.j]);
        let (with_depth, without, lifted) = match (fi.point3d, fj.point3d) {
            (Some(p), None) => (*m, fj, p),
            (None, Some(p)) => (m.reversed(), fi, p),
            _ => continue,
        };
        let mut best: Option<(f64, usize, FeatureMatch)> = None;
        for (hi, h) in hypotheses.iter().enumerate() {
            // The depth endpoint as source (forward) or as target (inverse).
            for (t, oriented) in [(h.transform, with_depth), (h.transform.inverse(), with_depth.reversed())] {
                let p = t.apply(&lifted);
                let Some((pu, pv)) = intrinsics.project(&p) else { continue };
                let err = (pu - without.keypoint.u).hypot(pv - without.keypoint.v);
                let tol = cfg.inlier_epsilon * intrinsics.fx / p.z;
                if err <= tol && best.is_none_or(|b| err < b.0) {
                    best = Some((err, hi, oriented));
                }
            }
        }
        if let Some((_, hi, oriented)) = best {
            hypotheses[hi].members.push(oriented);
        }
    }
}

// ---------------------------------------------------------------------------
// Clusters and groups
// ---------------------------------------------------------------------------

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.0[root] != root {
            root = self.0[root];
        }
        let mut cur = x;
        while self.0[cur] != root {
            let next = self.0[cur];
            self.0[cur] = root;
            cur = next;
        }
        root
    }

    /// Union keeping the smaller index as root.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

pub fn extract_clusters(
    features: &[Feature],
    hypotheses: &[Hypothesis],
    cfg: &DiscoveryConfig,
) -> (Vec<InstanceCluster>, Vec<ObjectGroup>) {
    // Node 2h is the source side of hypothesis h, node 2h+1 the target side.
    let sides: Vec<BTreeSet<usize>> = hypotheses
        .iter()
        .flat_map(|h| {
            let all = h.inliers.iter().chain(&h.members);
            let src: BTreeSet<usize> = all.clone().map(|m| m.i).filter(|&i| i < features.len()).collect();
            let dst: BTreeSet<usize> = all.map(|m| m.j).filter(|&j| j < features.len()).collect();
            [src, dst]
        })
        .collect();

    let mut sets = DisjointSet::new(sides.len());
    for a in 0..sides.len() {
        for b in a + 1..sides.len() {
            let smaller = sides[a].len().min(sides[b].len());
            if smaller == 0 {
                continue;
            }
            let shared = sides[a].intersection(&sides[b]).count();
            if shared as f64 >= cfg.merge_overlap * smaller as f64 {
                sets.union(a, b);
            }
        }
    }

    // Merged clusters keyed by root node, in root order.
    let mut merged: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    let mut support: BTreeMap<usize, usize> = BTreeMap::new();
    for (node, side) in sides.iter().enumerate() {
        let root = sets.find(node);
        merged.entry(root).or_default().extend(side.iter().copied());
        *support.entry(root).or_default() += hypotheses[node / 2].support();
    }

    // A feature claimed by several clusters stays with the best supported.
    let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
    for (&root, feats) in &merged {
        for &f in feats {
            owner
                .entry(f)
                .and_modify(|cur| {
                    if support[&root] > support[cur] {
                        *cur = root;
                    }
                })
                .or_insert(root);
        }
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (f, root) in owner {
        members.entry(root).or_default().push(f);
    }
    members.retain(|_, feats| feats.len() >= cfg.min_cluster_size);

    // Association graph over surviving clusters.
    let roots: Vec<usize> = members.keys().copied().collect();
    let index_of = |root: usize| roots.binary_search(&root).ok();
    let mut graph = DisjointSet::new(roots.len());
    let mut edges: Vec<(usize, usize, usize)> = Vec::new();
    for h in 0..hypotheses.len() {
        let (a, b) = (sets.find(2 * h), sets.find(2 * h + 1));
        if a == b {
            continue;
        }
        if let (Some(ia), Some(ib)) = (index_of(a), index_of(b)) {
            graph.union(ia, ib);
            edges.push((ia, ib, h));
        }
    }

    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..roots.len() {
        components.entry(graph.find(i)).or_default().push(i);
    }

    let mut clusters = Vec::new();
    let mut groups = Vec::new();
    let mut instance_of = vec![usize::MAX; roots.len()];
    for nodes in components.values().filter(|n| n.len() >= 2) {
        let group_id = groups.len();
        let mut instance_ids = Vec::with_capacity(nodes.len());
        for &n in nodes {
            let instance_id = clusters.len();
            instance_of[n] = instance_id;
            instance_ids.push(instance_id);
            clusters.push(InstanceCluster {
                instance_id,
                feature_indices: members[&roots[n]].clone(),
                group_id,
                support: support[&roots[n]],
            });
        }
        groups.push(ObjectGroup { group_id, instance_ids, pairwise_transforms: BTreeMap::new() });
    }
    for (ia, ib, h) in edges {
        let (sa, sb) = (instance_of[ia], instance_of[ib]);
        if sa == usize::MAX || sb == usize::MAX {
            continue;
        }
        let group = &mut groups[clusters[sa].group_id];
        let hyp = &hypotheses[h];
        let entry = group.pairwise_transforms.entry((sa, sb)).or_insert((hyp.transform, hyp.support()));
        if hyp.support() > entry.1 {
            *entry = (hyp.transform, hyp.support());
        }
    }
    (clusters, groups)
}

pub fn discover(frame: &RgbdFrame, cfg: &DiscoveryConfig) -> Result<Discovery, DiscoveryError> {
    let features = detect_features(frame, cfg)?;
    let matches = match_intra_image(&features, cfg);
    let mut hypotheses = hypothesize_transforms(&features, &matches, cfg);
    attach_depthless_matches(&features, &matches, &mut hypotheses, &frame.intrinsics, cfg);
    let (clusters, groups) = extract_clusters(&features, &hypotheses, cfg);
    Ok(Discovery { features, matches, hypotheses, clusters, groups })
}
