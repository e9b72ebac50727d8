//! Deterministic synthetic RGB-D tabletop scenes with exact ground truth.
//!
//! A scene is a flat table plane facing the camera with `K` object types
//! placed `M` times each. Every type has its own texture: a plain margin
//! close to the table color around a feature-rich core of band-limited noise
//! and hard-edged blocks. Instances differ only by position, in-plane
//! rotation and a small depth offset above the table.

use image::{Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::GroundTruthBox;
use crate::frame::{DepthImage, RgbdFrame};
use crate::geometry::{BoundingBox, CameraIntrinsics};
use crate::imaging::Plane;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("placement failed after {0} attempts")]
    PlacementFailed(usize),
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("object type {0} renders too close to the background color")]
    FlatTexture(usize),
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;
const TABLE_GRAY: f32 = 128.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub object_types: usize,
    pub instances_per_type: usize,
    pub width: u32,
    pub height: u32,
    pub table_depth_m: f64,
    pub texture_seed: u64,
    pub placement_seed: u64,
    pub min_separation_px: f64,
    /// Range of the longer side of an object face, in pixels.
    pub object_size_px: (f64, f64),
    /// Short side over long side.
    pub aspect_range: (f64, f64),
    /// Height of each instance above the table, meters.
    pub depth_offset_m: (f64, f64),
    /// Fraction of each side covered by the textured core.
    pub core_fraction: f64,
    /// Class index assigned to object type `t` is `type_classes[t % len]`.
    pub type_classes: Vec<usize>,
    pub intrinsics: CameraIntrinsics,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            object_types: 3,
            instances_per_type: 2,
            width: 640,
            height: 480,
            table_depth_m: 1.2,
            texture_seed: 7,
            placement_seed: 0,
            min_separation_px: 8.0,
            object_size_px: (100.0, 125.0),
            aspect_range: (0.7, 0.85),
            depth_offset_m: (0.02, 0.04),
            core_fraction: 0.6,
            type_classes: vec![692, 917, 549],
            intrinsics: CameraIntrinsics { fx: 525.0, fy: 525.0, cx: 319.5, cy: 239.5, depth_scale: 0.001 },
        }
    }
}

/// Where one instance landed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub object_type_id: usize,
    pub center: (f64, f64),
    pub angle_rad: f64,
    pub size: (f64, f64),
    pub depth_offset_m: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub frame: RgbdFrame,
    pub gt_boxes: Vec<GroundTruthBox>,
    pub placements: Vec<Placement>,
}

/// Source texture of one object type.
#[derive(Debug, Clone)]
pub struct ObjectTexture {
    pub planes: [Plane; 3],
    pub core: BoundingBox,
}

impl ObjectTexture {
    pub fn width(&self) -> usize {
        self.planes[0].width
    }

    pub fn height(&self) -> usize {
        self.planes[0].height
    }

    /// FNV-1a over the quantised texels.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.planes {
            for v in &p.data {
                h ^= v.round() as u8 as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Smooth random field: uniform samples on a coarse lattice, bilinearly
/// interpolated.
fn lattice_noise(rng: &mut ChaCha8Rng, w: usize, h: usize, cell: usize, lo: f32, hi: f32) -> Plane {
    let gw = w / cell + 2;
    let gh = h / cell + 2;
    let mut grid = Plane::new(gw, gh);
    for v in grid.data.iter_mut() {
        *v = rng.gen_range(lo..hi);
    }
    let mut out = Plane::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, grid.sample(x as f32 / cell as f32, y as f32 / cell as f32));
        }
    }
    out
}

/// Texture for one object type. Depends only on `(texture_seed, type_id)`
/// and the sizes drawn from it, so a type looks the same in every scene.
pub fn object_texture(spec: &SceneSpec, type_id: usize) -> ObjectTexture {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.texture_seed, type_id as u64 + 1));
    let long = rng.gen_range(spec.object_size_px.0..=spec.object_size_px.1);
    let short = long * rng.gen_range(spec.aspect_range.0..=spec.aspect_range.1);
    let (w, h) = if rng.gen_bool(0.5) { (short, long) } else { (long, short) };
    let (w, h) = (w.round() as usize, h.round() as usize);

    let margin_color: [f32; 3] = std::array::from_fn(|_| TABLE_GRAY + rng.gen_range(-8.0..8.0));
    let mut planes: [Plane; 3] = std::array::from_fn(|c| Plane::filled(w, h, margin_color[c]));

    let inset = (1.0 - spec.core_fraction) * 0.5;
    let core = BoundingBox {
        x_min: (w as f64 * inset).round(),
        y_min: (h as f64 * inset).round(),
        x_max: (w as f64 * (1.0 - inset)).round(),
        y_max: (h as f64 * (1.0 - inset)).round(),
    };
    let (cx0, cy0) = (core.x_min as usize, core.y_min as usize);
    let (cw, ch) = (core.width() as usize, core.height() as usize);

    let noise: Vec<Plane> = (0..3).map(|_| lattice_noise(&mut rng, cw, ch, 6, 30.0, 225.0)).collect();
    for c in 0..3 {
        for y in 0..ch {
            for x in 0..cw {
                planes[c].set(cx0 + x, cy0 + y, noise[c].get(x, y));
            }
        }
    }

    // Hard-edged blocks give strong, well-localised corners.
    let blocks = (cw * ch) / 120;
    for _ in 0..blocks {
        let bw = rng.gen_range(4..=12).min(cw);
        let bh = rng.gen_range(4..=12).min(ch);
        let bx = rng.gen_range(0..=cw - bw);
        let by = rng.gen_range(0..=ch - bh);
        let color: [f32; 3] = std::array::from_fn(|_| if rng.gen_bool(0.5) { rng.gen_range(0.0..40.0) } else { rng.gen_range(215.0..255.0) });
        for c in 0..3 {
            for y in by..by + bh {
                for x in bx..bx + bw {
                    planes[c].set(cx0 + x, cy0 + y, color[c]);
                }
            }
        }
    }
    ObjectTexture { planes, core }
}

/// Axis-aligned half extents of a `w x h` rectangle rotated by `angle`.
fn rotated_half_extents(w: f64, h: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (0.5 * (w * c.abs() + h * s.abs()), 0.5 * (w * s.abs() + h * c.abs()))
}

pub fn generate(spec: &SceneSpec) -> Result<SyntheticScene, SceneError> {
    if spec.object_types == 0 || spec.instances_per_type == 0 {
        return Err(SceneError::InvalidSpec("object_types and instances_per_type must be positive".into()));
    }
    if spec.type_classes.is_empty() {
        return Err(SceneError::InvalidSpec("type_classes is empty".into()));
    }
    if !spec.intrinsics.is_valid() || spec.table_depth_m <= spec.depth_offset_m.1 {
        return Err(SceneError::InvalidSpec("camera or depth range invalid".into()));
    }
    let (width, height) = (spec.width as usize, spec.height as usize);

    let textures: Vec<ObjectTexture> = (0..spec.object_types).map(|t| object_texture(spec, t)).collect();
    let mut fingerprints: Vec<u64> = textures.iter().map(ObjectTexture::fingerprint).collect();
    fingerprints.sort_unstable();
    fingerprints.dedup();
    if fingerprints.len() != textures.len() {
        return Err(SceneError::InvalidSpec("texture seed produced identical object types".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.placement_seed, 0x5ce7e));

    // Place instances by rejection sampling on padded bounding boxes.
    let mut placements: Vec<Placement> = Vec::new();
    let mut occupied: Vec<BoundingBox> = Vec::new();
    let mut attempts = 0usize;
    for (type_id, tex) in textures.iter().enumerate() {
        let (w, h) = (tex.width() as f64, tex.height() as f64);
        for _ in 0..spec.instances_per_type {
            loop {
                attempts += 1;
                if attempts > MAX_PLACEMENT_ATTEMPTS {
                    return Err(SceneError::PlacementFailed(MAX_PLACEMENT_ATTEMPTS));
                }
                let angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let (ex, ey) = rotated_half_extents(w, h, angle);
                let pad = 2.0;
                if 2.0 * (ex + pad) >= width as f64 || 2.0 * (ey + pad) >= height as f64 {
                    continue;
                }
                let cx = rng.gen_range(ex + pad..width as f64 - ex - pad);
                let cy = rng.gen_range(ey + pad..height as f64 - ey - pad);
                let half_sep = 0.5 * spec.min_separation_px;
                let footprint = BoundingBox {
                    x_min: cx - ex - half_sep,
                    y_min: cy - ey - half_sep,
                    x_max: cx + ex + half_sep,
                    y_max: cy + ey + half_sep,
                };
                if occupied.iter().any(|o| o.intersection_area(&footprint) > 0.0) {
                    continue;
                }
                occupied.push(footprint);
                let offset = rng.gen_range(spec.depth_offset_m.0..=spec.depth_offset_m.1);
                placements.push(Placement {
                    object_type_id: type_id,
                    center: (cx, cy),
                    angle_rad: angle,
                    size: (w, h),
                    depth_offset_m: offset,
                });
                break;
            }
        }
    }

    // Table background.
    let background: Vec<Plane> = (0..3)
        .map(|_| lattice_noise(&mut rng, width, height, 16, TABLE_GRAY - 4.0, TABLE_GRAY + 4.0))
        .collect();
    let mut color = RgbImage::from_fn(spec.width, spec.height, |x, y| {
        let px = |c: usize| background[c].get(x as usize, y as usize).round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    });
    let table_raw = (spec.table_depth_m / spec.intrinsics.depth_scale).round() as u16;
    let mut depth = DepthImage::from_pixel(spec.width, spec.height, Luma([table_raw]));

    let mut gt_boxes = Vec::with_capacity(placements.len());
    for p in &placements {
        let tex = &textures[p.object_type_id];
        let (w, h) = p.size;
        let (ex, ey) = rotated_half_extents(w, h, p.angle_rad);
        let (s, c) = p.angle_rad.sin_cos();
        let raw = ((spec.table_depth_m - p.depth_offset_m) / spec.intrinsics.depth_scale).round() as u16;
        let x0 = (p.center.0 - ex).floor().max(0.0) as u32;
        let y0 = (p.center.1 - ey).floor().max(0.0) as u32;
        let x1 = ((p.center.0 + ex).ceil() as u32).min(spec.width - 1);
        let y1 = ((p.center.1 + ey).ceil() as u32).min(spec.height - 1);

        let mut extent: Option<(u32, u32, u32, u32)> = None;
        let mut diff_sum = 0.0f64;
        let mut count = 0usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f64 + 0.5 - p.center.0;
                let dy = y as f64 + 0.5 - p.center.1;
                // Rotate the pixel offset back into texture coordinates.
                let lx = c * dx + s * dy;
                let ly = -s * dx + c * dy;
                if lx.abs() > 0.5 * w || ly.abs() > 0.5 * h {
                    continue;
                }
                let tx = (lx + 0.5 * w - 0.5) as f32;
                let ty = (ly + 0.5 * h - 0.5) as f32;
                let px: [u8; 3] = std::array::from_fn(|ch| tex.planes[ch].sample(tx, ty).round().clamp(0.0, 255.0) as u8);
                let bg = color.get_pixel(x, y);
                diff_sum += (0..3).map(|ch| (px[ch] as f64 - bg[ch] as f64).abs()).sum::<f64>() / 3.0;
                count += 1;
                color.put_pixel(x, y, Rgb(px));
                depth.put_pixel(x, y, Luma([raw]));
                extent = Some(match extent {
                    None => (x, y, x, y),
                    Some((a, b, cc, d)) => (a.min(x), b.min(y), cc.max(x), d.max(y)),
                });
            }
        }
        let (ax, ay, bx, by) = extent.ok_or(SceneError::FlatTexture(p.object_type_id))?;
        if count == 0 || diff_sum / (count as f64) < 10.0 {
            return Err(SceneError::FlatTexture(p.object_type_id));
        }
        gt_boxes.push(GroundTruthBox {
            bbox: BoundingBox { x_min: ax as f64, y_min: ay as f64, x_max: bx as f64 + 1.0, y_max: by as f64 + 1.0 },
            class_index: spec.type_classes[p.object_type_id % spec.type_classes.len()],
            object_type_id: p.object_type_id,
        });
    }

    let frame_id = format!("scene_{:04}", spec.placement_seed);
    let frame = RgbdFrame::new(frame_id, color, depth, spec.intrinsics)
        .map_err(|e| SceneError::InvalidSpec(e.to_string()))?;
    Ok(SyntheticScene { frame, gt_boxes, placements })
}

/// Box of the textured core of a placed instance, in image coordinates.
pub fn core_box(spec: &SceneSpec, p: &Placement) -> BoundingBox {
    let tex = object_texture(spec, p.object_type_id);
    let (w, h) = p.size;
    let (s, c) = p.angle_rad.sin_cos();
    let corners = [
        (tex.core.x_min, tex.core.y_min),
        (tex.core.x_max, tex.core.y_min),
        (tex.core.x_min, tex.core.y_max),
        (tex.core.x_max, tex.core.y_max),
    ];
    BoundingBox::enclosing(corners.iter().map(|&(tx, ty)| {
        let lx = tx - 0.5 * w;
        let ly = ty - 0.5 * h;
        (p.center.0 + c * lx - s * ly, p.center.1 + s * lx + c * ly)
    }))
    .expect("four corners")
}
