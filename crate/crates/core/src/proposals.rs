//! Cluster boxes, expansion into proposals and classifier-ready crops.

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discovery::{Feature, InstanceCluster};
use crate::geometry::{expand_box, BoundingBox};
use crate::imaging::{planes_to_rgb, Plane};

#[derive(Debug, Error, PartialEq)]
pub enum ProposalError {
    #[error("cluster {0} has no features")]
    EmptyCluster(usize),
    #[error("cluster references feature {0} which does not exist")]
    UnknownFeature(usize),
    #[error("proposal box has zero area after clipping to the image")]
    ZeroArea,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    /// Relative growth of each side of the tight cluster box.
    pub expand_factor: f64,
    /// Longest side of the crop handed to the classifier.
    pub target_longest_side: u32,
    /// Anti-alias blur σ per unit of downscale ratio above 1.
    pub blur_sigma_per_ratio: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self { expand_factor: 0.6, target_longest_side: 640, blur_sigma_per_ratio: 0.5 }
    }
}

/// A candidate region with the instance/group it came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub instance_id: usize,
    pub group_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedCrop {
    pub pixels: RgbImage,
    pub source: Proposal,
    /// Output size over source size.
    pub scale_factor: f64,
}

/// Tight box over the cluster's keypoint positions.
pub fn cluster_to_box(cluster: &InstanceCluster, features: &[Feature]) -> Result<BoundingBox, ProposalError> {
    let mut points = Vec::with_capacity(cluster.feature_indices.len());
    for &i in &cluster.feature_indices {
        let f = features.get(i).ok_or(ProposalError::UnknownFeature(i))?;
        points.push((f.keypoint.u, f.keypoint.v));
    }
    BoundingBox::enclosing(points).ok_or(ProposalError::EmptyCluster(cluster.instance_id))
}

pub fn propose(
    cluster: &InstanceCluster,
    features: &[Feature],
    image_bounds: &BoundingBox,
    cfg: &ProposalConfig,
) -> Result<Proposal, ProposalError> {
    let tight = cluster_to_box(cluster, features)?;
    Ok(Proposal {
        bbox: expand_box(&tight, cfg.expand_factor, image_bounds),
        instance_id: cluster.instance_id,
        group_id: Some(cluster.group_id),
    })
}

fn round_half_up(v: f64) -> u32 {
    (v + 0.5).floor() as u32
}

/// Output dimensions: the longer side becomes `target`, the shorter keeps
/// the aspect ratio (rounded half-up, at least 1 px).
pub fn target_dimensions(width: u32, height: u32, target: u32) -> (u32, u32) {
    if width >= height {
        let h = round_half_up(height as f64 * target as f64 / width as f64).max(1);
        (target, h)
    } else {
        let w = round_half_up(width as f64 * target as f64 / height as f64).max(1);
        (w, target)
    }
}

/// Crop the proposal, low-pass when shrinking, then bilinearly resize so
/// the longest side equals `cfg.target_longest_side`.
pub fn preprocess(color: &RgbImage, proposal: &Proposal, cfg: &ProposalConfig) -> Result<PreprocessedCrop, ProposalError> {
    let b = proposal.bbox.clip(&BoundingBox::image(color.width(), color.height()));
    if b.area() <= 0.0 {
        return Err(ProposalError::ZeroArea);
    }
    let x0 = b.x_min.floor() as usize;
    let y0 = b.y_min.floor() as usize;
    let x1 = (b.x_max.ceil() as usize).min(color.width() as usize);
    let y1 = (b.y_max.ceil() as usize).min(color.height() as usize);
    let (w, h) = (x1 - x0, y1 - y0);
    if w == 0 || h == 0 {
        return Err(ProposalError::ZeroArea);
    }

    let (ow, oh) = target_dimensions(w as u32, h as u32, cfg.target_longest_side);
    let longest = w.max(h) as f64;
    let ratio = longest / cfg.target_longest_side as f64;
    let sigma = cfg.blur_sigma_per_ratio * (ratio - 1.0);

    let planes = Plane::channels(color);
    let out: [Plane; 3] = std::array::from_fn(|c| {
        let mut p = planes[c].crop(x0, y0, w, h);
        if sigma > 0.0 {
            p = p.gaussian_blur(sigma as f32);
        }
        p.resize_bilinear(ow as usize, oh as usize)
    });
    Ok(PreprocessedCrop { pixels: planes_to_rgb(&out), source: *proposal, scale_factor: 1.0 / ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discovery::Keypoint;
    use image::Rgb;
    use proptest::prelude::*;

    fn feature_at(u: f64, v: f64) -> Feature {
        Feature {
            keypoint: Keypoint { u, v, response: 1.0, orientation: 0.0, scale: 1.0 },
            descriptor: Default::default(),
            point3d: None,
        }
    }

    fn cluster(indices: Vec<usize>) -> InstanceCluster {
        InstanceCluster { instance_id: 3, feature_indices: indices, group_id: 1, support: 8 }
    }

    fn proposal(x0: f64, y0: f64, x1: f64, y1: f64) -> Proposal {
        Proposal { bbox: BoundingBox::new(x0, y0, x1, y1).unwrap(), instance_id: 0, group_id: None }
    }

    #[test]
    fn cluster_box_is_min_max() {
        let feats = vec![feature_at(5.0, 5.0), feature_at(10.0, 20.0)];
        let b = cluster_to_box(&cluster(vec![0, 1]), &feats).unwrap();
        assert_eq!(<[f64; 4]>::from(b), [5.0, 5.0, 10.0, 20.0]);
        let b = cluster_to_box(&cluster(vec![0]), &[feature_at(7.0, 7.0)]).unwrap();
        assert_eq!(<[f64; 4]>::from(b), [7.0, 7.0, 7.0, 7.0]);
        assert_eq!(cluster_to_box(&cluster(vec![]), &feats), Err(ProposalError::EmptyCluster(3)));
        assert_eq!(cluster_to_box(&cluster(vec![9]), &feats), Err(ProposalError::UnknownFeature(9)));
    }

    #[test]
    fn propose_expands_and_clips() {
        let bounds = BoundingBox::image(100, 100);
        let feats = vec![feature_at(10.0, 10.0), feature_at(20.0, 20.0), feature_at(0.0, 0.0)];
        let p = propose(&cluster(vec![0, 1]), &feats, &bounds, &ProposalConfig::default()).unwrap();
        let got = <[f64; 4]>::from(p.bbox);
        for (g, w) in got.iter().zip([7.0, 7.0, 23.0, 23.0]) {
            assert!((g - w).abs() < 1e-12);
        }
        assert_eq!(p.group_id, Some(1));

        let p = propose(&cluster(vec![2, 1]), &feats, &bounds, &ProposalConfig::default()).unwrap();
        assert_eq!(p.bbox.x_min, 0.0);
        assert!(bounds.contains_box(&p.bbox));

        let zero = ProposalConfig { expand_factor: 0.0, ..Default::default() };
        let p = propose(&cluster(vec![0, 1]), &feats, &bounds, &zero).unwrap();
        assert_eq!(<[f64; 4]>::from(p.bbox), [10.0, 10.0, 20.0, 20.0]);
    }

    #[test]
    fn downscale_to_640() {
        let img = RgbImage::from_fn(1280, 960, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 7]));
        let crop = preprocess(&img, &proposal(0.0, 0.0, 1280.0, 960.0), &ProposalConfig::default()).unwrap();
        assert_eq!(crop.pixels.dimensions(), (640, 480));
        assert!((crop.scale_factor - 0.5).abs() < 1e-12);
    }

    #[test]
    fn already_at_target_is_untouched() {
        let img = RgbImage::from_fn(700, 400, |x, y| Rgb([(x * 3 % 256) as u8, (y * 5 % 256) as u8, ((x + y) % 256) as u8]));
        let crop = preprocess(&img, &proposal(10.0, 20.0, 650.0, 340.0), &ProposalConfig::default()).unwrap();
        assert_eq!(crop.pixels.dimensions(), (640, 320));
        for (x, y, p) in crop.pixels.enumerate_pixels() {
            assert_eq!(p, img.get_pixel(x + 10, y + 20));
        }
        // Re-running on the output is pixel exact.
        let again = preprocess(&crop.pixels, &proposal(0.0, 0.0, 640.0, 320.0), &ProposalConfig::default()).unwrap();
        assert_eq!(again.pixels, crop.pixels);
    }

    #[test]
    fn zero_area_rejected() {
        let img = RgbImage::new(50, 50);
        assert_eq!(preprocess(&img, &proposal(5.0, 5.0, 5.0, 30.0), &ProposalConfig::default()), Err(ProposalError::ZeroArea));
        assert_eq!(preprocess(&img, &proposal(60.0, 60.0, 70.0, 70.0), &ProposalConfig::default()), Err(ProposalError::ZeroArea));
    }

    #[test]
    fn target_dimension_rounding() {
        assert_eq!(target_dimensions(1280, 960, 640), (640, 480));
        assert_eq!(target_dimensions(3, 1000, 640), (2, 640));
        assert_eq!(target_dimensions(1000, 1, 640), (640, 1));
        assert_eq!(target_dimensions(5, 5, 640), (640, 640));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn constant_crops_stay_constant(w in 1u32..900, h in 1u32..900, r: u8, g: u8, b: u8) {
            let img = RgbImage::from_pixel(w, h, Rgb([r, g, b]));
            let crop = preprocess(&img, &proposal(0.0, 0.0, w as f64, h as f64), &ProposalConfig::default()).unwrap();
            let (ow, oh) = crop.pixels.dimensions();
            prop_assert_eq!(ow.max(oh), 640);
            let short = 640.0 * w.min(h) as f64 / w.max(h) as f64;
            prop_assert!((ow.min(oh) as f64 - short.max(1.0)).abs() <= 0.5);
            prop_assert!(crop.pixels.pixels().all(|p| *p == Rgb([r, g, b])));
        }

        #[test]
        fn output_within_input_range(w in 2u32..200, h in 2u32..200, seed: u64) {
            let img = RgbImage::from_fn(w, h, |x, y| {
                let v = ((x as u64 * 31 + y as u64 * 17 + seed) % 120 + 60) as u8;
                Rgb([v, v / 2 + 10, 200 - v])
            });
            let (lo, hi) = img.pixels().fold(([255u8; 3], [0u8; 3]), |(mut lo, mut hi), p| {
                for c in 0..3 { lo[c] = lo[c].min(p[c]); hi[c] = hi[c].max(p[c]); }
                (lo, hi)
            });
            let cfg = ProposalConfig { target_longest_side: 64, ..Default::default() };
            let crop = preprocess(&img, &proposal(0.0, 0.0, w as f64, h as f64), &cfg).unwrap();
            for p in crop.pixels.pixels() {
                for c in 0..3 {
                    prop_assert!(p[c] >= lo[c] && p[c] <= hi[c]);
                }
            }
        }
    }
}
