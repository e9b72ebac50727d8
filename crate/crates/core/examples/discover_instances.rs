//! Find repeated instances in one frame without any classifier.
//!
//! cargo run --release --example discover_instances

use multidet::discovery::{detect_features, discover, hypothesize_transforms, match_intra_image, DiscoveryConfig};
use multidet::geometry::iou;
use multidet::pipeline::{propose_instances, PipelineConfig};
use multidet::scenegen::{generate, SceneSpec};

fn main() -> anyhow::Result<()> {
    let scene = generate(&SceneSpec { placement_seed: 3, ..Default::default() })?;
    let cfg = DiscoveryConfig::default();

    // The stages, one at a time.
    let features = detect_features(&scene.frame, &cfg)?;
    let matches = match_intra_image(&features, &cfg);
    let hypotheses = hypothesize_transforms(&features, &matches, &cfg);
    println!("{} features, {} matches, {} transform hypotheses", features.len(), matches.len(), hypotheses.len());

    let d = discover(&scene.frame, &cfg)?;
    for g in &d.groups {
        let sizes: Vec<_> = d.clusters_of(g).iter().map(|c| c.feature_indices.len()).collect();
        println!("group {}: instances {:?}, features per instance {:?}", g.group_id, g.instance_ids, sizes);
        for ((a, b), (t, inliers)) in &g.pairwise_transforms {
            let (rot, _) = t.orthonormality_error();
            println!("  {a} -> {b}: {inliers} inliers, |t| = {:.3} m, orthonormality {rot:.1e}", t.translation.norm());
        }
    }

    let (_, proposals) = propose_instances(&scene.frame, &PipelineConfig::default().resolved())?;
    for p in &proposals {
        let best = scene.gt_boxes.iter().map(|g| iou(&p.bbox, &g.bbox)).fold(0.0, f64::max);
        println!("proposal {} (group {:?}): best IOU with ground truth {best:.2}", p.instance_id, p.group_id);
    }
    Ok(())
}
