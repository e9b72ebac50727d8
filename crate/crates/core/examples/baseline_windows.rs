//! The sliding-window baseline around a deterministic stub classifier.

use multidet::baseline::{propose_windows_scored, run_baseline_full, window_grid, BaselineConfig};
use multidet::classify::{StubClassifier, StubConfig};
use multidet::scenegen::{generate, SceneSpec};

fn main() -> anyhow::Result<()> {
    let scene = generate(&SceneSpec::default())?;
    let cfg = BaselineConfig::default();
    let grid = window_grid(scene.frame.width(), scene.frame.height(), &cfg.windows);
    let scored = propose_windows_scored(&scene.frame, &cfg.windows)?;
    println!("{} windows on the grid, {} after the edge filter and cap", grid.len(), scored.len());
    if let (Some(first), Some(last)) = (scored.first(), scored.last()) {
        println!("edge density from {:.2} down to {:.2}", first.1, last.1);
    }

    let classifier =
        StubClassifier::new(StubConfig::default()).with_ground_truth(scene.frame.frame_id.clone(), scene.gt_boxes.clone());
    let run = run_baseline_full(&scene.frame, &cfg, &classifier)?;
    println!("{} classified, {} kept after NMS at {}", run.all.len(), run.kept.len(), cfg.nms_threshold);
    let mut top: Vec<_> = run.detections().into_iter().collect();
    top.sort_by(|a, b| b.probs.max().total_cmp(&a.probs.max()));
    for d in top.iter().take(5) {
        let b = d.bbox;
        println!("  class {:>3} score {:.2} at [{:.0}, {:.0}, {:.0}, {:.0}]", d.probs.argmax(), d.probs.max(), b.x_min, b.y_min, b.x_max, b.y_max);
    }
    Ok(())
}
