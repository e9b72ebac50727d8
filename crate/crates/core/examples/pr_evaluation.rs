//! Greedy matching, PR curves and report files for hand-made detections.
//!
//! cargo run --example pr_evaluation -- [out_dir]

use std::path::PathBuf;

use multidet::classify::{CategorySpec, ClassProbs};
use multidet::eval::{
    area_under_curve, emit_report, match_detections, pr_curve, DetectionRecord, GroundTruthBox, LabeledCurve, ScoreMode,
    ScoredDetection, Source,
};
use multidet::geometry::BoundingBox;

fn bbox(x: f64, y: f64) -> BoundingBox {
    BoundingBox::new(x, y, x + 40.0, y + 40.0).unwrap()
}

fn main() -> anyhow::Result<()> {
    let gts: Vec<GroundTruthBox> = (0..4)
        .map(|i| GroundTruthBox { bbox: bbox(60.0 * i as f64, 10.0), class_index: i % 2, object_type_id: i % 2 })
        .collect();
    let record = |x: f64, probs: Vec<f64>| DetectionRecord {
        frame_id: "demo".into(),
        bbox: bbox(x, 12.0),
        group_id: None,
        instance_id: None,
        probs: ClassProbs::new(probs).unwrap(),
        source: Source::OursJoint,
    };
    let dets = vec![
        record(2.0, vec![0.9, 0.1, 0.0]),
        record(4.0, vec![0.7, 0.3, 0.0]),
        record(62.0, vec![0.2, 0.8, 0.0]),
        record(121.0, vec![0.4, 0.6, 0.0]),
        record(300.0, vec![0.1, 0.1, 0.8]),
    ];

    let scored: Vec<ScoredDetection> =
        dets.iter().map(|d| ScoredDetection { bbox: d.bbox, class_index: d.probs.argmax(), score: d.probs.max() }).collect();
    let (tp, fp, fn_) = match_detections(&scored, &gts, 0.5, 3).totals();
    println!("all detections: tp {tp} fp {fp} fn {fn_}");

    let per_class = pr_curve(&dets, &gts, 0.5, &ScoreMode::PerClass)?;
    for p in &per_class {
        println!("  t {:.2}  P {:.3}  R {:.3}", p.threshold, p.precision, p.recall);
    }
    println!("AUC {:.4}", area_under_curve(&per_class));

    let cat = CategorySpec::new("class 0 or 1", vec![0, 1]);
    let category = pr_curve(&dets, &gts, 0.5, &ScoreMode::Category(cat))?;
    println!("category AUC {:.4}", area_under_curve(&category));

    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("multidet_pr"));
    let curves = [
        LabeledCurve { label: "per-class".into(), points: per_class },
        LabeledCurve { label: "category".into(), points: category },
    ];
    for p in emit_report(&curves, &[], &out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
