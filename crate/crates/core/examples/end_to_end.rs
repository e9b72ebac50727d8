//! Synthetic dataset to report: both detectors, fused and unfused scores,
//! PR curves and overlays.
//!
//! cargo run --release --example end_to_end -- [out_dir]

use std::collections::BTreeMap;
use std::path::PathBuf;

use multidet::classify::{StubClassifier, StubConfig};
use multidet::eval::{emit_report, Overlay, Source};
use multidet::pipeline::{evaluate, run_ours, run_window_baseline, ClassifierConfig, PipelineConfig};
use multidet::scenegen::{generate, SceneSpec};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("multidet_e2e"));
    let stub = StubConfig { label_noise: 0.2, ..Default::default() };
    let cfg = PipelineConfig { seed: Some(11), classifier: ClassifierConfig::Stub(stub), ..Default::default() }.resolved();
    let ClassifierConfig::Stub(stub) = &cfg.classifier else { unreachable!() };

    let scenes = (0..6).map(|s| generate(&SceneSpec { placement_seed: s, ..Default::default() })).collect::<Result<Vec<_>, _>>()?;
    let gts: BTreeMap<_, _> = scenes.iter().map(|s| (s.frame.frame_id.clone(), s.gt_boxes.clone())).collect();
    let mut classifier = StubClassifier::new(stub.clone());
    for (frame, boxes) in &gts {
        classifier.insert_ground_truth(frame.clone(), boxes.clone());
    }

    let mut dets = Vec::new();
    let mut overlays = Vec::new();
    for s in &scenes {
        let ours = run_ours(&s.frame, &cfg, &classifier)?;
        overlays.push(Overlay {
            frame_id: s.frame.frame_id.clone(),
            image: s.frame.color.clone(),
            boxes: ours.joint.iter().map(|d| (d.bbox, d.group_id)).collect(),
        });
        dets.extend(ours.independent);
        dets.extend(ours.joint);
        dets.extend(run_window_baseline(&s.frame, &cfg, &classifier)?);
    }

    let (curves, summaries) = evaluate(&dets, &gts, &cfg.eval)?;
    for s in &summaries {
        println!("{:<26} AUC {:.4}  tp {:>3} fp {:>4} fn {:>3}", s.label, s.auc, s.counts_all.tp, s.counts_all.fp, s.counts_all.fn_);
    }
    let primary: Vec<_> = curves.into_iter().filter(|c| Source::ALL.iter().any(|s| s.as_str() == c.label)).collect();
    let written = emit_report(&primary, &overlays, &out)?;
    println!("{} files in {}", written.len(), out.display());
    Ok(())
}
