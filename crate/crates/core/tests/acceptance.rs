//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use multidet::baseline::{propose_windows, run_baseline_full};
use multidet::classify::{
    ClassProbs, Classifier, ClassifyError, CropRequest, ExternalClassifier, ExternalConfig, StubClassifier, StubConfig,
};
use multidet::eval::{
    area_under_curve, match_detections, pr_curve, pr_curve_dataset, DetectionRecord, GroundTruthBox, ScoreMode,
    ScoredDetection, Source,
};
use multidet::fusion::joint_probability;
use multidet::geometry::{estimate_rigid_transform, iou, nms_indices, BoundingBox, RigidTransform};
use multidet::pipeline::{classify_and_fuse, propose_instances, run_ours_frames, PipelineConfig};
use multidet::proposals::Proposal;
use multidet::scenegen::{generate, SceneSpec, SyntheticScene};
use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize) -> ClassProbs {
    let raw: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = raw.iter().sum();
    ClassProbs::from_adapter(raw.into_iter().map(|x| x / s).collect()).unwrap()
}

// 1 -------------------------------------------------------------------------

fn fusion_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..1000 {
        let p = random_probs(&mut rng, 1000);
        let q = random_probs(&mut rng, 1000);
        let r = random_probs(&mut rng, 1000);
        let pp = joint_probability(&[p.clone(), p.clone()]).map_err(|e| e.to_string())?;
        let sum: f64 = pp.as_slice().iter().sum();
        check((sum - 1.0).abs() <= 1e-9, format!("trial {trial}: joint sums to {sum}"))?;
        check(pp.max() >= p.max(), format!("trial {trial}: joint max {} below {}", pp.max(), p.max()))?;
        check(pp.argmax() == p.argmax(), format!("trial {trial}: argmax moved"))?;

        let a = joint_probability(&[p.clone(), q.clone(), r.clone()]).map_err(|e| e.to_string())?;
        for perm in [[&q, &r, &p], [&r, &p, &q], [&p, &r, &q]] {
            let b = joint_probability(&perm.map(|x| x.clone())).map_err(|e| e.to_string())?;
            let worst = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            check(worst <= 1e-12, format!("trial {trial}: permutation differs by {worst:e}"))?;
        }
    }
    let v = ClassProbs::new(vec![0.8, 0.2]).unwrap();
    let j = joint_probability(&[v.clone(), v]).map_err(|e| e.to_string())?;
    let (a, b) = (j.as_slice()[0], j.as_slice()[1]);
    check((a - 0.9412).abs() <= 1e-4 && (b - 0.0588).abs() <= 1e-4, format!("(0.8, 0.2)^2 gave ({a}, {b})"))?;
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!("1000 vectors, (0.8,0.2)^2 = ({a:.4}, {b:.4}), {elapsed:.2?}"))
}

// 2 -------------------------------------------------------------------------

/// Textbook NMS over a full suppression matrix.
fn nms_reference(dets: &[(BoundingBox, f64)], thr: f64) -> Vec<usize> {
    let n = dets.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dets[b].1.partial_cmp(&dets[a].1).unwrap().then(a.cmp(&b)));
    let overlap: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let (a, b) = (&dets[i].0, &dets[j].0);
                    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
                    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
                    let inter = w * h;
                    let union = a.area() + b.area() - inter;
                    if union > 0.0 { inter / union } else { 0.0 }
                })
                .collect()
        })
        .collect();
    let mut suppressed = vec![false; n];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order[pos + 1..] {
            if overlap[i][j] > thr {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// IOU by counting quarter-pixel cells; exact for quarter-pixel boxes.
fn raster_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let q = |v: f64| (v * 4.0).round() as i64;
    let (mut inter, mut union) = (0u64, 0u64);
    for y in q(a.y_min.min(b.y_min))..q(a.y_max.max(b.y_max)) {
        for x in q(a.x_min.min(b.x_min))..q(a.x_max.max(b.x_max)) {
            let ina = x >= q(a.x_min) && x < q(a.x_max) && y >= q(a.y_min) && y < q(a.y_max);
            let inb = x >= q(b.x_min) && x < q(b.x_max) && y >= q(b.y_min) && y < q(b.y_max);
            inter += (ina && inb) as u64;
            union += (ina || inb) as u64;
        }
    }
    if union == 0 { 0.0 } else { inter as f64 / union as f64 }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = Unit::new_normalize(Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    RigidTransform {
        rotation: *Rotation3::from_axis_angle(&axis, rng.gen_range(-3.1..3.1)).matrix(),
        translation: Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
    }
}

fn geometry_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..100 {
        let dets: Vec<(BoundingBox, f64)> = (0..200)
            .map(|_| {
                let (x, y) = (rng.gen_range(0.0..400.0), rng.gen_range(0.0..300.0));
                let (w, h) = (rng.gen_range(5.0..80.0), rng.gen_range(5.0..80.0));
                (BoundingBox::new(x, y, x + w, y + h).unwrap(), rng.gen::<f64>())
            })
            .collect();
        check(nms_indices(&dets, 0.5) == nms_reference(&dets, 0.5), format!("NMS trial {trial} differs"))?;
    }
    let mut worst_iou = 0.0f64;
    for _ in 0..100 {
        let mut qbox = || {
            let x = rng.gen_range(0..120) as f64 / 4.0;
            let y = rng.gen_range(0..120) as f64 / 4.0;
            let w = rng.gen_range(1..100) as f64 / 4.0;
            let h = rng.gen_range(1..100) as f64 / 4.0;
            BoundingBox::new(x, y, x + w, y + h).unwrap()
        };
        let (a, b) = (qbox(), qbox());
        worst_iou = worst_iou.max((iou(&a, &b) - raster_iou(&a, &b)).abs());
    }
    check(worst_iou <= 1e-3, format!("IOU off by {worst_iou}"))?;

    let sigma = 0.001;
    let noise = Normal::new(0.0, sigma).unwrap();
    let (mut worst_clean, mut worst_noisy) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let t = random_rotation(&mut rng);
        let src: Vec<Vector3<f64>> = (0..50)
            .map(|_| Vector3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(0.8..1.6)))
            .collect();
        let dst: Vec<Vector3<f64>> = src.iter().map(|p| t.apply(p)).collect();
        let est = estimate_rigid_transform(&src, &dst).map_err(|e| e.to_string())?;
        let back = est.inverse();
        for (p, q) in src.iter().zip(&dst) {
            worst_clean = worst_clean.max((est.apply(p) - q).norm()).max((back.apply(q) - p).norm());
        }
        let noisy: Vec<Vector3<f64>> =
            dst.iter().map(|q| q + Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng))).collect();
        let est = estimate_rigid_transform(&src, &noisy).map_err(|e| e.to_string())?;
        // Per-axis RMS of the fit residual and of the motion error.
        let n = src.len() as f64 * 3.0;
        let fit = (src.iter().zip(&noisy).map(|(p, q)| (est.apply(p) - q).norm_squared()).sum::<f64>() / n).sqrt();
        let motion = (src.iter().map(|p| (est.apply(p) - t.apply(p)).norm_squared()).sum::<f64>() / n).sqrt();
        worst_noisy = worst_noisy.max(fit).max(motion);
    }
    check(worst_clean <= 1e-9, format!("noiseless round trip residual {worst_clean:e}"))?;
    check(worst_noisy <= 3.0 * sigma, format!("noisy residual {worst_noisy:e} above 3 sigma"))?;
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(10))?;
    Ok(format!(
        "NMS 100x200 exact, IOU max err {worst_iou:.1e}, rigid {worst_clean:.1e} clean / {:.2} sigma noisy, {elapsed:.2?}",
        worst_noisy / sigma
    ))
}

// 3 -------------------------------------------------------------------------

fn rand_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let (x, y) = (rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0));
    BoundingBox::new(x, y, x + rng.gen_range(4.0..30.0), y + rng.gen_range(4.0..30.0)).unwrap()
}

/// Number of true positives under the lexicographically best injective
/// assignment, detections ranked by score: the first detection's match
/// quality dominates, then the second's, and so on.
fn exhaustive_tp(dets: &[ScoredDetection], gts: &[GroundTruthBox], iou_min: f64) -> u64 {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    #[allow(clippy::too_many_arguments)]
    fn go(k: usize, order: &[usize], dets: &[ScoredDetection], gts: &[GroundTruthBox], iou_min: f64, used: &mut [bool], key: &mut Vec<f64>, best: &mut Option<(Vec<f64>, u64)>, tp: u64) {
        if k == order.len() {
            if best.as_ref().is_none_or(|(b, _)| key.as_slice() > b.as_slice()) {
                *best = Some((key.clone(), tp));
            }
            return;
        }
        let d = &dets[order[k]];
        key.push(-1.0);
        go(k + 1, order, dets, gts, iou_min, used, key, best, tp);
        key.pop();
        for g in 0..gts.len() {
            let v = iou(&d.bbox, &gts[g].bbox);
            if !used[g] && gts[g].class_index == d.class_index && v >= iou_min {
                used[g] = true;
                key.push(v);
                go(k + 1, order, dets, gts, iou_min, used, key, best, tp + 1);
                key.pop();
                used[g] = false;
            }
        }
    }
    let mut best = None;
    go(0, &order, dets, gts, iou_min, &mut vec![false; gts.len()], &mut Vec::new(), &mut best, 0);
    best.map_or(0, |b| b.1)
}

fn evaluation_invariants() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..1000 {
        let gts: Vec<GroundTruthBox> = (0..rng.gen_range(0..10))
            .map(|_| {
                let c = rng.gen_range(0..4);
                GroundTruthBox { bbox: rand_box(&mut rng), class_index: c, object_type_id: c }
            })
            .collect();
        let recs: Vec<DetectionRecord> = (0..rng.gen_range(0..15))
            .map(|_| {
                let bbox = if !gts.is_empty() && rng.gen_bool(0.6) {
                    let g = gts[rng.gen_range(0..gts.len())].bbox;
                    let j = rng.gen_range(-3.0..3.0);
                    BoundingBox::new(g.x_min + j, g.y_min + j, g.x_max + j, g.y_max + j).unwrap()
                } else {
                    rand_box(&mut rng)
                };
                DetectionRecord {
                    frame_id: "f".into(),
                    bbox,
                    group_id: None,
                    instance_id: None,
                    probs: random_probs(&mut rng, 4),
                    source: Source::OursJoint,
                }
            })
            .collect();
        let iou_min = if rng.gen_bool(0.5) { 0.5 } else { 0.25 };
        let scored: Vec<ScoredDetection> =
            recs.iter().map(|r| ScoredDetection { bbox: r.bbox, class_index: r.probs.argmax(), score: r.probs.max() }).collect();
        let (tp, fp, fn_) = match_detections(&scored, &gts, iou_min, 4).totals();
        check(tp + fn_ == gts.len() as u64, format!("trial {trial}: tp+fn {} != {} GTs", tp + fn_, gts.len()))?;
        check(tp + fp == recs.len() as u64, format!("trial {trial}: tp+fp {} != {} dets", tp + fp, recs.len()))?;
        let curve = pr_curve(&recs, &gts, iou_min, &ScoreMode::PerClass).map_err(|e| e.to_string())?;
        check(curve.windows(2).all(|w| w[0].threshold > w[1].threshold && w[0].recall <= w[1].recall), format!("trial {trial}: recall not monotone"))?;
    }

    let mut instances = 0;
    for trial in 0..3000 {
        let gts: Vec<GroundTruthBox> = (0..rng.gen_range(0..=4))
            .map(|_| {
                let c = rng.gen_range(0..2);
                GroundTruthBox { bbox: rand_box(&mut rng), class_index: c, object_type_id: c }
            })
            .collect();
        let n = rng.gen_range(0..=6);
        let mut scores: Vec<f64> = (0..n).map(|k| 1.0 - k as f64 * 0.1 - rng.gen_range(0.0..0.05)).collect();
        scores.reverse();
        let dets: Vec<ScoredDetection> = scores
            .iter()
            .map(|&score| {
                let bbox = if !gts.is_empty() && rng.gen_bool(0.7) {
                    let g = gts[rng.gen_range(0..gts.len())].bbox;
                    let (dx, dy) = (rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0));
                    BoundingBox::new(g.x_min + dx, g.y_min + dy, g.x_max + dx, g.y_max + dy).unwrap()
                } else {
                    rand_box(&mut rng)
                };
                ScoredDetection { bbox, class_index: rng.gen_range(0..2), score }
            })
            .collect();
        for iou_min in [0.25, 0.5] {
            let greedy = match_detections(&dets, &gts, iou_min, 2).totals().0;
            let oracle = exhaustive_tp(&dets, &gts, iou_min);
            check(greedy == oracle, format!("instance {trial}: greedy tp {greedy}, oracle {oracle}"))?;
            instances += 1;
        }
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(30))?;
    Ok(format!("1000 scenarios conserved, {instances} oracle instances agree, {elapsed:.2?}"))
}

// 4 and 5 -------------------------------------------------------------------

const SCENES: u64 = 20;

struct SceneRun {
    scene: SyntheticScene,
    proposals: Vec<Proposal>,
    elapsed: Duration,
}

fn scene_runs(cfg: &PipelineConfig) -> Result<Vec<SceneRun>, String> {
    (0..SCENES)
        .map(|seed| {
            let scene = generate(&SceneSpec { placement_seed: seed, ..Default::default() }).map_err(|e| e.to_string())?;
            let start = Instant::now();
            let (_, proposals) = propose_instances(&scene.frame, cfg).map_err(|e| e.to_string())?;
            Ok(SceneRun { scene, proposals, elapsed: start.elapsed() })
        })
        .collect()
}

fn discovery_at_desk_scale(runs: &[SceneRun], cfg: &PipelineConfig) -> Outcome {
    let (mut found, mut gts, mut pure, mut clusters) = (0, 0, 0, 0);
    let mut slowest = Duration::ZERO;
    for r in runs {
        slowest = slowest.max(r.elapsed);
        for g in &r.scene.gt_boxes {
            gts += 1;
            found += r.proposals.iter().any(|p| iou(&p.bbox, &g.bbox) >= 0.5) as usize;
        }
        // Type of each proposal: the GT it overlaps at IOU >= 0.5, if any.
        let type_of = |p: &Proposal| {
            r.scene.gt_boxes.iter().find(|g| iou(&p.bbox, &g.bbox) >= 0.5).map(|g| g.object_type_id)
        };
        for p in &r.proposals {
            clusters += 1;
            let mates = r.proposals.iter().filter(|q| q.group_id == p.group_id);
            let t = type_of(p);
            pure += (t.is_some() && mates.into_iter().all(|q| type_of(q) == t)) as usize;
        }
    }
    let recall = found as f64 / gts as f64;
    let purity = if clusters == 0 { 0.0 } else { pure as f64 / clusters as f64 };

    let mut unique_groups = 0;
    for seed in 0..5 {
        for (types, instances) in [(6, 1), (3, 1)] {
            let spec = SceneSpec { object_types: types, instances_per_type: instances, type_classes: vec![1; types], placement_seed: 100 + seed, ..Default::default() };
            let s = generate(&spec).map_err(|e| e.to_string())?;
            let (d, _) = propose_instances(&s.frame, cfg).map_err(|e| e.to_string())?;
            unique_groups += d.groups.len();
        }
    }
    check(recall >= 0.9, format!("instance recall {recall:.3}"))?;
    check(purity >= 0.9, format!("grouping purity {purity:.3}"))?;
    check(unique_groups == 0, format!("{unique_groups} groups on zero-repeat scenes"))?;
    within(slowest, Duration::from_secs(5))?;
    Ok(format!("recall {found}/{gts}, purity {pure}/{clusters}, 0 groups on 10 zero-repeat scenes, slowest scene {slowest:.2?}"))
}

fn stub(seed: u64, runs: &[SceneRun]) -> StubClassifier {
    let mut s = StubClassifier::new(StubConfig { label_noise: 0.2, peak: 0.6, seed, ..Default::default() });
    for r in runs {
        s.insert_ground_truth(r.scene.frame.frame_id.clone(), r.scene.gt_boxes.clone());
    }
    s
}

fn proposal_economy(runs: &[SceneRun], cfg: &PipelineConfig) -> Outcome {
    let classifier = stub(0, runs);
    let (mut ours, mut pre, mut post) = (0usize, 0usize, 0usize);
    for r in runs {
        ours += r.proposals.len();
        let b = run_baseline_full(&r.scene.frame, &cfg.baseline, &classifier).map_err(|e| e.to_string())?;
        pre += b.all.len();
        post += b.kept.len();
        check(propose_windows(&r.scene.frame, &cfg.baseline.windows).map_err(|e| e.to_string())?.len() == b.all.len(), "window count drift")?;
    }
    let n = runs.len() as f64;
    let (ours, pre, post) = (ours as f64 / n, pre as f64 / n, post as f64 / n);
    check((5.0..=7.0).contains(&ours), format!("mean ours proposals {ours:.2}"))?;
    check(pre >= 10.0 * ours, format!("baseline pre-NMS {pre:.1} < 10 x {ours:.2}"))?;
    check(post > ours && post < pre, format!("post-NMS {post:.1} not between {ours:.2} and {pre:.1}"))?;
    Ok(format!("mean proposals: ours {ours:.2}, baseline {pre:.1} before NMS, {post:.1} after"))
}

// 6 -------------------------------------------------------------------------

/// One-sided sign test p-value for `wins` successes out of `n`.
fn sign_test_p(wins: usize, n: usize) -> f64 {
    let choose = |n: usize, k: usize| (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    (wins..=n).map(|k| choose(n, k)).sum::<f64>() / 2f64.powi(n as i32)
}

fn joint_beats_independent(runs: &[SceneRun], cfg: &PipelineConfig) -> Outcome {
    let start = Instant::now();
    let gts: BTreeMap<String, Vec<GroundTruthBox>> =
        runs.iter().map(|r| (r.scene.frame.frame_id.clone(), r.scene.gt_boxes.clone())).collect();
    let mut rows = Vec::new();
    for seed in 0..10 {
        let classifier = stub(seed, runs);
        let (mut ind, mut joint, mut base) = (Vec::new(), Vec::new(), Vec::new());
        for r in runs {
            let out = classify_and_fuse(&r.scene.frame, &r.proposals, cfg, &classifier).map_err(|e| e.to_string())?;
            ind.extend(out.independent);
            joint.extend(out.joint);
            base.extend(run_baseline_full(&r.scene.frame, &cfg.baseline, &classifier).map_err(|e| e.to_string())?.detections());
        }
        let auc = |d: &[DetectionRecord]| -> Result<f64, String> {
            Ok(area_under_curve(&pr_curve_dataset(d, &gts, 0.5, &ScoreMode::PerClass).map_err(|e| e.to_string())?))
        };
        rows.push((auc(&ind)?, auc(&joint)?, auc(&base)?));
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&(f64, f64, f64)) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let (mi, mj, mb) = (mean(|r| r.0), mean(|r| r.1), mean(|r| r.2));
    let diff = mean(|r| r.1 - r.0);
    let wins = rows.iter().filter(|r| r.1 > r.0).count();
    let losses = rows.iter().filter(|r| r.1 < r.0).count();
    let p = sign_test_p(wins, wins + losses);
    check(diff > 0.0, format!("mean joint - independent = {diff:.4}"))?;
    check(p < 0.05, format!("sign test {wins} wins / {losses} losses, p = {p:.4}"))?;
    check(mi > mb && mj > mb, format!("baseline AUC {mb:.4} not below ours ({mi:.4}, {mj:.4})"))?;
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(300))?;
    Ok(format!(
        "AUC joint {mj:.4} > independent {mi:.4} > baseline {mb:.4}; {wins}/{} seeds, p = {p:.4}, {elapsed:.2?}",
        wins + losses
    ))
}

// 7 -------------------------------------------------------------------------

fn write_script(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, format!("#!/bin/sh\n{body}\n")).unwrap();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(&p, std::fs::Permissions::from_mode(0o755)).unwrap();
    }
    p.to_string_lossy().into_owned()
}

fn external_protocol() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let fixed = random_probs(&mut rng, 1000);
    let json = serde_json::to_string(fixed.as_slice()).unwrap();
    std::fs::write(dir.path().join("vector.json"), &json).unwrap();
    let vec_path = dir.path().join("vector.json");
    let echo = write_script(dir.path(), "echo.sh", &format!("test -s \"$1\" || exit 9\ncat '{}'", vec_path.display()));
    let malformed = write_script(dir.path(), "bad.sh", "echo '[0.5, oops]'");
    let failing = write_script(dir.path(), "fail.sh", "echo boom >&2\nexit 3");
    let short = write_script(dir.path(), "short.sh", "echo '[0.5, 0.5]'");

    let scenes: Vec<_> = (0..2)
        .map(|s| generate(&SceneSpec { placement_seed: s, ..Default::default() }).unwrap())
        .collect();
    let frame = &scenes[0].frame;
    let proposal = Proposal { bbox: scenes[0].gt_boxes[0].bbox, instance_id: 0, group_id: Some(0) };
    let cfg = PipelineConfig::default().resolved();
    let request = CropRequest { frame, proposal: &proposal, preprocess: &cfg.proposal };
    let adapter = |cmd: String| ExternalClassifier::new(ExternalConfig { command: vec![cmd], num_classes: 1000, single_flight: true }).unwrap();

    let got = adapter(echo.clone()).classify(&request).map_err(|e| e.to_string())?;
    let exact = got.as_slice().iter().zip(fixed.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
    check(exact, "echo vector is not bit-exact")?;

    for (name, cmd) in [("malformed", malformed), ("nonzero exit", failing.clone()), ("wrong length", short)] {
        match adapter(cmd).classify(&request) {
            Err(ClassifyError::Unavailable(_)) => {}
            other => return Err(format!("{name}: expected classifier unavailable, got {other:?}")),
        }
    }

    // The frame loop reports the failing frame and keeps going.
    let samples: Vec<_> =
        scenes.iter().map(|s| multidet::dataset::Sample { frame: s.frame.clone(), ground_truth: s.gt_boxes.clone() }).collect();
    let counter = dir.path().join("calls");
    let flaky = write_script(
        dir.path(),
        "flaky.sh",
        &format!("if [ ! -e '{c}' ]; then touch '{c}'; exit 1; fi\ncat '{v}'", c = counter.display(), v = vec_path.display()),
    );
    let results = run_ours_frames(&samples, &cfg, &adapter(flaky));
    let first_failed = matches!(&results[0].1, Err(e) if e.to_string().starts_with("classifier unavailable"));
    let second_ok = matches!(&results[1].1, Ok(o) if o.joint.len() == 6);
    check(first_failed && second_ok, format!("frame loop: {:?}", results.iter().map(|r| r.1.is_ok()).collect::<Vec<_>>()))?;
    Ok("echo bit-exact; malformed, nonzero exit and wrong length rejected; loop continued past the failing frame".into())
}

// 8 -------------------------------------------------------------------------

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_multidet")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn end_to_end(root: &Path) -> Result<(), String> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let cfg = p("config.json");
    std::fs::write(&cfg, r#"{"seed": 5, "classifier": {"kind": "stub", "label_noise": 0.2}}"#).unwrap();
    cli(&["synth", "--scenes", "3", "--out", &p("data")])?;
    cli(&["detect", "--data", &p("data"), "--config", &cfg, "--out", &p("ours")])?;
    cli(&["baseline", "--data", &p("data"), "--config", &cfg, "--out", &p("base")])?;
    cli(&["eval", "--data", &p("data"), "--detections", &p("ours"), "--detections", &p("base"), "--config", &cfg, "--out", &p("report")])
}

fn outputs(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for sub in ["ours", "base", "report"] {
        for e in std::fs::read_dir(root.join(sub)).unwrap() {
            let path = e.unwrap().path();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            if name.ends_with(".json") || name.ends_with(".csv") {
                files.insert(format!("{sub}/{name}"), std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    end_to_end(a.path())?;
    end_to_end(b.path())?;
    let (fa, fb) = (outputs(a.path()), outputs(b.path()));
    check(fa.len() >= 9, format!("only {} output files", fa.len()))?;
    check(fa.keys().eq(fb.keys()), "runs wrote different file sets")?;
    for (name, bytes) in &fa {
        check(&fb[name] == bytes, format!("{name} differs between runs"))?;
    }
    let svg = std::fs::read_to_string(a.path().join("report/prcurve.svg")).unwrap();
    check(svg.matches("<polyline").count() == 3, "plot does not hold three curves")?;
    Ok(format!("{} detection/CSV/summary files byte-identical across two runs", fa.len()))
}

fn main() {
    let cfg = PipelineConfig::default().resolved();
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        match &outcome {
            Ok(msg) => println!("acceptance {n} {name}: PASS ({msg})"),
            Err(msg) => {
                failed += 1;
                println!("acceptance {n} {name}: FAIL ({msg})")
            }
        }
    };
    report(1, "fusion correctness", fusion_correctness());
    report(2, "geometry oracles", geometry_oracles());
    report(3, "evaluation invariants", evaluation_invariants());
    match scene_runs(&cfg) {
        Ok(runs) => {
            report(4, "discovery at desk scale", discovery_at_desk_scale(&runs, &cfg));
            report(5, "proposal economy", proposal_economy(&runs, &cfg));
            report(6, "joint beats independent", joint_beats_independent(&runs, &cfg));
        }
        Err(e) => {
            for (n, name) in [(4, "discovery at desk scale"), (5, "proposal economy"), (6, "joint beats independent")] {
                report(n, name, Err(e.clone()));
            }
        }
    }
    report(7, "external classifier protocol", external_protocol());
    report(8, "determinism", determinism());
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
