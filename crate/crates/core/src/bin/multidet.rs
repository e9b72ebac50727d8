use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use multidet::dataset::{self, ground_truth_map, load_dataset, write_detections, write_sample};
use multidet::eval::{curve_csv, emit_report, parse_curve_csv, LabeledCurve, Overlay, Source};
use multidet::io::{atomic_write, write_json};
use multidet::pipeline::{build_classifier, evaluate, run_ours, run_window_baseline, PipelineConfig};
use multidet::scenegen::{generate, SceneSpec};

#[derive(Parser)]
#[command(name = "multidet", version, about = "Discovery-driven detection on RGB-D frames")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic annotated scenes.
    Synth {
        #[arg(long, default_value_t = 10)]
        scenes: u64,
        #[arg(long, default_value_t = 3)]
        types: usize,
        #[arg(long, default_value_t = 2)]
        instances: usize,
        /// Placement seed of the first scene; scene k uses seed + k.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Full scene spec as JSON; flags above override its fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Discover instances, classify and fuse; one detections file per frame.
    Detect {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify sliding windows with NMS; one detections file per frame.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// PR curves, plot and overlays from detection directories.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "detections", required = true)]
        detections: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge curve CSVs from several eval outputs into one plot.
    Report {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => Ok(PipelineConfig::load(p)?),
        None => Ok(PipelineConfig::default().resolved()),
    }
}

fn synth(scenes: u64, types: usize, instances: usize, seed: u64, spec: Option<&Path>, out: &Path) -> Result<()> {
    let mut base: SceneSpec = match spec {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| p.display().to_string())?)
            .with_context(|| format!("{}: bad scene spec", p.display()))?,
        None => SceneSpec::default(),
    };
    base.object_types = types;
    base.instances_per_type = instances;
    if base.type_classes.len() < types {
        bail!("scene spec lists {} type classes for {types} types", base.type_classes.len());
    }
    std::fs::create_dir_all(out).with_context(|| out.display().to_string())?;
    for k in 0..scenes {
        let spec = SceneSpec { placement_seed: seed + k, ..base.clone() };
        let scene = generate(&spec).with_context(|| format!("scene {}", seed + k))?;
        write_sample(out, &scene.frame, &scene.gt_boxes)?;
    }
    Ok(())
}

/// Run `f` on every frame, writing its records. Frame failures are
/// reported and the loop continues.
fn per_frame<F>(data: &Path, config: Option<&Path>, out: &Path, f: F) -> Result<()>
where
    F: Fn(&multidet::dataset::Sample, &PipelineConfig, &dyn multidet::classify::Classifier) -> Result<Vec<multidet::eval::DetectionRecord>>,
{
    let cfg = load_config(config)?;
    let samples = load_dataset(data)?;
    let classifier = build_classifier(&cfg.classifier, &samples)?;
    std::fs::create_dir_all(out).with_context(|| out.display().to_string())?;
    let mut failed = 0usize;
    for s in &samples {
        match f(s, &cfg, classifier.as_ref()) {
            Ok(records) => {
                write_detections(out, &s.frame.frame_id, &records)?;
            }
            Err(e) => {
                eprintln!("{}: {e:#}", s.frame.frame_id);
                failed += 1;
            }
        }
    }
    if failed > 0 {
        bail!("{failed} of {} frames failed", samples.len());
    }
    Ok(())
}

fn eval(data: &Path, detections: &[PathBuf], config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let samples = load_dataset(data)?;
    let gts = ground_truth_map(&samples);
    let mut dets = Vec::new();
    for d in detections {
        dets.extend(dataset::load_detections(d)?);
    }
    let (curves, summaries) = evaluate(&dets, &gts, &cfg.eval)?;
    let (primary, extra): (Vec<LabeledCurve>, Vec<LabeledCurve>) =
        curves.into_iter().partition(|c| Source::ALL.iter().any(|s| s.as_str() == c.label));

    let mut overlays = Vec::new();
    for s in &samples {
        for (source, suffix) in [(Source::OursJoint, ""), (Source::Baseline, "_baseline")] {
            let boxes: Vec<_> = dets
                .iter()
                .filter(|d| d.frame_id == s.frame.frame_id && d.source == source && cfg.eval.display_score(&d.probs) >= cfg.eval.display_threshold)
                .map(|d| (d.bbox, d.group_id))
                .collect();
            if dets.iter().any(|d| d.source == source) {
                overlays.push(Overlay { frame_id: format!("{}{suffix}", s.frame.frame_id), image: s.frame.color.clone(), boxes });
            }
        }
    }
    emit_report(&primary, &overlays, out)?;
    for c in &extra {
        let p = out.join(format!("prcurve_{}.csv", c.label));
        atomic_write(&p, curve_csv(&c.points).as_bytes()).with_context(|| p.display().to_string())?;
    }
    write_json(&out.join("summary.json"), &summaries)?;
    for s in &summaries {
        println!("{:<28} auc {:.4}  tp {} fp {} fn {}", s.label, s.auc, s.counts_all.tp, s.counts_all.fp, s.counts_all.fn_);
    }
    Ok(())
}

fn report(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let mut curves: Vec<LabeledCurve> = Vec::new();
    for dir in inputs {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .with_context(|| dir.display().to_string())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let n = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                n.starts_with("prcurve_") && n.ends_with(".csv") && !n.contains("-iou")
            })
            .collect();
        files.sort();
        for f in files {
            let name = f.file_stem().unwrap().to_string_lossy();
            let mut label = name.trim_start_matches("prcurve_").to_string();
            if curves.iter().any(|c| c.label == label) {
                label = format!("{}:{label}", dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
            }
            let text = std::fs::read_to_string(&f).with_context(|| f.display().to_string())?;
            let points = parse_curve_csv(&text).map_err(|e| anyhow::anyhow!("{}: {e}", f.display()))?;
            curves.push(LabeledCurve { label, points });
        }
    }
    emit_report(&curves, &[], out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { scenes, types, instances, seed, spec, out } => synth(scenes, types, instances, seed, spec.as_deref(), &out),
        Command::Detect { data, config, out } => per_frame(&data, config.as_deref(), &out, |s, cfg, c| {
            let o = run_ours(&s.frame, cfg, c)?;
            Ok(o.independent.into_iter().chain(o.joint).collect())
        }),
        Command::Baseline { data, config, out } => {
            per_frame(&data, config.as_deref(), &out, |s, cfg, c| Ok(run_window_baseline(&s.frame, cfg, c)?))
        }
        Command::Eval { data, detections, config, out } => eval(&data, &detections, config.as_deref(), &out),
        Command::Report { inputs, out } => report(&inputs, &out),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 and usage text on bad flags.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
