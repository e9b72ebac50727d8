//! Drive any program that reads a crop PNG and prints a probability vector.
//!
//! cargo run --example external_classifier -- [program args...]
//!
//! Without arguments a small shell script stands in for the model.

use multidet::classify::{classify_all, ExternalClassifier, ExternalConfig};
use multidet::pipeline::{propose_instances, PipelineConfig};
use multidet::scenegen::{generate, SceneSpec};

fn main() -> anyhow::Result<()> {
    let scratch = tempfile::tempdir()?;
    let mut command: Vec<String> = std::env::args().skip(1).collect();
    let mut num_classes = 1000;
    if command.is_empty() {
        // Class by PNG size parity, just to show the round trip.
        let script = scratch.path().join("toy.sh");
        std::fs::write(
            &script,
            "#!/bin/sh\nif [ $(( $(wc -c < \"$1\") % 2 )) -eq 0 ]; then echo '[0.7, 0.2, 0.1]'; else echo '[0.1, 0.2, 0.7]'; fi\n",
        )?;
        command = vec!["sh".into(), script.to_string_lossy().into_owned()];
        num_classes = 3;
    }
    let classifier = ExternalClassifier::new(ExternalConfig { command, num_classes, single_flight: true })?;

    let scene = generate(&SceneSpec::default())?;
    let cfg = PipelineConfig::default().resolved();
    let (_, proposals) = propose_instances(&scene.frame, &cfg)?;
    let probs = classify_all(&classifier, &scene.frame, &proposals, &cfg.proposal)?;
    for (p, v) in proposals.iter().zip(&probs) {
        println!("instance {} group {:?}: class {} ({:.2})", p.instance_id, p.group_id, v.argmax(), v.max());
    }
    Ok(())
}
