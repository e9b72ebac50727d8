//! Generate a tabletop scene with repeated objects and save it to disk.
//!
//! cargo run --example synthesize_scene -- [out_dir]

use std::path::PathBuf;

use multidet::dataset::write_sample;
use multidet::scenegen::{generate, SceneSpec};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("multidet_scene"));
    let spec = SceneSpec { object_types: 3, instances_per_type: 2, placement_seed: 7, ..Default::default() };
    let scene = generate(&spec)?;

    println!("{} ({}x{})", scene.frame.frame_id, scene.frame.width(), scene.frame.height());
    for (p, g) in scene.placements.iter().zip(&scene.gt_boxes) {
        let b = g.bbox;
        println!(
            "  type {} class {:>3}  center ({:>5.1}, {:>5.1})  angle {:>5.2}  box [{:.0}, {:.0}, {:.0}, {:.0}]",
            p.object_type_id, g.class_index, p.center.0, p.center.1, p.angle_rad, b.x_min, b.y_min, b.x_max, b.y_max
        );
    }
    let dir = write_sample(&out, &scene.frame, &scene.gt_boxes)?;
    println!("wrote {}", dir.display());
    Ok(())
}
