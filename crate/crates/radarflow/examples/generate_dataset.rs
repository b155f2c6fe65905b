//! Generates a small synthetic radar dataset on disk and prints what was
//! written.
//!
//! Run with: `cargo run --example generate_dataset -- [out_dir]`

use radarflow::synth::{generate_dataset, load_split, SceneConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/demo-data".to_string());
    let out = std::path::PathBuf::from(out);

    let cfg = SceneConfig { seed: 42, outlier_fraction: 0.2, ..Default::default() };
    let manifests = generate_dataset(&cfg, 20, (0.7, 0.15, 0.15), &out)?;
    for m in &manifests {
        println!("wrote {}", m.display());
    }

    let train = load_split(&out.join("train"))?;
    let (pair, labels) = &train[0];
    println!(
        "first training pair: {} source points, {} target points, dt = {} s",
        pair.source.len(),
        pair.target.len(),
        pair.dt
    );
    let movers = labels.gt_moving.iter().filter(|&&m| m).count();
    let ghosts = labels.valid.iter().filter(|&&v| !v).count();
    println!("{movers} moving points, {ghosts} ghost outliers");
    println!(
        "ego translation between frames: {:?} m",
        labels.gt_ego.translation.map(|v| (v * 1000.0).round() / 1000.0)
    );
    Ok(())
}
