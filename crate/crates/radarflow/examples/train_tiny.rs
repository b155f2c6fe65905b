//! Trains a deliberately narrow model on a handful of synthetic pairs and
//! prints the per-epoch log — a desk-scale dry run of the full
//! self-supervised loop (network forward, static refinement, Eq. 3 losses,
//! Adam, per-epoch learning-rate decay, best-by-validation selection).
//!
//! Run with: `cargo run --example train_tiny`

use radarflow::losses::LossConfig;
use radarflow::metrics::MetricConfig;
use radarflow::rofe::RofeModel;
use radarflow::synth::{generate_pair, SceneConfig};
use radarflow::train::{train, TrainConfig};
use radarflow::types::{default_hyperparams, FeatureFlags, HyperParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = SceneConfig { seed: 9, outlier_fraction: 0.2, ..Default::default() };
    let train_set: Vec<_> = (0..8).map(|i| generate_pair(&scene, i)).collect::<Result<_, _>>()?;
    let val_set: Vec<_> = (8..12).map(|i| generate_pair(&scene, i)).collect::<Result<_, _>>()?;

    // narrow widths keep this fast; defaults reproduce the reference
    // architecture
    let hp = HyperParams { c_local: 8, c_cor: 16, delta: 1e-4, epsilon: 1e-3, ..default_hyperparams() };
    let mut model = RofeModel::new(&hp, FeatureFlags::default(), 1)?;
    let cfg = TrainConfig { epochs: 5, sample_points: 32, seed: 1, ..Default::default() };

    let outcome = train(
        &mut model,
        &train_set,
        &val_set,
        &cfg,
        &LossConfig::default(),
        &MetricConfig::default(),
    )?;
    for entry in &outcome.log {
        println!("{}", entry.to_line());
    }
    println!("best validation Avg RNE: {:.6}", outcome.best_val_rne);

    let path = std::path::Path::new("target/train_tiny.ckpt");
    outcome.best_model.save(path)?;
    println!("checkpoint written to {}", path.display());
    Ok(())
}
