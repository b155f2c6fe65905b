//! Full inference round trip: build a model, save and reload its
//! checkpoint, run prediction on one record, write the binary inference
//! file, and read it back bit-exactly.
//!
//! Run with: `cargo run --example infer_roundtrip`

use radarflow::cli::{read_inference, write_inference};
use radarflow::rofe::RofeModel;
use radarflow::synth::{generate_pair, SceneConfig};
use radarflow::train::predict;
use radarflow::types::{default_hyperparams, FeatureFlags, HyperParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let hp = HyperParams { c_local: 8, c_cor: 16, ..default_hyperparams() };
    let model = RofeModel::new(&hp, FeatureFlags::default(), 11)?;

    let ckpt = std::path::Path::new("target/infer_roundtrip.ckpt");
    model.save(ckpt)?;
    let reloaded = RofeModel::load(ckpt)?;
    println!("checkpoint round trip: {} parameters", reloaded.params().len());

    let scene = SceneConfig { seed: 2, ..Default::default() };
    let (pair, _) = generate_pair(&scene, 0)?;
    let (flow, mask, ego) = predict(&reloaded, &pair, true)?;
    ego.assert_valid();
    println!(
        "predicted flow for {} points; {} classified static",
        flow.vectors.len(),
        mask.static_count()
    );

    let out = std::path::Path::new("target/infer_roundtrip.bin");
    write_inference(out, &flow, &mask, &ego)?;
    let (flow2, mask2, ego2) = read_inference(out)?;
    assert_eq!(flow.vectors, flow2.vectors);
    assert_eq!(mask.flags, mask2.flags);
    assert_eq!(ego.to_row_major(), ego2.to_row_major());
    println!("inference file round trip is bit-exact ({})", out.display());
    Ok(())
}
