//! Scores the classical baselines (rigid-only ego fit and trimmed ICP) on a
//! synthetic test split and prints their evaluation reports side by side.
//!
//! Run with: `cargo run --example evaluate_baselines`

use radarflow::baselines::{icp, rigid_only_flow};
use radarflow::metrics::MetricConfig;
use radarflow::synth::{generate_pair, SceneConfig};
use radarflow::train::{pooled_report, PairEval};
use radarflow::types::SceneFlow;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = SceneConfig { seed: 4, outlier_fraction: 0.2, ..Default::default() };
    let set: Vec<_> = (0..10).map(|i| generate_pair(&scene, i)).collect::<Result<_, _>>()?;
    let cfg = MetricConfig::default();

    let score = |name: &str, flows: Vec<SceneFlow>| -> Result<(), Box<dyn std::error::Error>> {
        let items: Vec<PairEval> = set
            .iter()
            .zip(flows)
            .map(|((pair, labels), flow)| PairEval {
                frame: pair.source.clone(),
                flow,
                labels: labels.clone(),
                pred_moving: vec![false; pair.source.len()],
            })
            .collect();
        let report = pooled_report(&items, &cfg)?;
        println!("== {name}");
        print!("{}", report.to_text());
        Ok(())
    };

    score(
        "rigid-only (single Kabsch fit)",
        set.iter().map(|(p, _)| rigid_only_flow(p)).collect::<Result<_, _>>()?,
    )?;
    score(
        "trimmed ICP (10 iterations)",
        set.iter().map(|(p, _)| icp(p, 10, 1e-6).map(|r| r.1)).collect::<Result<_, _>>()?,
    )?;
    Ok(())
}
