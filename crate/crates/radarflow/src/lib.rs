//! Self-supervised scene-flow estimation for sparse 4-D radar point clouds.
//!
//! The crate covers the full loop: synthetic scene generation, a multi-scale
//! point-feature network that regresses coarse per-point flow, a static-point
//! refinement stage that fits a rigid ego-motion and overwrites static flow
//! with it, self-supervised losses that need no flow annotations, baselines,
//! evaluation metrics, and a small training driver. Everything is pure Rust
//! on `f64`, single-threaded and bit-deterministic for a fixed seed.

pub mod baselines;
pub mod cli;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod rofe;
pub mod sfr;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod types;
