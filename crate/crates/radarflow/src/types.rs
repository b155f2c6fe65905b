//! Shared domain types: radar frames, scene flow, rigid transforms and the
//! hyperparameter set used across the pipeline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Orthonormality / determinant tolerance for [`RigidTransform`].
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    #[error("frame contains a non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("frame has no points")]
    EmptyFrame,
    #[error("point {0} sits at the sensor origin")]
    OriginPoint(usize),
}

/// One radar return: 3-D position plus the three scalar radar features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarPoint {
    /// Position in the sensor frame, meters.
    pub position: [f64; 3],
    /// Radial relative velocity, m/s. Positive = receding.
    pub rrv: f64,
    /// Radar cross section, dBsm.
    pub rcs: f64,
    /// Received power, dBm.
    pub power: f64,
}

impl RadarPoint {
    pub fn new(position: [f64; 3], rrv: f64, rcs: f64, power: f64) -> Self {
        Self { position, rrv, rcs, power }
    }

    pub fn range(&self) -> f64 {
        let [x, y, z] = self.position;
        (x * x + y * y + z * z).sqrt()
    }
}

/// An ordered radar point cloud captured at one timestamp.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RadarFrame {
    pub points: Vec<RadarPoint>,
    pub timestamp: f64,
}

impl RadarFrame {
    pub fn new(points: Vec<RadarPoint>, timestamp: f64) -> Self {
        Self { points, timestamp }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| p.position).collect()
    }

    /// Flat 6-channel row per point: x, y, z, rrv, rcs, power.
    pub fn channels(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.points.len() * 6);
        for p in &self.points {
            out.extend_from_slice(&p.position);
            out.push(p.rrv);
            out.push(p.rcs);
            out.push(p.power);
        }
        out
    }
}

/// Checks the frame invariants: nonempty, finite, no point at the origin.
pub fn validate_frame(frame: &RadarFrame) -> Result<&RadarFrame, FrameError> {
    if frame.points.is_empty() {
        return Err(FrameError::EmptyFrame);
    }
    for (i, p) in frame.points.iter().enumerate() {
        if !p.position.iter().all(|c| c.is_finite()) || !p.rrv.is_finite() {
            return Err(FrameError::NonFinite(i));
        }
        if p.range() == 0.0 {
            return Err(FrameError::OriginPoint(i));
        }
    }
    Ok(frame)
}

/// A source/target frame pair separated by `dt` seconds.
#[derive(Debug, Clone)]
pub struct FramePair {
    pub source: RadarFrame,
    pub target: RadarFrame,
    pub dt: f64,
}

impl FramePair {
    pub fn new(source: RadarFrame, target: RadarFrame, dt: f64) -> Self {
        assert!(dt > 0.0, "frame pair dt must be positive");
        Self { source, target, dt }
    }
}

/// Per-source-point 3-D displacement vectors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneFlow {
    pub vectors: Vec<[f64; 3]>,
}

impl SceneFlow {
    pub fn new(vectors: Vec<[f64; 3]>) -> Self {
        Self { vectors }
    }

    pub fn zeros(n: usize) -> Self {
        Self { vectors: vec![[0.0; 3]; n] }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Builds a flow from a flat row-major (n, 3) buffer.
    pub fn from_flat(flat: &[f64]) -> Self {
        assert!(flat.len() % 3 == 0);
        Self { vectors: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect() }
    }
}

/// An SE(3) pose: orthonormal rotation with det +1 plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// Largest deviation of R'R from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += r[k][i] * r[k][j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                err = err.max((dot - expect).abs());
            }
        }
        err
    }

    pub fn det(&self) -> f64 {
        let r = &self.rotation;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    pub fn assert_valid(&self) {
        assert!(self.orthonormality_error() < ROTATION_TOL, "rotation not orthonormal");
        assert!((self.det() - 1.0).abs() < ROTATION_TOL, "rotation is not a proper rotation");
    }

    /// Row-major 12-element [R | t] form used by dataset records.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0], r[0][1], r[0][2], t[0], //
            r[1][0], r[1][1], r[1][2], t[1], //
            r[2][0], r[2][1], r[2][2], t[2],
        ]
    }

    pub fn from_row_major(m: &[f64; 12]) -> Self {
        Self {
            rotation: [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]],
            translation: [m[3], m[7], m[11]],
        }
    }
}

/// Per-source-point static/moving flags; `true` = static.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticMask {
    pub flags: Vec<bool>,
}

impl StaticMask {
    pub fn new(flags: Vec<bool>) -> Self {
        Self { flags }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn static_count(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }
}

/// Evaluation-only ground truth attached to a frame pair.
#[derive(Debug, Clone)]
pub struct FrameLabels {
    pub gt_flow: SceneFlow,
    /// `true` = moving.
    pub gt_moving: Vec<bool>,
    pub gt_ego: RigidTransform,
    /// `false` marks ghost/outlier points excluded from flow metrics.
    pub valid: Vec<bool>,
}

/// Per-channel enable flags for the three radar feature channels.
/// Disabling a channel zeroes it at the network input; shapes are unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureFlags {
    pub rrv: bool,
    pub rcs: bool,
    pub power: bool,
}

impl Default for FeatureFlags {
    fn default() -> Self {
        Self { rrv: true, rcs: true, power: true }
    }
}

/// Hyperparameters shared by the network, refinement and losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Number of feature extraction scales.
    pub n_scales: usize,
    /// Local feature channels per scale (encoder and decoder alike).
    pub c_local: usize,
    /// Correlated feature channels.
    pub c_cor: usize,
    /// Grouping radii, meters; strictly increasing.
    pub radii: Vec<f64>,
    /// Static/moving relative-residual threshold.
    pub zeta: f64,
    /// Density threshold for outlier discarding.
    pub delta: f64,
    /// Squared-distance tolerance of the Chamfer hinge.
    pub epsilon: f64,
    /// RBF bandwidth of the smoothness weights, m^2.
    pub alpha: f64,
    /// Neighbour count for the smoothness loss.
    pub n_neighbors: usize,
}

/// Hyperparameter defaults.
pub fn default_hyperparams() -> HyperParams {
    HyperParams {
        n_scales: 4,
        c_local: 64,
        c_cor: 512,
        radii: vec![2.0, 4.0, 8.0, 16.0],
        zeta: 0.15,
        delta: 0.005,
        epsilon: 0.1,
        alpha: 0.5,
        n_neighbors: 8,
    }
}

impl Default for HyperParams {
    fn default() -> Self {
        default_hyperparams()
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid hyperparameters: {0}")]
    Invalid(String),
    #[error("config parse error: {0}")]
    Parse(String),
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.radii.windows(2).any(|w| w[0] >= w[1]) || self.radii.iter().any(|r| *r <= 0.0) {
            return Err(ConfigError::Invalid("radii must be positive and strictly increasing".into()));
        }
        if self.radii.len() != self.n_scales {
            return Err(ConfigError::Invalid("radii length must equal n_scales".into()));
        }
        for (name, v) in [
            ("zeta", self.zeta),
            ("delta", self.delta),
            ("epsilon", self.epsilon),
            ("alpha", self.alpha),
        ] {
            if v <= 0.0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if self.n_scales == 0 || self.c_local == 0 || self.c_cor == 0 || self.n_neighbors == 0 {
            return Err(ConfigError::Invalid("counts must be positive".into()));
        }
        Ok(())
    }

    /// Flat key-value config document; keys mirror the field names.
    pub fn to_config_string(&self) -> String {
        toml::to_string(self).expect("hyperparams serialize")
    }

    pub fn from_config_string(s: &str) -> Result<Self, ConfigError> {
        let hp: HyperParams = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        hp.validate()?;
        Ok(hp)
    }
}
