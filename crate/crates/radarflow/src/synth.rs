//! Deterministic synthetic 4-D radar scene generator.
//!
//! Scenes consist of static structure (walls and poles as point clusters)
//! plus a handful of rigid movers, observed from an ego platform that
//! translates and yaws between the two frames. Ground-truth flow, motion
//! labels and the ego transform are exact by construction; the measured RRV
//! channel is synthesized by inverting the radial-projection relation
//! (v_r · Δt = sᵀ x / ‖x‖) so that clean data satisfies it to machine
//! precision. Gaussian noise perturbs positions and RRV, and a configurable
//! fraction of uniform ghost points models multipath outliers.
//!
//! Randomness is counter-based: every pair is generated from
//! `ChaCha8Rng::seed_from_u64(seed)` with the pair index as the stream
//! number, so pairs are reproducible independently and in parallel.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{FrameLabels, FramePair, RadarFrame, RadarPoint, RigidTransform, SceneFlow};

const MAGIC: &[u8; 4] = b"R4DF";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    ConfigInvalid(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed record: {0}")]
    BadRecord(String),
}

/// Scene generation parameters. Ranges are inclusive `(lo, hi)` bounds
/// sampled uniformly per pair; angles are radians.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    /// Static environment points before outlier injection.
    pub n_static: usize,
    pub n_movers: usize,
    pub points_per_mover: usize,
    /// Ego forward speed range, m/s.
    pub ego_speed: (f64, f64),
    /// Ego yaw rate range, rad/s.
    pub ego_yaw_rate: (f64, f64),
    /// Mover ground speed range, m/s.
    pub mover_speed: (f64, f64),
    /// Inter-frame time, seconds.
    pub dt: f64,
    /// Per-axis Gaussian position noise σ, meters.
    pub position_noise: f64,
    /// Gaussian RRV noise σ, m/s.
    pub rrv_noise: f64,
    /// Fraction of ghost points appended to each frame, of the real count.
    pub outlier_fraction: f64,
    /// Azimuth half-angle of the sensor FOV, radians.
    pub fov_azimuth: f64,
    /// Elevation half-angle of the sensor FOV, radians.
    pub fov_elevation: f64,
    pub max_range: f64,
    /// Mover acceleration magnitude, m/s². Nonzero values break the
    /// constant-velocity assumption behind the RRV relation on purpose.
    pub mover_accel: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_static: 176,
            n_movers: 3,
            points_per_mover: 12,
            ego_speed: (0.0, 8.0),
            ego_yaw_rate: (-0.2, 0.2),
            mover_speed: (2.0, 8.0),
            dt: 0.1,
            position_noise: 0.02,
            rrv_noise: 0.05,
            outlier_fraction: 0.2,
            fov_azimuth: 60f64.to_radians(),
            fov_elevation: 10f64.to_radians(),
            max_range: 75.0,
            mover_accel: 0.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::ConfigInvalid(m.to_string()));
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(0.0..=0.5).contains(&self.outlier_fraction) {
            return bad("outlier_fraction must lie in [0, 0.5]");
        }
        for (name, (lo, hi)) in [
            ("ego_speed", self.ego_speed),
            ("ego_yaw_rate", self.ego_yaw_rate),
            ("mover_speed", self.mover_speed),
        ] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return bad(&format!("{name} range must satisfy lo <= hi"));
            }
        }
        if self.n_static + self.n_movers * self.points_per_mover == 0 {
            return bad("scene must contain at least one point");
        }
        if !(self.max_range > 1.0) || !(self.fov_azimuth > 0.0) || !(self.fov_elevation > 0.0) {
            return bad("max_range and FOV angles must be positive");
        }
        if self.position_noise < 0.0 || self.rrv_noise < 0.0 {
            return bad("noise sigmas must be non-negative");
        }
        Ok(())
    }
}

/// One standard-normal draw via Box–Muller. Hand-rolled (rather than a
/// distribution crate) so the byte stream of generated datasets is pinned by
/// this crate alone.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn yaw_rotation(angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// A latent scene point before measurement noise.
struct LatentPoint {
    world: [f64; 3],
    /// World-frame velocity; zero for static structure.
    velocity: [f64; 3],
    moving: bool,
    rcs: f64,
    power: f64,
}

fn in_fov(cfg: &SceneConfig, p: [f64; 3]) -> bool {
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    if r < 1.0 || r > cfg.max_range {
        return false;
    }
    let az = p[1].atan2(p[0]);
    let el = (p[2] / r).asin();
    az.abs() <= cfg.fov_azimuth && el.abs() <= cfg.fov_elevation
}

/// Samples a cluster center well inside the FOV cone.
fn sample_center(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let r = rng.gen_range(6.0..cfg.max_range * 0.8);
    let az = rng.gen_range(-cfg.fov_azimuth * 0.85..cfg.fov_azimuth * 0.85);
    let el = rng.gen_range(-cfg.fov_elevation * 0.5..cfg.fov_elevation * 0.5);
    [r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin()]
}

fn sample_static(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<LatentPoint> {
    let mut pts = Vec::with_capacity(cfg.n_static);
    while pts.len() < cfg.n_static {
        let remaining = cfg.n_static - pts.len();
        let cluster_size = rng.gen_range(6..=20).min(remaining);
        let center = sample_center(cfg, rng);
        let rcs_mean = rng.gen_range(-5.0..25.0);
        let power_mean = rng.gen_range(20.0..60.0);
        let is_wall = rng.gen_bool(0.5);
        // wall: points spread along a horizontal direction; pole: tight
        // vertical stack
        let dir_angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let (dx, dy) = (dir_angle.cos(), dir_angle.sin());
        for _ in 0..cluster_size {
            let p = if is_wall {
                let a = rng.gen_range(-4.0..4.0);
                [
                    center[0] + a * dx + 0.05 * gaussian(rng),
                    center[1] + a * dy + 0.05 * gaussian(rng),
                    center[2] + rng.gen_range(-0.5..0.5),
                ]
            } else {
                [
                    center[0] + 0.1 * gaussian(rng),
                    center[1] + 0.1 * gaussian(rng),
                    center[2] + rng.gen_range(-1.0..1.0),
                ]
            };
            if !in_fov(cfg, p) {
                continue;
            }
            pts.push(LatentPoint {
                world: p,
                velocity: [0.0; 3],
                moving: false,
                rcs: rcs_mean + 0.5 * gaussian(rng),
                power: power_mean + 0.5 * gaussian(rng),
            });
        }
    }
    pts.truncate(cfg.n_static);
    pts
}

fn sample_movers(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<LatentPoint> {
    let mut pts = Vec::new();
    for _ in 0..cfg.n_movers {
        let center = sample_center(cfg, rng);
        let speed = rng.gen_range(cfg.mover_speed.0..=cfg.mover_speed.1);
        let heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let velocity = [speed * heading.cos(), speed * heading.sin(), 0.0];
        let rcs_mean = rng.gen_range(-5.0..25.0);
        let power_mean = rng.gen_range(20.0..60.0);
        let mut placed = 0;
        while placed < cfg.points_per_mover {
            // car-sized box around the center
            let p = [
                center[0] + rng.gen_range(-2.0..2.0),
                center[1] + rng.gen_range(-1.0..1.0),
                center[2] + rng.gen_range(-0.4..0.4),
            ];
            if !in_fov(cfg, p) {
                continue;
            }
            pts.push(LatentPoint {
                world: p,
                velocity,
                moving: true,
                rcs: rcs_mean + 0.5 * gaussian(rng),
                power: power_mean + 0.5 * gaussian(rng),
            });
            placed += 1;
        }
    }
    pts
}

fn ghost_point(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> RadarPoint {
    let r = rng.gen_range(1.5..cfg.max_range);
    let az = rng.gen_range(-cfg.fov_azimuth..cfg.fov_azimuth);
    let el = rng.gen_range(-cfg.fov_elevation..cfg.fov_elevation);
    let speed_cap = cfg.mover_speed.1.max(cfg.ego_speed.1).max(1.0);
    RadarPoint::new(
        [r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin()],
        rng.gen_range(-speed_cap..speed_cap),
        rng.gen_range(-20.0..40.0),
        rng.gen_range(0.0..80.0),
    )
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Generates pair `index` of the configured stream.
///
/// Frame-1 sensor coordinates serve as the world frame. The ego pose at
/// frame 2 is a yaw `R_e` plus translation `t_e`, so a world point `p` is
/// seen at `R_eᵀ (p − t_e)` in frame 2; the recorded ego transform is that
/// map restricted to static points (`R = R_eᵀ`, `t = −R_eᵀ t_e`). Ground
/// truth flow is computed on the *measured* (noisy) source positions, which
/// keeps the static-point map exactly rigid and the RRV relation exact
/// before RRV noise.
pub fn generate_pair(cfg: &SceneConfig, index: u64) -> Result<(FramePair, FrameLabels), SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);

    let speed = rng.gen_range(cfg.ego_speed.0..=cfg.ego_speed.1);
    let yaw_rate = rng.gen_range(cfg.ego_yaw_rate.0..=cfg.ego_yaw_rate.1);
    let dyaw = yaw_rate * cfg.dt;
    let t_e = [speed * cfg.dt * (dyaw * 0.5).cos(), speed * cfg.dt * (dyaw * 0.5).sin(), 0.0];
    // static-point map: x ↦ R_eᵀ (x − t_e)
    let r_et = yaw_rotation(-dyaw);
    let gt_ego = RigidTransform {
        rotation: r_et,
        translation: [
            -(r_et[0][0] * t_e[0] + r_et[0][1] * t_e[1]),
            -(r_et[1][0] * t_e[0] + r_et[1][1] * t_e[1]),
            -t_e[2],
        ],
    };

    let mut latent = sample_static(cfg, &mut rng);
    latent.extend(sample_movers(cfg, &mut rng));
    let n_real = latent.len();

    let mut source = Vec::with_capacity(n_real);
    let mut target = Vec::with_capacity(n_real);
    let mut gt_flow = Vec::with_capacity(n_real);
    let mut gt_moving = Vec::with_capacity(n_real);
    let mut valid = Vec::with_capacity(n_real);

    for lp in &latent {
        let x = [
            lp.world[0] + cfg.position_noise * gaussian(&mut rng),
            lp.world[1] + cfg.position_noise * gaussian(&mut rng),
            lp.world[2] + cfg.position_noise * gaussian(&mut rng),
        ];
        // constant-velocity world displacement over dt, plus the optional
        // acceleration term along the velocity direction
        let v = lp.velocity;
        let vn = norm(v);
        let accel_shift = if lp.moving && vn > 0.0 && cfg.mover_accel != 0.0 {
            0.5 * cfg.mover_accel * cfg.dt * cfg.dt / vn
        } else {
            0.0
        };
        let moved = [
            x[0] + v[0] * cfg.dt + v[0] * accel_shift,
            x[1] + v[1] * cfg.dt + v[1] * accel_shift,
            x[2] + v[2] * cfg.dt + v[2] * accel_shift,
        ];
        let x2 = gt_ego.apply(moved);
        let flow = [x2[0] - x[0], x2[1] - x[1], x2[2] - x[2]];
        // RRV reflects instantaneous velocity: the acceleration term is part
        // of the displacement but not of the Doppler measurement
        let moved_cv = [x[0] + v[0] * cfg.dt, x[1] + v[1] * cfg.dt, x[2] + v[2] * cfg.dt];
        let x2_cv = gt_ego.apply(moved_cv);
        let flow_cv = [x2_cv[0] - x[0], x2_cv[1] - x[1], x2_cv[2] - x[2]];
        let rrv = dot(flow_cv, x) / (norm(x) * cfg.dt) + cfg.rrv_noise * gaussian(&mut rng);
        source.push(RadarPoint::new(x, rrv, lp.rcs, lp.power));
        gt_flow.push(flow);
        gt_moving.push(lp.moving);
        valid.push(true);

        // the target frame re-measures the moved latent point with its own
        // noise; no index correspondence is promised to consumers
        let y = [
            x2[0] + cfg.position_noise * gaussian(&mut rng),
            x2[1] + cfg.position_noise * gaussian(&mut rng),
            x2[2] + cfg.position_noise * gaussian(&mut rng),
        ];
        // frame-2 RRV: same constant motion carried one more interval
        let v2 = [
            r_et[0][0] * v[0] + r_et[0][1] * v[1],
            r_et[1][0] * v[0] + r_et[1][1] * v[1],
            v[2],
        ];
        let moved2 = [y[0] + v2[0] * cfg.dt, y[1] + v2[1] * cfg.dt, y[2] + v2[2] * cfg.dt];
        let y3 = gt_ego.apply(moved2);
        let flow2 = [y3[0] - y[0], y3[1] - y[1], y3[2] - y[2]];
        let rrv2 = dot(flow2, y) / (norm(y) * cfg.dt) + cfg.rrv_noise * gaussian(&mut rng);
        target.push(RadarPoint::new(y, rrv2, lp.rcs, lp.power));
    }

    let n_ghosts = (cfg.outlier_fraction * n_real as f64).round() as usize;
    for _ in 0..n_ghosts {
        source.push(ghost_point(cfg, &mut rng));
        gt_flow.push([0.0; 3]);
        gt_moving.push(false);
        valid.push(false);
    }
    for _ in 0..n_ghosts {
        target.push(ghost_point(cfg, &mut rng));
    }

    let pair = FramePair::new(
        RadarFrame::new(source, 0.0),
        RadarFrame::new(target, cfg.dt),
        cfg.dt,
    );
    let labels = FrameLabels {
        gt_flow: SceneFlow::new(gt_flow),
        gt_moving,
        gt_ego,
        valid,
    };
    Ok((pair, labels))
}

// ---------------------------------------------------------------------------
// Binary record format

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serializes a pair + labels into the on-disk record layout.
pub fn encode_record(pair: &FramePair, labels: &FrameLabels) -> Vec<u8> {
    let n1 = pair.source.len();
    let n2 = pair.target.len();
    let mut buf = Vec::with_capacity(4 + 4 + 8 + 8 + (n1 + n2) * 48 + n1 * 26 + 96);
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_u32(&mut buf, n1 as u32);
    put_u32(&mut buf, n2 as u32);
    put_f64(&mut buf, pair.dt);
    for frame in [&pair.source, &pair.target] {
        for p in &frame.points {
            for v in [p.position[0], p.position[1], p.position[2], p.rrv, p.rcs, p.power] {
                put_f64(&mut buf, v);
            }
        }
    }
    for f in &labels.gt_flow.vectors {
        for v in f {
            put_f64(&mut buf, *v);
        }
    }
    buf.extend(labels.gt_moving.iter().map(|&m| m as u8));
    buf.extend(labels.valid.iter().map(|&v| v as u8));
    for v in labels.gt_ego.to_row_major() {
        put_f64(&mut buf, v);
    }
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SynthError> {
        if self.pos + n > self.buf.len() {
            return Err(SynthError::BadRecord("truncated record".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, SynthError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, SynthError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_record(buf: &[u8]) -> Result<(FramePair, FrameLabels), SynthError> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(SynthError::BadRecord("bad magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(SynthError::BadRecord(format!("unsupported version {version}")));
    }
    let n1 = c.u32()? as usize;
    let n2 = c.u32()? as usize;
    let dt = c.f64()?;
    let read_frame = |c: &mut Cursor, n: usize, ts: f64| -> Result<RadarFrame, SynthError> {
        let mut pts = Vec::with_capacity(n);
        for _ in 0..n {
            let vals: Vec<f64> = (0..6).map(|_| c.f64()).collect::<Result<_, _>>()?;
            pts.push(RadarPoint::new([vals[0], vals[1], vals[2]], vals[3], vals[4], vals[5]));
        }
        Ok(RadarFrame::new(pts, ts))
    };
    let source = read_frame(&mut c, n1, 0.0)?;
    let target = read_frame(&mut c, n2, dt)?;
    let mut flow = Vec::with_capacity(n1);
    for _ in 0..n1 {
        flow.push([c.f64()?, c.f64()?, c.f64()?]);
    }
    let gt_moving: Vec<bool> = c.take(n1)?.iter().map(|&b| b != 0).collect();
    let valid: Vec<bool> = c.take(n1)?.iter().map(|&b| b != 0).collect();
    let mut ego = [0.0; 12];
    for v in ego.iter_mut() {
        *v = c.f64()?;
    }
    if c.pos != buf.len() {
        return Err(SynthError::BadRecord("trailing bytes".into()));
    }
    Ok((
        FramePair::new(source, target, dt),
        FrameLabels {
            gt_flow: SceneFlow::new(flow),
            gt_moving,
            gt_ego: RigidTransform::from_row_major(&ego),
            valid,
        },
    ))
}

pub fn write_record(path: &Path, pair: &FramePair, labels: &FrameLabels) -> Result<(), SynthError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_record(pair, labels))?;
    Ok(())
}

pub fn read_record(path: &Path) -> Result<(FramePair, FrameLabels), SynthError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_record(&buf)
}

/// Generates `n_pairs` records, splits them `(train, val, test)` by the
/// given ratios, and writes one directory per split with a `manifest.toml`
/// listing the filenames, seed, and full config. Pair indices are global, so
/// re-running with identical arguments reproduces identical bytes.
pub fn generate_dataset(
    cfg: &SceneConfig,
    n_pairs: usize,
    split_ratios: (f64, f64, f64),
    out_dir: &Path,
) -> Result<Vec<PathBuf>, SynthError> {
    cfg.validate()?;
    let (r0, r1, r2) = split_ratios;
    if (r0 + r1 + r2 - 1.0).abs() > 1e-9 || r0 < 0.0 || r1 < 0.0 || r2 < 0.0 {
        return Err(SynthError::ConfigInvalid("split ratios must be non-negative and sum to 1".into()));
    }
    let n_train = (n_pairs as f64 * r0).round() as usize;
    let n_val = (n_pairs as f64 * r1).round() as usize;
    let n_train = n_train.min(n_pairs);
    let n_val = n_val.min(n_pairs - n_train);
    let n_test = n_pairs - n_train - n_val;

    let mut manifests = Vec::new();
    let mut index = 0u64;
    for (split, count) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        let dir = out_dir.join(split);
        fs::create_dir_all(&dir)?;
        let mut names = Vec::with_capacity(count);
        for _ in 0..count {
            let name = format!("pair_{index:06}.r4df");
            let (pair, labels) = generate_pair(cfg, index)?;
            write_record(&dir.join(&name), &pair, &labels)?;
            names.push(name);
            index += 1;
        }
        let manifest = Manifest { seed: cfg.seed, config: cfg.clone(), records: names };
        let path = dir.join("manifest.toml");
        fs::write(&path, toml::to_string_pretty(&manifest).expect("manifest serializes"))?;
        manifests.push(path);
    }
    Ok(manifests)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: SceneConfig,
    pub records: Vec<String>,
}

/// Loads every record listed in a split's manifest, in manifest order.
pub fn load_split(dir: &Path) -> Result<Vec<(FramePair, FrameLabels)>, SynthError> {
    let manifest: Manifest = toml::from_str(&fs::read_to_string(dir.join("manifest.toml"))?)
        .map_err(|e| SynthError::BadRecord(format!("manifest: {e}")))?;
    manifest.records.iter().map(|name| read_record(&dir.join(name))).collect()
}
