//! Radar-Oriented Flow Estimation network: multi-scale set-conv encoder,
//! patch-to-patch cost volume, and flow decoder producing the coarse flow.
//!
//! The two frames share one encoder (identical weights). Per-scale set convs
//! group each point's radius neighborhood, run a per-neighbor MLP on
//! concatenated [neighbor features, displacement], and max-pool over the
//! neighborhood; the four scale outputs plus a replicated global max-pool
//! form the per-point feature. The cost volume correlates each source point
//! against its nearest target neighbors (point-to-patch) and then aggregates
//! those costs over source neighborhoods (patch-to-patch), both with
//! softmax distance weighting learned by a scalar head. The decoder re-groups
//! the flow embedding with another bank of set convs and a final MLP whose
//! zero-initialized output layer makes the initial coarse flow exactly zero.
//!
//! All layer widths derive from `HyperParams` so desk-scale configurations
//! shrink the network uniformly; the defaults reproduce the reference
//! architecture exactly (asserted in tests).

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError};
use crate::types::{ConfigError, FeatureFlags, FramePair, HyperParams, RadarFrame, SceneFlow};

/// Neighborhood sizes per encoder/decoder scale (Table-style widening with
/// radius).
pub const SCALE_SAMPLES: [usize; 4] = [4, 8, 16, 32];
/// Neighbors used by both cost-volume stages.
pub const COST_VOLUME_SAMPLES: usize = 8;

const CKPT_MAGIC: &[u8; 4] = b"RFCK";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RofeError {
    #[error("invalid hyperparameters: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("frame must contain at least one point")]
    EmptyFrame,
}

/// A named, shaped weight blob.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RofeModel {
    pub hp: HyperParams,
    pub features: FeatureFlags,
    params: Vec<Param>,
}

/// Derived layer widths; all follow from `c_local` and `c_cor` and collapse
/// to the reference table at the default hyperparameters.
#[derive(Debug, Clone)]
struct Widths {
    encoder: Vec<usize>,
    cost_volume: Vec<usize>,
    decoder: Vec<usize>,
    output: Vec<usize>,
}

fn widths(hp: &HyperParams) -> Widths {
    Widths {
        encoder: vec![hp.c_local / 2, hp.c_local / 2, hp.c_local],
        cost_volume: vec![hp.c_cor; 3],
        decoder: vec![hp.c_cor, hp.c_cor / 2, hp.c_local],
        output: vec![hp.c_cor / 2, hp.c_cor / 4, hp.c_local, 3],
    }
}

/// Per-point feature width out of the encoder (local scales + global pool).
pub fn encoded_width(hp: &HyperParams) -> usize {
    2 * hp.n_scales * hp.c_local
}

fn mlp_param_list(
    prefix: &str,
    mut c_in: usize,
    widths: &[usize],
    activated_last: bool,
    out: &mut Vec<(String, Vec<usize>)>,
) {
    for (l, &w) in widths.iter().enumerate() {
        out.push((format!("{prefix}.lin{l}.w"), vec![c_in, w]));
        out.push((format!("{prefix}.lin{l}.b"), vec![w]));
        // activated layers carry a per-channel normalization (see `mlp`)
        if activated_last || l + 1 < widths.len() {
            out.push((format!("{prefix}.lin{l}.gamma"), vec![w]));
            out.push((format!("{prefix}.lin{l}.beta"), vec![w]));
        }
        c_in = w;
    }
}

/// Deterministically ordered (name, shape) listing of every weight blob.
fn architecture(hp: &HyperParams) -> Vec<(String, Vec<usize>)> {
    let w = widths(hp);
    let mut list = Vec::new();
    for s in 0..hp.n_scales {
        mlp_param_list(&format!("enc{s}"), 6 + 3, &w.encoder, true, &mut list);
    }
    let g = encoded_width(hp);
    mlp_param_list("cv1", 2 * g + 3, &w.cost_volume, true, &mut list);
    list.push(("cv1.head.w".into(), vec![hp.c_cor, 1]));
    list.push(("cv1.head.b".into(), vec![1]));
    mlp_param_list("cv2", hp.c_cor + 3, &w.cost_volume, true, &mut list);
    list.push(("cv2.head.w".into(), vec![hp.c_cor, 1]));
    list.push(("cv2.head.b".into(), vec![1]));
    let embed = hp.c_cor + g + 6;
    for s in 0..hp.n_scales {
        mlp_param_list(&format!("dec{s}"), embed + 3, &w.decoder, true, &mut list);
    }
    mlp_param_list("out", 2 * hp.n_scales * hp.c_local, &w.output, false, &mut list);
    list
}

impl RofeModel {
    /// Fresh model with uniform ±sqrt(6/(fan_in+fan_out)) weights, zero
    /// biases, and a zero-initialized output layer (so the initial coarse
    /// flow is exactly zero).
    pub fn new(hp: &HyperParams, features: FeatureFlags, seed: u64) -> Result<Self, RofeError> {
        hp.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = architecture(hp);
        let n_layers = widths(hp).output.len();
        let zero_prefix = format!("out.lin{}", n_layers - 1);
        let params = arch
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let value = if name.ends_with(".gamma") {
                    vec![1.0; n]
                } else if name.ends_with(".b") || name.ends_with(".beta") || name.starts_with(&zero_prefix) {
                    vec![0.0; n]
                } else {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                };
                Param { name, shape, value }
            })
            .collect();
        Ok(Self { hp: hp.clone(), features, params })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Materializes every parameter as a tape leaf (trainable or constant),
    /// keyed by name.
    pub fn instantiate(&self, tape: &Tape, trainable: bool) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), tape.leaf(&p.shape, p.value.clone(), trainable)))
            .collect()
    }

    /// Full differentiable forward pass producing the coarse flow (N₁, 3).
    pub fn forward(
        &self,
        tape: &Tape,
        params: &BTreeMap<String, Tensor>,
        pair: &FramePair,
    ) -> Result<Tensor, RofeError> {
        if pair.source.is_empty() || pair.target.is_empty() {
            return Err(RofeError::EmptyFrame);
        }
        let hp = &self.hp;
        let w = widths(hp);
        let src_pos = pair.source.positions();
        let dst_pos = pair.target.positions();
        let raw_src = tape.constant(&[src_pos.len(), 6], masked_channels(&pair.source, &self.features));
        let raw_dst = tape.constant(&[dst_pos.len(), 6], masked_channels(&pair.target, &self.features));

        let g_p = encode(tape, params, hp, &w, "enc", &src_pos, &raw_src)?;
        let g_q = encode(tape, params, hp, &w, "enc", &dst_pos, &raw_dst)?;

        let h = cost_volume(tape, params, hp, &src_pos, &g_p, &dst_pos, &g_q)?;

        let embed = Tensor::concat(&[&h, &g_p, &raw_src], 1)?;
        let u = grouped_scales(tape, params, hp, "dec", &w.decoder, &src_pos, &embed)?;
        Ok(mlp(params, "out", &w.output, &u, false)?)
    }

    /// Plain inference wrapper: constant parameters, returns the coarse flow.
    pub fn coarse_flow(&self, pair: &FramePair) -> Result<SceneFlow, RofeError> {
        let tape = Tape::new();
        let params = self.instantiate(&tape, false);
        let flow = self.forward(&tape, &params, pair)?;
        Ok(SceneFlow::from_flat(&flow.to_vec()))
    }

    /// Writes the versioned checkpoint: header with a hyperparameter echo
    /// and feature flags, followed by named weight blobs (little-endian
    /// doubles).
    pub fn save(&self, path: &Path) -> Result<(), RofeError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let hp_echo = self.hp.to_config_string();
        buf.extend_from_slice(&(hp_echo.len() as u32).to_le_bytes());
        buf.extend_from_slice(hp_echo.as_bytes());
        buf.push(self.features.rrv as u8);
        buf.push(self.features.rcs as u8);
        buf.push(self.features.power as u8);
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(p.name.as_bytes());
            buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &p.value {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RofeError> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        let bad = |m: &str| RofeError::BadCheckpoint(m.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], RofeError> {
            if pos + n > buf.len() {
                return Err(bad("truncated checkpoint"));
            }
            let s = &buf[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(4)? != CKPT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hp_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let hp_echo = std::str::from_utf8(take(hp_len)?).map_err(|_| bad("hp echo not utf-8"))?;
        let hp = HyperParams::from_config_string(hp_echo)?;
        let f = take(3)?;
        let features = FeatureFlags { rrv: f[0] != 0, rcs: f[1] != 0, power: f[2] != 0 };
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(name_len)?)
                .map_err(|_| bad("param name not utf-8"))?
                .to_string();
            let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(n * 8)?;
            let value = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.push(Param { name, shape, value });
        }
        if pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        // structural cross-check against the echoed hyperparameters
        let expect = architecture(&hp);
        if expect.len() != params.len()
            || expect.iter().zip(&params).any(|((n, s), p)| *n != p.name || *s != p.shape)
        {
            return Err(bad("weight blobs do not match the echoed architecture"));
        }
        Ok(Self { hp, features, params })
    }
}

/// Fixed per-channel input conditioning. Raw channels live on wildly
/// different scales (positions up to the 75 m sensor range, power around
/// 40 dBm) and feed MLPs whose weights are initialised at unit scale;
/// without a preconditioner, optimisation crawls. Scaling (and centering)
/// the input by constants is equivalent to rescaling the first-layer
/// weights and biases, so this is an initialisation choice, not an
/// architecture change. Scales: positions shrink isotropically by the
/// sensor range; RRV by its typical span; RCS/power are centred on their
/// emitter midpoints and scaled to roughly unit spread.
const POS_SCALE: f64 = 1.0 / 75.0;
const RRV_SCALE: f64 = 1.0 / 8.0;
const RCS_CENTER: f64 = 10.0;
const RCS_SCALE: f64 = 1.0 / 15.0;
const POWER_CENTER: f64 = 40.0;
const POWER_SCALE: f64 = 1.0 / 20.0;

/// Flat 6-channel rows, preconditioned per channel, with disabled feature
/// channels zeroed (after centering, so a disabled channel is exactly
/// zero). Positions are never masked; RRV/RCS/power are input channels
/// only (losses keep using the measured values).
pub fn masked_channels(frame: &RadarFrame, flags: &FeatureFlags) -> Vec<f64> {
    let mut rows = frame.channels();
    for row in rows.chunks_exact_mut(6) {
        row[0] *= POS_SCALE;
        row[1] *= POS_SCALE;
        row[2] *= POS_SCALE;
        row[3] = if flags.rrv { row[3] * RRV_SCALE } else { 0.0 };
        row[4] = if flags.rcs { (row[4] - RCS_CENTER) * RCS_SCALE } else { 0.0 };
        row[5] = if flags.power { (row[5] - POWER_CENTER) * POWER_SCALE } else { 0.0 };
    }
    rows
}

fn sqdist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Radius neighborhood query: per query point, up to `k` support indices
/// within `radius`, nearest-first with lowest-index tie-breaking. Deficits
/// are padded by repeating the nearest found index; a query with no support
/// point in range indexes itself, so `support` and `queries` must be the
/// same cloud for the fallback to be meaningful.
pub fn ball_query(support: &[[f64; 3]], queries: &[[f64; 3]], radius: f64, k: usize) -> Vec<usize> {
    let r2 = radius * radius;
    let mut out = Vec::with_capacity(queries.len() * k);
    for (qi, q) in queries.iter().enumerate() {
        let mut found: Vec<usize> = (0..support.len()).filter(|&j| sqdist(*q, support[j]) <= r2).collect();
        found.sort_by(|&a, &b| sqdist(*q, support[a]).partial_cmp(&sqdist(*q, support[b])).unwrap());
        found.truncate(k);
        if found.is_empty() {
            found.push(qi);
        }
        let pad = found[0];
        while found.len() < k {
            found.push(pad);
        }
        out.extend(found);
    }
    out
}

/// Exact k-nearest-neighbor indices (nearest-first, lowest-index ties),
/// padded by repetition when the support is smaller than `k`.
pub fn knn(support: &[[f64; 3]], queries: &[[f64; 3]], k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(queries.len() * k);
    for q in queries {
        let mut order: Vec<usize> = (0..support.len()).collect();
        order.sort_by(|&a, &b| sqdist(*q, support[a]).partial_cmp(&sqdist(*q, support[b])).unwrap());
        order.truncate(k);
        let pad = order[0];
        while order.len() < k {
            order.push(pad);
        }
        out.extend(order);
    }
    out
}

fn linear(
    params: &BTreeMap<String, Tensor>,
    prefix: &str,
    l: usize,
    x: &Tensor,
) -> Result<Tensor, TensorError> {
    let w = &params[&format!("{prefix}.lin{l}.w")];
    let b = &params[&format!("{prefix}.lin{l}.b")];
    let rows = x.shape()[0];
    let y = x.matmul(w)?;
    let b_row = b.reshape(&[1, b.shape()[0]])?.gather(&vec![0; rows])?;
    y.add(&b_row)
}

/// ReLU MLP; `relu_last` keeps the final layer linear when false.
fn mlp(
    params: &BTreeMap<String, Tensor>,
    prefix: &str,
    widths: &[usize],
    x: &Tensor,
    relu_last: bool,
) -> Result<Tensor, TensorError> {
    let mut h = x.clone();
    for l in 0..widths.len() {
        h = linear(params, prefix, l, &h)?;
        if relu_last || l + 1 < widths.len() {
            h = normalize(params, prefix, l, &h)?;
            h = h.relu();
        }
    }
    Ok(h)
}

/// Per-channel normalization over the rows of the current cloud (the point or
/// neighbor dimension), with learned per-channel scale and shift — the
/// normalization step of the cited set-conv lineage, made stateless:
/// statistics always come from the rows being processed, so inference needs
/// no running averages and every forward pass is deterministic. Statistics
/// are symmetric in the rows, so row permutations stay exactly equivariant.
fn normalize(
    params: &BTreeMap<String, Tensor>,
    prefix: &str,
    l: usize,
    x: &Tensor,
) -> Result<Tensor, TensorError> {
    const EPS: f64 = 1e-5;
    let n = x.shape()[0];
    let c = x.shape()[1];
    // tile a [c] row statistic / parameter across all rows
    let tile = |t: &Tensor| -> Result<Tensor, TensorError> {
        t.reshape(&[1, c])?.gather(&vec![0; n])
    };
    let inv_n = 1.0 / n as f64;
    let mean = x.sum(Some(0))?.scalar_mul(inv_n);
    let centered = x.sub(&tile(&mean)?)?;
    let var = centered.mul(&centered)?.sum(Some(0))?.scalar_mul(inv_n);
    let inv_std = var.scalar_add(EPS).sqrt().recip();
    let gamma = &params[&format!("{prefix}.lin{l}.gamma")];
    let beta = &params[&format!("{prefix}.lin{l}.beta")];
    centered.mul(&tile(&inv_std)?)?.mul(&tile(gamma)?)?.add(&tile(beta)?)
}

/// Constant displacement rows (support[idx] − query) for a flat neighbor
/// table, divided by the neighborhood `scale` (the grouping radius) so
/// per-neighbor MLP inputs sit near unit magnitude at every scale.
fn displacement_rows(
    tape: &Tape,
    support: &[[f64; 3]],
    queries: &[[f64; 3]],
    idx: &[usize],
    k: usize,
    scale: f64,
) -> Tensor {
    let inv = 1.0 / scale;
    let mut disp = Vec::with_capacity(idx.len() * 3);
    for (row, &j) in idx.iter().enumerate() {
        let q = queries[row / k];
        let s = support[j];
        disp.extend_from_slice(&[(s[0] - q[0]) * inv, (s[1] - q[1]) * inv, (s[2] - q[2]) * inv]);
    }
    tape.constant(&[idx.len(), 3], disp)
}

/// One set conv: gather neighbors, per-neighbor MLP on [features, disp],
/// channel-wise max over the neighborhood.
#[allow(clippy::too_many_arguments)]
fn set_conv(
    tape: &Tape,
    params: &BTreeMap<String, Tensor>,
    prefix: &str,
    mlp_widths: &[usize],
    support_pos: &[[f64; 3]],
    support_feats: &Tensor,
    queries: &[[f64; 3]],
    idx: &[usize],
    k: usize,
    radius: f64,
) -> Result<Tensor, TensorError> {
    let n = queries.len();
    let feats = support_feats.gather(idx)?;
    let disp = displacement_rows(tape, support_pos, queries, idx, k, radius);
    let x = Tensor::concat(&[&feats, &disp], 1)?;
    let y = mlp(params, prefix, mlp_widths, &x, true)?;
    let c = *mlp_widths.last().unwrap();
    y.reshape(&[n, k, c])?.max(1)
}

/// Multi-scale grouping: per-scale set convs over the same cloud, concat,
/// plus the replicated global max-pool. Output width 2·n_scales·C_out.
fn grouped_scales(
    tape: &Tape,
    params: &BTreeMap<String, Tensor>,
    hp: &HyperParams,
    prefix: &str,
    mlp_widths: &[usize],
    pos: &[[f64; 3]],
    feats: &Tensor,
) -> Result<Tensor, TensorError> {
    let mut scales = Vec::with_capacity(hp.n_scales);
    for s in 0..hp.n_scales {
        let k = SCALE_SAMPLES[s.min(SCALE_SAMPLES.len() - 1)];
        let idx = ball_query(pos, pos, hp.radii[s], k);
        scales.push(set_conv(
            tape,
            params,
            &format!("{prefix}{s}"),
            mlp_widths,
            pos,
            feats,
            pos,
            &idx,
            k,
            hp.radii[s],
        )?);
    }
    let refs: Vec<&Tensor> = scales.iter().collect();
    let local = Tensor::concat(&refs, 1)?;
    let global = local.max(0)?; // channel-wise max over points
    let c = local.shape()[1];
    let tiled = global.reshape(&[1, c])?.gather(&vec![0; pos.len()])?;
    Tensor::concat(&[&local, &tiled], 1)
}

fn encode(
    tape: &Tape,
    params: &BTreeMap<String, Tensor>,
    hp: &HyperParams,
    w: &Widths,
    prefix: &str,
    pos: &[[f64; 3]],
    raw: &Tensor,
) -> Result<Tensor, TensorError> {
    grouped_scales(tape, params, hp, prefix, &w.encoder, pos, raw)
}

/// Softmax-weighted neighborhood aggregation of per-neighbor vectors: the
/// scalar head scores each neighbor, weights are softmaxed within each
/// neighborhood, and the weighted vectors are summed.
fn weighted_aggregate(
    tape: &Tape,
    params: &BTreeMap<String, Tensor>,
    head_prefix: &str,
    per_neighbor: &Tensor,
    n: usize,
    k: usize,
) -> Result<Tensor, TensorError> {
    let c = per_neighbor.shape()[1];
    let w_head = &params[&format!("{head_prefix}.w")];
    let b_head = &params[&format!("{head_prefix}.b")];
    let rows = per_neighbor.shape()[0];
    let scores = per_neighbor
        .matmul(w_head)?
        .add(&b_head.reshape(&[1, 1])?.gather(&vec![0; rows])?)?;
    let weights = scores.reshape(&[n, k])?.softmax(1)?.reshape(&[n * k, 1])?;
    let ones = tape.constant(&[1, c], vec![1.0; c]);
    let tiled = weights.matmul(&ones)?;
    per_neighbor.mul(&tiled)?.reshape(&[n, k, c])?.sum(Some(1))
}

/// Two-stage cost volume: point-to-patch correlation against the target,
/// then patch-to-patch aggregation over the source neighborhood.
fn cost_volume(
    tape: &Tape,
    params: &BTreeMap<String, Tensor>,
    hp: &HyperParams,
    src_pos: &[[f64; 3]],
    g_p: &Tensor,
    dst_pos: &[[f64; 3]],
    g_q: &Tensor,
) -> Result<Tensor, TensorError> {
    let n = src_pos.len();
    let k = COST_VOLUME_SAMPLES;
    let w = widths(hp);
    let disp_scale = *hp.radii.last().unwrap();

    // stage 1: each source point against k nearest target points. The
    // cross-cloud displacement is the candidate motion itself, so it is kept
    // at its natural meter scale rather than normalized by the (much larger)
    // search radius; otherwise sub-meter motion differences reach the MLP at
    // percent-level magnitude and the correlation cannot resolve them.
    let idx = knn(dst_pos, src_pos, k);
    let center = g_p.gather(&(0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect::<Vec<_>>())?;
    let neighbor = g_q.gather(&idx)?;
    let disp = displacement_rows(tape, dst_pos, src_pos, &idx, k, 1.0);
    let x = Tensor::concat(&[&center, &neighbor, &disp], 1)?;
    let per = mlp(params, "cv1", &w.cost_volume, &x, true)?;
    let cost1 = weighted_aggregate(tape, params, "cv1.head", &per, n, k)?;

    // stage 2: aggregate first-stage costs over source neighborhoods
    let idx = knn(src_pos, src_pos, k);
    let gathered = cost1.gather(&idx)?;
    let disp = displacement_rows(tape, src_pos, src_pos, &idx, k, disp_scale);
    let x = Tensor::concat(&[&gathered, &disp], 1)?;
    let per = mlp(params, "cv2", &w.cost_volume, &x, true)?;
    weighted_aggregate(tape, params, "cv2.head", &per, n, k)
}
