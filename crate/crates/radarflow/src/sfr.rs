//! Static Flow Refinement: RRV-gated static mask, ego-motion Kabsch over
//! static correspondences, and the final flow aggregation.
//!
//! The mask follows the RRV residual recipe: warp the source by the coarse
//! flow, fit one rigid transform to every correspondence, and compare each
//! point's rigid radial shift against its measured RRV displacement. Points
//! whose relative residual is within ζ are declared static; a second rigid
//! fit over the static subset yields the refined ego-motion whose induced
//! flow overwrites the static rows of the coarse prediction.
//!
//! Mask construction is gradient-detached (it is a hard indicator); only the
//! second Kabsch fit participates in backprop via [`refine_diff`].

use thiserror::Error;

use crate::geometry::{kabsch, transform_to_flow, GeometryError};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::types::{FramePair, RigidTransform, SceneFlow, StaticMask};

/// Below this radial displacement magnitude (meters) the relative residual
/// is ill-defined and the absolute fallback threshold applies.
pub const ETA_V: f64 = 1e-3;
/// Absolute residual threshold (meters) for the near-zero-RRV fallback.
pub const ETA_ABS: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SfrError {
    #[error("flow length {flow} does not match source length {frame}")]
    LengthMismatch { flow: usize, frame: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone)]
pub struct SfrOutput {
    /// Final aggregated flow: rigid rows where static, coarse rows where
    /// moving.
    pub final_flow: SceneFlow,
    pub static_mask: StaticMask,
    /// Refined ego-motion from the static subset (identity fallback when the
    /// subset has fewer than 3 points).
    pub ego_motion: RigidTransform,
    /// Coarse ego-motion fitted over all correspondences.
    pub coarse_ego: RigidTransform,
    /// Per-point relative residuals e_i; in the near-zero-RRV fallback the
    /// stored value is |r_i|·ζ/η_abs so that "e_i ≤ ζ ⇔ static" holds
    /// uniformly.
    pub residuals: Vec<f64>,
}

fn radial_unit(p: [f64; 3]) -> [f64; 3] {
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    [p[0] / r, p[1] / r, p[2] / r]
}

/// Residuals and mask flags for a given rigid candidate transform.
fn residuals_and_flags(
    pair: &FramePair,
    rigid_flow: &SceneFlow,
    zeta: f64,
) -> (Vec<f64>, Vec<bool>) {
    let mut e = Vec::with_capacity(pair.source.len());
    let mut flags = Vec::with_capacity(pair.source.len());
    for (p, s) in pair.source.points.iter().zip(&rigid_flow.vectors) {
        let u = radial_unit(p.position);
        let radial_shift = s[0] * u[0] + s[1] * u[1] + s[2] * u[2];
        let measured = p.rrv * pair.dt;
        let r_i = radial_shift - measured;
        let e_i = if measured.abs() < ETA_V {
            r_i.abs() * zeta / ETA_ABS
        } else {
            (r_i / measured).abs()
        };
        e.push(e_i);
        flags.push(e_i <= zeta);
    }
    (e, flags)
}

/// Derives the static mask from RRV residuals against a single rigid fit of
/// all coarse correspondences. Returns the mask, that coarse ego fit, and
/// the per-point relative residuals.
pub fn static_mask(
    pair: &FramePair,
    coarse: &SceneFlow,
    zeta: f64,
) -> Result<(StaticMask, RigidTransform, Vec<f64>), SfrError> {
    let n = pair.source.len();
    if coarse.len() != n {
        return Err(SfrError::LengthMismatch { flow: coarse.len(), frame: n });
    }
    let src = pair.source.positions();
    let warped: Vec<[f64; 3]> = src
        .iter()
        .zip(&coarse.vectors)
        .map(|(x, s)| [x[0] + s[0], x[1] + s[1], x[2] + s[2]])
        .collect();
    let t_cr = kabsch(&src, &warped)?;
    let rigid = transform_to_flow(&t_cr, &pair.source);
    let (e, flags) = residuals_and_flags(pair, &rigid, zeta);
    Ok((StaticMask::new(flags), t_cr, e))
}

/// Refitting and aggregation (plain, non-differentiable path). The coarse
/// ego fit and residuals are recomputed internally with ζ = `zeta` so the
/// output is self-contained.
pub fn refine(
    pair: &FramePair,
    coarse: &SceneFlow,
    mask: &StaticMask,
    zeta: f64,
) -> Result<SfrOutput, SfrError> {
    let n = pair.source.len();
    if coarse.len() != n || mask.len() != n {
        return Err(SfrError::LengthMismatch { flow: coarse.len().min(mask.len()), frame: n });
    }
    let src = pair.source.positions();
    let warped_all: Vec<[f64; 3]> = src
        .iter()
        .zip(&coarse.vectors)
        .map(|(x, s)| [x[0] + s[0], x[1] + s[1], x[2] + s[2]])
        .collect();
    let coarse_ego = kabsch(&src, &warped_all)?;

    let static_idx: Vec<usize> = (0..n).filter(|&i| mask.flags[i]).collect();
    let ego_motion = if static_idx.len() >= 3 {
        let s: Vec<[f64; 3]> = static_idx.iter().map(|&i| src[i]).collect();
        let d: Vec<[f64; 3]> = static_idx.iter().map(|&i| warped_all[i]).collect();
        kabsch(&s, &d)?
    } else {
        // refinement must not fabricate ego-motion from < 3 supports
        RigidTransform::identity()
    };
    let rigid = transform_to_flow(&ego_motion, &pair.source);
    let final_flow = SceneFlow::new(
        (0..n)
            .map(|i| if mask.flags[i] && static_idx.len() >= 3 { rigid.vectors[i] } else { coarse.vectors[i] })
            .collect(),
    );
    let (residuals, _) = residuals_and_flags(pair, &transform_to_flow(&coarse_ego, &pair.source), zeta);
    Ok(SfrOutput {
        final_flow,
        static_mask: mask.clone(),
        ego_motion,
        coarse_ego,
        residuals,
    })
}

/// One-shot plain SFR: mask + refine.
pub fn run(pair: &FramePair, coarse: &SceneFlow, zeta: f64) -> Result<SfrOutput, SfrError> {
    let (mask, _, _) = static_mask(pair, coarse, zeta)?;
    refine(pair, coarse, &mask, zeta)
}

/// Differentiable refinement for training: the static rows of the coarse
/// flow tensor feed a differentiable Kabsch fit, whose induced rigid flow
/// replaces those rows in the output. Returns the final flow (N, 3) and the
/// ego transform as a (3, 4) tensor.
pub fn refine_diff(
    tape: &Tape,
    pair: &FramePair,
    coarse: &Tensor,
    mask: &StaticMask,
) -> Result<(Tensor, Tensor), SfrError> {
    let n = pair.source.len();
    if coarse.shape() != [n, 3] || mask.len() != n {
        return Err(SfrError::LengthMismatch { flow: coarse.shape()[0], frame: n });
    }
    let src = pair.source.positions();
    let static_idx: Vec<usize> = (0..n).filter(|&i| mask.flags[i]).collect();
    if static_idx.len() < 3 {
        let ego = tape.constant(&[3, 4], RigidTransform::identity().to_row_major().to_vec());
        return Ok((coarse.gather(&(0..n).collect::<Vec<_>>())?, ego));
    }
    let src_static: Vec<[f64; 3]> = static_idx.iter().map(|&i| src[i]).collect();
    let src_static_flat: Vec<f64> = src_static.iter().flatten().copied().collect();
    let warped_static = coarse
        .gather(&static_idx)?
        .add(&tape.constant(&[static_idx.len(), 3], src_static_flat))?;
    let ego = Tensor::kabsch_fit(&src_static, &warped_static)?;

    // rigid flow for every source point: X Rᵀ + t − X, extracting Rᵀ and t
    // from the transposed [R | t]
    let ego_t = ego.transpose()?;
    let r_t = ego_t.gather(&[0, 1, 2])?;
    let t_row = ego_t.gather(&[3])?;
    let src_flat: Vec<f64> = src.iter().flatten().copied().collect();
    let x = tape.constant(&[n, 3], src_flat);
    let rigid = x.matmul(&r_t)?.add(&t_row.gather(&vec![0; n])?)?.sub(&x)?;

    // Eq. (2) selection via constant 0/1 masks
    let m: Vec<f64> = (0..n).flat_map(|i| [mask.flags[i] as u8 as f64; 3]).collect();
    let inv: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
    let m = tape.constant(&[n, 3], m);
    let inv = tape.constant(&[n, 3], inv);
    let final_flow = rigid.mul(&m)?.add(&coarse.mul(&inv)?)?;
    Ok((final_flow, ego))
}

/// Splits point indices into (static, moving) sets by the mask.
pub fn motion_segmentation(mask: &StaticMask) -> (Vec<usize>, Vec<usize>) {
    let mut stat = Vec::new();
    let mut mov = Vec::new();
    for (i, &s) in mask.flags.iter().enumerate() {
        if s {
            stat.push(i);
        } else {
            mov.push(i);
        }
    }
    (stat, mov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_pair, SceneConfig};
    use crate::types::{RadarFrame, RadarPoint};

    fn clean_cfg(seed: u64) -> SceneConfig {
        SceneConfig {
            seed,
            n_static: 60,
            n_movers: 2,
            position_noise: 0.0,
            rrv_noise: 0.0,
            outlier_fraction: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn all_static_exact_coarse_gives_all_static_mask_and_zero_residuals() {
        let mut cfg = clean_cfg(3);
        cfg.n_movers = 0;
        let (pair, labels) = generate_pair(&cfg, 0).unwrap();
        let (mask, t_cr, e) = static_mask(&pair, &labels.gt_flow, 0.15).unwrap();
        assert!(mask.flags.iter().all(|&f| f));
        assert!(e.iter().all(|&v| v < 1e-9));
        for i in 0..3 {
            for j in 0..3 {
                assert!((t_cr.rotation[i][j] - labels.gt_ego.rotation[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mask_isolates_mover_with_stationary_ego() {
        // stationary ego: static points have v_r = 0, exercising the
        // absolute-residual fallback branch
        let mut cfg = clean_cfg(5);
        cfg.ego_speed = (0.0, 0.0);
        cfg.ego_yaw_rate = (0.0, 0.0);
        cfg.n_static = 120;
        cfg.n_movers = 1;
        cfg.points_per_mover = 6;
        let (pair, labels) = generate_pair(&cfg, 1).unwrap();
        let (mask, _, _) = static_mask(&pair, &labels.gt_flow, 0.15).unwrap();
        for (i, &moving) in labels.gt_moving.iter().enumerate() {
            assert_eq!(mask.flags[i], !moving, "point {i}");
        }
    }

    #[test]
    fn threshold_is_inclusive_at_zeta() {
        // one point engineered so e_i = ζ exactly: rigid radial shift 0.115,
        // measured 0.1 → e = 0.15
        let src = vec![
            RadarPoint::new([10.0, 0.0, 0.0], 1.0, 0.0, 0.0),
            RadarPoint::new([0.0, 10.0, 0.0], 0.0, 0.0, 0.0),
            RadarPoint::new([0.0, 0.0, 10.0], 0.0, 0.0, 0.0),
            RadarPoint::new([5.0, 5.0, 0.0], 0.0, 0.0, 0.0),
        ];
        let pair = FramePair::new(
            RadarFrame::new(src, 0.0),
            RadarFrame::new(vec![RadarPoint::new([1.0, 0.0, 0.0], 0.0, 0.0, 0.0)], 0.1),
            0.1,
        );
        // coarse flow = pure translation (0.115, 0, 0): an exact rigid fit
        let coarse = SceneFlow::new(vec![[0.115, 0.0, 0.0]; 4]);
        let (_, _, e) = static_mask(&pair, &coarse, 0.15).unwrap();
        assert!((e[0] - 0.15).abs() < 1e-9, "e[0] = {}", e[0]);
        // re-run with ζ set to the bit-exact residual: the inclusive rule
        // "e_i ≤ ζ" must classify the boundary point as static
        let (mask, _, _) = static_mask(&pair, &coarse, e[0]).unwrap();
        assert!(mask.flags[0], "e_i = ζ exactly must classify as static");
    }

    #[test]
    fn refine_matches_eq2_rowwise_and_recovers_ego() {
        let (pair, labels) = generate_pair(&clean_cfg(9), 0).unwrap();
        // ground-truth mask: Algorithm 1 cannot see tangential movers, but
        // refine's contract is conditional on whatever mask it is handed
        let mask = StaticMask::new(labels.gt_moving.iter().map(|&m| !m).collect());
        let out = refine(&pair, &labels.gt_flow, &mask, 0.15).unwrap();
        let rigid = transform_to_flow(&out.ego_motion, &pair.source);
        for i in 0..pair.source.len() {
            let expect = if mask.flags[i] { rigid.vectors[i] } else { labels.gt_flow.vectors[i] };
            assert_eq!(out.final_flow.vectors[i], expect);
        }
        // gt coarse flow on a clean scene → refined ego equals recorded ego
        for i in 0..3 {
            for j in 0..3 {
                assert!((out.ego_motion.rotation[i][j] - labels.gt_ego.rotation[i][j]).abs() < 1e-9);
            }
            assert!((out.ego_motion.translation[i] - labels.gt_ego.translation[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn all_moving_mask_falls_back_to_identity_and_coarse() {
        let (pair, labels) = generate_pair(&clean_cfg(11), 0).unwrap();
        let mask = StaticMask::new(vec![false; pair.source.len()]);
        let out = refine(&pair, &labels.gt_flow, &mask, 0.15).unwrap();
        assert_eq!(out.final_flow.vectors, labels.gt_flow.vectors);
        assert_eq!(out.ego_motion, RigidTransform::identity());
    }

    #[test]
    fn diff_refine_matches_plain_refine() {
        let (pair, labels) = generate_pair(&clean_cfg(13), 2).unwrap();
        let (mask, _, _) = static_mask(&pair, &labels.gt_flow, 0.15).unwrap();
        let plain = refine(&pair, &labels.gt_flow, &mask, 0.15).unwrap();

        let tape = Tape::new();
        let flat: Vec<f64> = labels.gt_flow.vectors.iter().flatten().copied().collect();
        let coarse = tape.leaf(&[pair.source.len(), 3], flat, true);
        let (final_t, ego_t) = refine_diff(&tape, &pair, &coarse, &mask).unwrap();
        let ft = final_t.to_vec();
        for (i, v) in plain.final_flow.vectors.iter().enumerate() {
            for k in 0..3 {
                assert!((ft[i * 3 + k] - v[k]).abs() < 1e-9);
            }
        }
        let ego = ego_t.to_vec();
        let expect = plain.ego_motion.to_row_major();
        for (a, b) in ego.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn diff_refine_gradients_match_finite_differences() {
        let (pair, labels) = generate_pair(
            &SceneConfig {
                seed: 17,
                n_static: 10,
                n_movers: 1,
                points_per_mover: 3,
                position_noise: 0.0,
                rrv_noise: 0.0,
                outlier_fraction: 0.0,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let n = pair.source.len();
        let (mask, _, _) = static_mask(&pair, &labels.gt_flow, 0.15).unwrap();
        assert!(mask.static_count() >= 3);
        let flat: Vec<f64> = labels.gt_flow.vectors.iter().flatten().copied().collect();
        let pair2 = pair.clone();
        let mask2 = mask.clone();
        let err = crate::tensor::check::finite_diff(
            &[flat],
            &[vec![n, 3]],
            move |tape, l| {
                let (f, _) = refine_diff(tape, &pair2, &l[0], &mask2).unwrap();
                f.squared_norm(1).unwrap().sum(None).unwrap()
            },
            1e-6,
        );
        assert!(err < 1e-5, "refine_diff fd mismatch: {err}");
    }

    #[test]
    fn scale_consistency_of_residuals() {
        // scaling Δt up and RRV down by the same factor leaves e_i unchanged
        let (pair, labels) = generate_pair(&clean_cfg(19), 0).unwrap();
        let (_, _, e1) = static_mask(&pair, &labels.gt_flow, 0.15).unwrap();
        let mut scaled = pair.clone();
        scaled.dt *= 4.0;
        scaled.target.timestamp = scaled.dt;
        for p in scaled.source.points.iter_mut() {
            p.rrv /= 4.0;
        }
        let (_, _, e2) = static_mask(&scaled, &labels.gt_flow, 0.15).unwrap();
        for (a, b) in e1.iter().zip(&e2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn segmentation_split_is_complement() {
        let mask = StaticMask::new(vec![true, false, true]);
        let (s, m) = motion_segmentation(&mask);
        assert_eq!(s, vec![0, 2]);
        assert_eq!(m, vec![1]);
        let all = StaticMask::new(vec![true; 4]);
        assert!(motion_segmentation(&all).1.is_empty());
    }
}
