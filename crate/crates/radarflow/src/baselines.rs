//! Non-learned references: point-to-point ICP and rigid-only flow.
//!
//! Both treat the whole scene as static. ICP alternates nearest-neighbor
//! correspondence with a Kabsch fit, trimming correspondences whose distance
//! exceeds 3× the per-iteration median so ghost points cannot dominate the
//! fit; rigid-only flow is a single such iteration.

use thiserror::Error;

use crate::geometry::{kabsch, transform_to_flow, GeometryError};
use crate::types::{FramePair, RigidTransform, SceneFlow};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("ICP needs at least 3 points in both frames, got {0} and {1}")]
    TooFewPoints(usize, usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn sqdist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

fn nearest(q: [f64; 3], refs: &[[f64; 3]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, r) in refs.iter().enumerate() {
        let d = sqdist(q, *r);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Upper median of unsorted values.
fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

/// Iterative closest point with per-iteration 3×-median correspondence
/// trimming. Stops when the mean point shift between iterations drops below
/// `tol` or after `max_iters`; an update that would increase the mean
/// squared NN distance is rejected and terminates the loop (trimming can
/// otherwise oscillate), so the objective is non-increasing by construction.
/// Returns the fitted transform and the flow it induces on every source
/// point.
pub fn icp(
    pair: &FramePair,
    max_iters: usize,
    tol: f64,
) -> Result<(RigidTransform, SceneFlow), BaselineError> {
    let src = pair.source.positions();
    let dst = pair.target.positions();
    if src.len() < 3 || dst.len() < 3 {
        return Err(BaselineError::TooFewPoints(src.len(), dst.len()));
    }
    let mut transform = RigidTransform::identity();
    let mut moved = src.clone();
    let mut objective = icp_objective(pair, &transform);
    for it in 0..max_iters {
        let nn: Vec<usize> = moved.iter().map(|p| nearest(*p, &dst)).collect();
        let dists: Vec<f64> = moved.iter().zip(&nn).map(|(p, &j)| sqdist(*p, dst[j]).sqrt()).collect();
        let cutoff = 3.0 * median(&dists);
        let mut kept: Vec<usize> = (0..src.len()).filter(|&i| dists[i] <= cutoff).collect();
        if kept.len() < 3 {
            // a degenerate trim (e.g. zero median with few exact matches)
            // falls back to all correspondences
            kept = (0..src.len()).collect();
        }
        let s: Vec<[f64; 3]> = kept.iter().map(|&i| src[i]).collect();
        let d: Vec<[f64; 3]> = kept.iter().map(|&i| dst[nn[i]]).collect();
        let next = kabsch(&s, &d)?;
        let next_objective = icp_objective(pair, &next);
        if next_objective > objective && it > 0 {
            break;
        }
        let next_moved: Vec<[f64; 3]> = src.iter().map(|&p| next.apply(p)).collect();
        let shift = moved
            .iter()
            .zip(&next_moved)
            .map(|(a, b)| sqdist(*a, *b).sqrt())
            .sum::<f64>()
            / src.len() as f64;
        transform = next;
        objective = next_objective;
        moved = next_moved;
        if shift < tol {
            break;
        }
    }
    let flow = transform_to_flow(&transform, &pair.source);
    Ok((transform, flow))
}

/// Single-iteration ICP: one NN + Kabsch fit applied to every point.
pub fn rigid_only_flow(pair: &FramePair) -> Result<SceneFlow, BaselineError> {
    Ok(icp(pair, 1, 0.0)?.1)
}

/// Mean squared nearest-neighbor distance of the transformed source against
/// the target — the ICP objective, exposed for monotonicity checks.
pub fn icp_objective(pair: &FramePair, transform: &RigidTransform) -> f64 {
    let dst = pair.target.positions();
    let mut sum = 0.0;
    for p in &pair.source.points {
        let m = transform.apply(p.position);
        sum += sqdist(m, dst[nearest(m, &dst)]);
    }
    sum / pair.source.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::epe;
    use crate::synth::{generate_pair, SceneConfig};
    use crate::types::{RadarFrame, RadarPoint};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(positions: &[[f64; 3]]) -> RadarFrame {
        RadarFrame::new(
            positions.iter().map(|&p| RadarPoint::new(p, 0.0, 0.0, 0.0)).collect(),
            0.0,
        )
    }

    #[test]
    fn identical_frames_give_identity() {
        let pts: Vec<[f64; 3]> = (0..12)
            .map(|i| [i as f64, (i * i % 7) as f64 * 0.3, (i % 3) as f64])
            .collect();
        let pair = FramePair::new(frame(&pts), frame(&pts), 0.1);
        let (t, flow) = icp(&pair, 2, 1e-12).unwrap();
        assert!(t.orthonormality_error() < 1e-12);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((t.rotation[i][j] - expect).abs() < 1e-9);
            }
            assert!(t.translation[i].abs() < 1e-9);
        }
        assert!(flow.vectors.iter().all(|v| v.iter().all(|c| c.abs() < 1e-9)));
    }

    #[test]
    fn recovers_small_rigid_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let pts: Vec<[f64; 3]> = (0..40)
            .map(|_| {
                [
                    rng.gen_range(3.0..20.0),
                    rng.gen_range(-8.0..8.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        // small yaw (≤ 10°) plus translation
        let a = 0.12f64;
        let (s, c) = a.sin_cos();
        let gt = RigidTransform {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.4, -0.2, 0.05],
        };
        let moved: Vec<[f64; 3]> = pts.iter().map(|&p| gt.apply(p)).collect();
        let pair = FramePair::new(frame(&pts), frame(&moved), 0.1);
        let (t, _) = icp(&pair, 50, 1e-10).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((t.rotation[i][j] - gt.rotation[i][j]).abs() < 1e-6);
            }
            assert!((t.translation[i] - gt.translation[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn static_error_below_mover_error() {
        let cfg = SceneConfig {
            seed: 33,
            position_noise: 0.0,
            rrv_noise: 0.0,
            outlier_fraction: 0.0,
            ..Default::default()
        };
        let (pair, labels) = generate_pair(&cfg, 0).unwrap();
        let (_, flow) = icp(&pair, 30, 1e-9).unwrap();
        let e = epe(&flow, &labels.gt_flow).unwrap();
        let stat: Vec<f64> = e
            .iter()
            .zip(&labels.gt_moving)
            .filter(|(_, &m)| !m)
            .map(|(v, _)| *v)
            .collect();
        let mov: Vec<f64> = e
            .iter()
            .zip(&labels.gt_moving)
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&stat) < mean(&mov));
    }

    #[test]
    fn rigid_only_equals_one_icp_iteration_and_mover_epe_scale() {
        let cfg = SceneConfig { seed: 35, outlier_fraction: 0.0, ..Default::default() };
        let (pair, labels) = generate_pair(&cfg, 1).unwrap();
        let one = icp(&pair, 1, 0.0).unwrap().1;
        let rigid = rigid_only_flow(&pair).unwrap();
        assert_eq!(one.vectors, rigid.vectors);

        // mover EPE roughly matches the mover's own displacement magnitude
        let e = epe(&rigid, &labels.gt_flow).unwrap();
        for (i, &m) in labels.gt_moving.iter().enumerate() {
            if m {
                let g = labels.gt_flow.vectors[i];
                let ego = crate::geometry::transform_to_flow(&labels.gt_ego, &pair.source).vectors[i];
                let own = [g[0] - ego[0], g[1] - ego[1], g[2] - ego[2]];
                let own_norm = (own[0] * own[0] + own[1] * own[1] + own[2] * own[2]).sqrt();
                // rigid flow cannot track object motion: error is on the
                // order of the object's own displacement
                assert!(e[i] > 0.3 * own_norm, "mover {i}: epe {} vs own {own_norm}", e[i]);
            }
        }
    }

    #[test]
    fn objective_non_increasing_across_iterations() {
        for seed in 0..5u64 {
            let cfg = SceneConfig { seed: 40 + seed, ..Default::default() };
            let (pair, _) = generate_pair(&cfg, 0).unwrap();
            let mut prev = f64::INFINITY;
            for iters in 1..=8 {
                let (t, _) = icp(&pair, iters, 0.0).unwrap();
                let obj = icp_objective(&pair, &t);
                assert!(
                    obj <= prev + 1e-9,
                    "seed {seed}: objective rose from {prev} to {obj} at iteration {iters}"
                );
                prev = obj;
            }
        }
    }

    #[test]
    fn too_few_points_is_an_error() {
        let pair = FramePair::new(frame(&[[1.0, 0.0, 0.0]]), frame(&[[1.0, 0.0, 0.0]]), 0.1);
        assert!(matches!(icp(&pair, 5, 1e-9), Err(BaselineError::TooFewPoints(1, 1))));
    }
}
