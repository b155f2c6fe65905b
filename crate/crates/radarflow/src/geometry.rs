//! Non-learned geometric kernels: rigid Kabsch fit, transform/flow
//! conversions, spherical coordinate math and per-point sensor resolution.

use nalgebra::Matrix3;
use thiserror::Error;

use crate::types::{RadarFrame, RigidTransform, SceneFlow};

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("rigid fit needs at least 3 point pairs, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate point configuration (cross-covariance rank < 2)")]
    DegenerateConfiguration,
    #[error("lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("point at the sensor origin")]
    OriginPoint,
}

/// Spherical measurement resolution of a sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalResolution {
    /// Range resolution, meters.
    pub d_range: f64,
    /// Azimuth resolution, radians.
    pub d_azimuth: f64,
    /// Elevation resolution, radians.
    pub d_elevation: f64,
}

impl SphericalResolution {
    pub fn new(d_range: f64, d_azimuth: f64, d_elevation: f64) -> Self {
        assert!(d_range > 0.0 && d_azimuth > 0.0 && d_elevation > 0.0);
        Self { d_range, d_azimuth, d_elevation }
    }
}

fn centroid(pts: &[[f64; 3]]) -> [f64; 3] {
    let n = pts.len() as f64;
    let mut c = [0.0; 3];
    for p in pts {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    for k in 0..3 {
        c[k] /= n;
    }
    c
}

/// Least-squares rigid alignment of paired point sets.
///
/// Centers both sets on their centroids, solves the rotation from an SVD of
/// the cross-covariance with reflection correction, then recovers the
/// translation from the centroids.
pub fn kabsch(src: &[[f64; 3]], dst: &[[f64; 3]]) -> Result<RigidTransform, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::LengthMismatch(src.len(), dst.len()));
    }
    if src.len() < 3 {
        return Err(GeometryError::TooFewPoints(src.len()));
    }
    let mu_s = centroid(src);
    let mu_d = centroid(dst);

    // cross-covariance H = sum_i (src_i - mu_s)(dst_i - mu_d)^T
    let mut h = Matrix3::<f64>::zeros();
    for (s, d) in src.iter().zip(dst.iter()) {
        for a in 0..3 {
            for b in 0..3 {
                h[(a, b)] += (s[a] - mu_s[a]) * (d[b] - mu_d[b]);
            }
        }
    }

    let svd = h.svd(true, true);
    let u = svd.u.ok_or(GeometryError::DegenerateConfiguration)?;
    let v_t = svd.v_t.ok_or(GeometryError::DegenerateConfiguration)?;
    let sigma = svd.singular_values;
    // rank < 2 leaves the in-plane rotation unconstrained
    if sigma[1] <= 1e-12 * sigma[0].max(1e-300) {
        return Err(GeometryError::DegenerateConfiguration);
    }

    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant();
    let mut correction = Matrix3::identity();
    if d < 0.0 {
        correction[(2, 2)] = -1.0;
    }
    let r = v * correction * u.transpose();

    let mut rotation = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rotation[i][j] = r[(i, j)];
        }
    }
    let mut translation = [0.0; 3];
    for i in 0..3 {
        translation[i] =
            mu_d[i] - (rotation[i][0] * mu_s[0] + rotation[i][1] * mu_s[1] + rotation[i][2] * mu_s[2]);
    }
    Ok(RigidTransform { rotation, translation })
}

/// Per-point flow induced by a rigid transform: R x + t - x.
pub fn transform_to_flow(t: &RigidTransform, frame: &RadarFrame) -> SceneFlow {
    let vectors = frame
        .points
        .iter()
        .map(|p| {
            let q = t.apply(p.position);
            [q[0] - p.position[0], q[1] - p.position[1], q[2] - p.position[2]]
        })
        .collect();
    SceneFlow::new(vectors)
}

/// Shifts positions by the flow; the per-point features are copied unchanged.
pub fn warp(frame: &RadarFrame, flow: &SceneFlow) -> Result<RadarFrame, GeometryError> {
    if frame.len() != flow.len() {
        return Err(GeometryError::LengthMismatch(frame.len(), flow.len()));
    }
    let points = frame
        .points
        .iter()
        .zip(flow.vectors.iter())
        .map(|(p, s)| {
            let mut q = *p;
            for k in 0..3 {
                q.position[k] += s[k];
            }
            q
        })
        .collect();
    Ok(RadarFrame::new(points, frame.timestamp))
}

/// Cartesian to spherical: (range, azimuth, elevation) with
/// azimuth = atan2(y, x) and elevation = asin(z / r).
pub fn cartesian_to_spherical(p: [f64; 3]) -> Result<(f64, f64, f64), GeometryError> {
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    if r == 0.0 {
        return Err(GeometryError::OriginPoint);
    }
    Ok((r, p[1].atan2(p[0]), (p[2] / r).asin()))
}

pub fn spherical_to_cartesian(r: f64, theta: f64, phi: f64) -> [f64; 3] {
    [r * phi.cos() * theta.cos(), r * phi.cos() * theta.sin(), r * phi.sin()]
}

/// Per-point Cartesian resolution.
///
/// Each Cartesian axis gets the sum over (r, theta, phi) of the absolute
/// partial derivative of the spherical-to-Cartesian map times the
/// corresponding spherical resolution; the three axis values combine in
/// quadrature.
pub fn point_resolution(p: [f64; 3], res: &SphericalResolution) -> Result<f64, GeometryError> {
    let (r, theta, phi) = cartesian_to_spherical(p)?;
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    let (dr, dth, dph) = (res.d_range, res.d_azimuth, res.d_elevation);

    let dx = (cp * ct).abs() * dr + (r * cp * st).abs() * dth + (r * sp * ct).abs() * dph;
    let dy = (cp * st).abs() * dr + (r * cp * ct).abs() * dth + (r * sp * st).abs() * dph;
    let dz = sp.abs() * dr + (r * cp).abs() * dph;

    Ok((dx * dx + dy * dy + dz * dz).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::RadarPoint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
        // compose yaw/pitch/roll with angles in (-pi, pi)
        let (a, b, c): (f64, f64, f64) =
            (rng.gen_range(-3.0..3.0), rng.gen_range(-1.5..1.5), rng.gen_range(-3.0..3.0));
        let rz = Matrix3::new(a.cos(), -a.sin(), 0.0, a.sin(), a.cos(), 0.0, 0.0, 0.0, 1.0);
        let ry = Matrix3::new(b.cos(), 0.0, b.sin(), 0.0, 1.0, 0.0, -b.sin(), 0.0, b.cos());
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, c.cos(), -c.sin(), 0.0, c.sin(), c.cos());
        let r = rz * ry * rx;
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = r[(i, j)];
            }
        }
        out
    }

    #[test]
    fn kabsch_identity_on_equal_sets() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let t = kabsch(&pts, &pts).unwrap();
        t.assert_valid();
        assert!(t.orthonormality_error() < 1e-12);
        for (i, row) in t.rotation.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-12);
            }
        }
        assert!(t.translation.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn kabsch_pure_translation() {
        let src = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.5, 0.5, 1.0]];
        let dst: Vec<[f64; 3]> = src.iter().map(|p| [p[0] + 1.0, p[1] + 2.0, p[2] + 3.0]).collect();
        let t = kabsch(&src, &dst).unwrap();
        for (i, expect) in [1.0, 2.0, 3.0].iter().enumerate() {
            assert!((t.translation[i] - expect).abs() < 1e-12);
        }
        for (s, d) in src.iter().zip(dst.iter()) {
            let q = t.apply(*s);
            for k in 0..3 {
                assert!((q[k] - d[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kabsch_recovers_constructed_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let rot = random_rotation(&mut rng);
            let t0 = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let gt = RigidTransform { rotation: rot, translation: t0 };
            let src: Vec<[f64; 3]> = (0..10)
                .map(|_| {
                    [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)]
                })
                .collect();
            let dst: Vec<[f64; 3]> = src.iter().map(|p| gt.apply(*p)).collect();
            let rec = kabsch(&src, &dst).unwrap();
            rec.assert_valid();
            for i in 0..3 {
                assert!((rec.translation[i] - t0[i]).abs() < 1e-9);
                for j in 0..3 {
                    assert!((rec.rotation[i][j] - rot[i][j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn kabsch_errors() {
        let two = vec![[0.0; 3], [1.0, 0.0, 0.0]];
        assert_eq!(kabsch(&two, &two).unwrap_err(), GeometryError::TooFewPoints(2));
        // collinear -> rank 1
        let line: Vec<[f64; 3]> = (0..5).map(|i| [i as f64, 0.0, 0.0]).collect();
        let shifted: Vec<[f64; 3]> = line.iter().map(|p| [p[0] + 1.0, 1.0, 0.0]).collect();
        assert_eq!(kabsch(&line, &shifted).unwrap_err(), GeometryError::DegenerateConfiguration);
    }

    #[test]
    fn kabsch_reflection_branch() {
        // mirrored cluster forces det(VU^T) < 0 before correction
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src: Vec<[f64; 3]> = (0..12)
            .map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
            .collect();
        let dst: Vec<[f64; 3]> = src.iter().map(|p| [p[0], p[1], -p[2]]).collect();
        let t = kabsch(&src, &dst).unwrap();
        t.assert_valid();
        assert!((t.det() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn transform_to_flow_cases() {
        let frame = RadarFrame::new(vec![RadarPoint::new([1.0, 0.0, 0.0], 0.0, 0.0, 0.0)], 0.0);
        let id = RigidTransform::identity();
        assert_eq!(transform_to_flow(&id, &frame).vectors[0], [0.0, 0.0, 0.0]);

        let mut tr = RigidTransform::identity();
        tr.translation = [0.5, -1.0, 2.0];
        assert_eq!(transform_to_flow(&tr, &frame).vectors[0], [0.5, -1.0, 2.0]);

        // 90 degree yaw about the origin on (1, 0, 0) -> flow (-1, 1, 0)
        let yaw = RigidTransform {
            rotation: [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        };
        let f = transform_to_flow(&yaw, &frame).vectors[0];
        assert!((f[0] + 1.0).abs() < 1e-15 && (f[1] - 1.0).abs() < 1e-15 && f[2].abs() < 1e-15);
    }

    #[test]
    fn warp_shifts_positions_only() {
        let frame = RadarFrame::new(vec![RadarPoint::new([1.0, 1.0, 1.0], 2.5, -3.0, -60.0)], 0.0);
        let w = warp(&frame, &SceneFlow::new(vec![[0.5, 0.0, 0.0]])).unwrap();
        assert_eq!(w.points[0].position, [1.5, 1.0, 1.0]);
        assert_eq!(w.points[0].rrv, 2.5);
        assert_eq!(w.points[0].rcs, -3.0);

        let same = warp(&frame, &SceneFlow::zeros(1)).unwrap();
        assert_eq!(same, frame);
        assert!(warp(&frame, &SceneFlow::zeros(2)).is_err());
    }

    #[test]
    fn spherical_roundtrip() {
        assert_eq!(cartesian_to_spherical([1.0, 0.0, 0.0]).unwrap(), (1.0, 0.0, 0.0));
        let (r, _, phi) = cartesian_to_spherical([0.0, 0.0, 1.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-15 && (phi - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert_eq!(cartesian_to_spherical([0.0; 3]).unwrap_err(), GeometryError::OriginPoint);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let p = [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)];
            let (r, th, ph) = cartesian_to_spherical(p).unwrap();
            let q = spherical_to_cartesian(r, th, ph);
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() < 1e-12 * r.max(1.0));
            }
        }
    }

    #[test]
    fn resolution_linear_in_deltas_and_monotone_in_range() {
        let res = SphericalResolution::new(0.2, 1.6f64.to_radians(), 1.0f64.to_radians());
        let res2 = SphericalResolution::new(0.4, 3.2f64.to_radians(), 2.0f64.to_radians());
        let p = [30.0, 5.0, 2.0];
        let a = point_resolution(p, &res).unwrap();
        let b = point_resolution(p, &res2).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12 * b);
        // realistic-scale range point: combined resolution exceeds range resolution
        assert!(a > 0.2);
        // strictly increasing in range along a fixed direction
        let mut prev = 0.0;
        for r in [5.0, 10.0, 20.0, 40.0, 75.0] {
            let v = point_resolution([r * 0.8, r * 0.5, r * 0.1], &res).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn resolution_matches_finite_differences() {
        let res = SphericalResolution::new(0.2, 1.6f64.to_radians(), 1.0f64.to_radians());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-6;
        for _ in 0..100 {
            let p = [rng.gen_range(1.0..60.0), rng.gen_range(-30.0..30.0), rng.gen_range(-8.0..8.0)];
            let (r, th, ph) = cartesian_to_spherical(p).unwrap();
            let fd = |f: &dyn Fn(f64, f64, f64) -> f64| -> [f64; 3] {
                [
                    (f(r + h, th, ph) - f(r - h, th, ph)) / (2.0 * h),
                    (f(r, th + h, ph) - f(r, th - h, ph)) / (2.0 * h),
                    (f(r, th, ph + h) - f(r, th, ph - h)) / (2.0 * h),
                ]
            };
            let gx = fd(&|r, t, p| spherical_to_cartesian(r, t, p)[0]);
            let gy = fd(&|r, t, p| spherical_to_cartesian(r, t, p)[1]);
            let gz = fd(&|r, t, p| spherical_to_cartesian(r, t, p)[2]);
            let deltas = [res.d_range, res.d_azimuth, res.d_elevation];
            let dx: f64 = gx.iter().zip(deltas).map(|(g, d)| g.abs() * d).sum();
            let dy: f64 = gy.iter().zip(deltas).map(|(g, d)| g.abs() * d).sum();
            let dz: f64 = gz.iter().zip(deltas).map(|(g, d)| g.abs() * d).sum();
            let expect = (dx * dx + dy * dy + dz * dz).sqrt();
            let got = point_resolution(p, &res).unwrap();
            assert!((got - expect).abs() / expect < 1e-6);
        }
    }
}
