//! Minimal and least-squares pose solvers.
//!
//! Internally poses are scene-to-camera (`x = R·m + t`); the public API uses
//! the camera-to-scene [`CameraPose`].

use nalgebra::{DMatrix, Matrix3, Matrix6, Rotation3, Vector2, Vector3, Vector6};

use super::{Correspondence, PoseError};
use crate::scene::{CameraIntrinsics, CameraPose};

/// Reprojection residual assigned to points behind the camera, pixels.
pub const BEHIND_CAMERA_PX: f64 = 1e4;
/// A minimal solution is rejected when any of its points reprojects worse.
pub const MINIMAL_MAX_RESIDUAL_PX: f64 = 10.0;
const COLLINEAR_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Extrinsics {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl Extrinsics {
    pub fn from_pose(pose: &CameraPose) -> Self {
        let inv = pose.inverse();
        Self {
            r: inv.rotation,
            t: inv.translation,
        }
    }

    pub fn to_pose(self) -> CameraPose {
        CameraPose {
            rotation: self.r,
            translation: self.t,
        }
        .inverse()
    }

    pub fn camera_point(&self, m: &Vector3<f64>) -> Vector3<f64> {
        self.r * m + self.t
    }

    /// Reprojection error in pixels; [`BEHIND_CAMERA_PX`] behind the camera.
    pub fn residual(&self, c: &Correspondence, k: &CameraIntrinsics) -> f64 {
        let x = self.camera_point(&c.scene_point);
        if x.z <= 0.0 {
            return BEHIND_CAMERA_PX;
        }
        (k.project(&x) - c.pixel).norm()
    }
}

/// Squared-reprojection cost of `pose` over `corr`.
pub fn reprojection_cost(pose: &CameraPose, corr: &[Correspondence], k: &CameraIntrinsics) -> f64 {
    let e = Extrinsics::from_pose(pose);
    corr.iter().map(|c| e.residual(c, k).powi(2)).sum()
}

/// Reprojection error of every correspondence, pixels.
pub fn reprojection_errors(pose: &CameraPose, corr: &[Correspondence], k: &CameraIntrinsics) -> Vec<f64> {
    let e = Extrinsics::from_pose(pose);
    corr.iter().map(|c| e.residual(c, k)).collect()
}

/// Polynomials as coefficient vectors, lowest degree first.
fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    (0..a.len().max(b.len()))
        .map(|i| a.get(i).unwrap_or(&0.0) + b.get(i).unwrap_or(&0.0))
        .collect()
}

fn poly_scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

fn poly_eval(a: &[f64], x: f64) -> f64 {
    a.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Real roots from the companion-matrix eigenvalues, Newton-polished.
pub(crate) fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut c: Vec<f64> = coeffs.iter().map(|v| v / scale).collect();
    while c.len() > 1 && c.last().unwrap().abs() < 1e-12 {
        c.pop();
    }
    let n = c.len() - 1;
    if n == 0 {
        return Vec::new();
    }
    let lead = c[n];
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(0, i)] = -c[n - 1 - i] / lead;
        if i + 1 < n {
            m[(i + 1, i)] = 1.0;
        }
    }
    let deriv: Vec<f64> = (1..=n).map(|i| c[i] * i as f64).collect();
    m.complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..3 {
                let d = poly_eval(&deriv, x);
                if d != 0.0 {
                    x -= poly_eval(&c, x) / d;
                }
            }
            x
        })
        .collect()
}

/// Rotation and translation with `x_i ≈ R·p_i + t` in least squares.
pub(crate) fn kabsch(p: &[Vector3<f64>], x: &[Vector3<f64>]) -> Extrinsics {
    let n = p.len() as f64;
    let pc = p.iter().sum::<Vector3<f64>>() / n;
    let xc = x.iter().sum::<Vector3<f64>>() / n;
    let h = p
        .iter()
        .zip(x)
        .fold(Matrix3::zeros(), |h, (a, b)| h + (a - pc) * (b - xc).transpose());
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    Extrinsics { r, t: xc - r * pc }
}

/// All solutions of the three-point problem (up to four).
///
/// Distances `s_i` along the unit bearings satisfy the law of cosines for each
/// pair of points. Substituting `s2 = u·s1`, `s3 = v·s1` and eliminating `u`
/// leaves a quartic in `v`.
pub(crate) fn p3p(bearings: &[Vector3<f64>; 3], points: &[Vector3<f64>; 3]) -> Vec<Extrinsics> {
    let a2 = (points[1] - points[2]).norm_squared();
    let b2 = (points[0] - points[2]).norm_squared();
    let c2 = (points[0] - points[1]).norm_squared();
    let cos_a = bearings[1].dot(&bearings[2]);
    let cos_b = bearings[0].dot(&bearings[2]);
    let cos_g = bearings[0].dot(&bearings[1]);
    if b2 <= 0.0 {
        return Vec::new();
    }
    let k = [1.0, -2.0 * cos_b, 1.0];
    let n = [b2 + a2 - c2, -2.0 * (a2 - c2) * cos_b, a2 - c2 - b2];
    let d = [2.0 * b2 * cos_g, -2.0 * b2 * cos_a];
    // b²N² − 2b²cosγ·N·D + (b² − c²K)·D²
    let quartic = poly_add(
        &poly_add(
            &poly_scale(&poly_mul(&n, &n), b2),
            &poly_scale(&poly_mul(&n, &d), -2.0 * b2 * cos_g),
        ),
        &poly_mul(&poly_add(&[b2], &poly_scale(&k, -c2)), &poly_mul(&d, &d)),
    );
    let mut out = Vec::new();
    for v in real_roots(&quartic) {
        let dv = poly_eval(&d, v);
        let kv = poly_eval(&k, v);
        if v <= 0.0 || dv.abs() < 1e-12 || kv <= 0.0 {
            continue;
        }
        let u = poly_eval(&n, v) / dv;
        if u <= 0.0 {
            continue;
        }
        let s1 = (b2 / kv).sqrt();
        let x = [bearings[0] * s1, bearings[1] * (u * s1), bearings[2] * (v * s1)];
        out.push(kabsch(points, &x));
    }
    out
}

/// True when the points span less than a plane's worth of directions.
pub fn nearly_collinear(points: &[Vector3<f64>]) -> bool {
    if points.len() < 3 {
        return true;
    }
    let c = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let cov = points
        .iter()
        .fold(Matrix3::zeros(), |m, p| m + (p - c) * (p - c).transpose());
    let mut s: Vec<f64> = cov.symmetric_eigenvalues().iter().map(|v| v.max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s[0] == 0.0 || s[1] / s[0] < COLLINEAR_TOL
}

/// Nearest rotation; keeps rounding from accumulating over many updates.
fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    svd.u.unwrap() * svd.v_t.unwrap()
}

const RELATIVE_STALL: f64 = 1e-12;

/// Levenberg-Marquardt on the squared reprojection error.
///
/// Rotation updates are axis-angle increments applied on the left of the
/// current estimate. A step is only taken if it lowers the cost, so the
/// returned cost never exceeds the initial one.
pub fn refine_pose(
    pose: &CameraPose,
    corr: &[Correspondence],
    k: &CameraIntrinsics,
    iterations: usize,
) -> (CameraPose, f64) {
    let mut e = Extrinsics::from_pose(pose);
    let cost = |e: &Extrinsics| -> f64 { corr.iter().map(|c| e.residual(c, k).powi(2)).sum() };
    let mut current = cost(&e);
    let mut lambda = 1e-3;
    for _ in 0..iterations {
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        for c in corr {
            let x = e.camera_point(&c.scene_point);
            if x.z <= 0.0 {
                continue;
            }
            let r: Vector2<f64> = k.project(&x) - c.pixel;
            let iz = 1.0 / x.z;
            let dp = nalgebra::Matrix2x3::new(
                k.focal_x * iz,
                0.0,
                -k.focal_x * x.x * iz * iz,
                0.0,
                k.focal_y * iz,
                -k.focal_y * x.y * iz * iz,
            );
            // dx/dω = −[x]×, dx/dδ = I
            let mut dx = nalgebra::Matrix3x6::zeros();
            dx.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-x.cross_matrix()));
            dx.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            let j = dp * dx;
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        if jtr.norm() < 1e-12 {
            break;
        }
        let mut improved = false;
        for _ in 0..8 {
            let mut a = jtj;
            for i in 0..6 {
                a[(i, i)] += lambda * (1.0 + jtj[(i, i)]);
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let dr = Rotation3::new(step.fixed_rows::<3>(0).into_owned()).into_inner();
            let cand = Extrinsics {
                r: orthonormalize(&(dr * e.r)),
                t: dr * e.t + step.fixed_rows::<3>(3),
            };
            let c = cost(&cand);
            if c < current {
                e = cand;
                // negligible progress counts as convergence
                improved = current - c > RELATIVE_STALL * current;
                current = c;
                lambda = (lambda * 0.3).max(1e-9);
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (e.to_pose(), current)
}

/// Pose from four correspondences: P3P on each point triple, the candidate
/// with the lowest reprojection cost on all four, then least-squares refinement.
pub fn solve_p4p(corr: &[Correspondence; 4], k: &CameraIntrinsics) -> Result<CameraPose, PoseError> {
    let points: Vec<Vector3<f64>> = corr.iter().map(|c| c.scene_point).collect();
    if nearly_collinear(&points) {
        return Err(PoseError::Degenerate("scene points are collinear".into()));
    }
    let bearings: Vec<Vector3<f64>> = corr.iter().map(|c| k.ray(&c.pixel).normalize()).collect();
    let mut best: Option<(Extrinsics, f64)> = None;
    for skip in (0..4).rev() {
        let idx: Vec<usize> = (0..4).filter(|i| *i != skip).collect();
        let tri = [points[idx[0]], points[idx[1]], points[idx[2]]];
        if nearly_collinear(&tri) {
            continue;
        }
        let b = [bearings[idx[0]], bearings[idx[1]], bearings[idx[2]]];
        for e in p3p(&b, &tri) {
            let c: f64 = corr.iter().map(|c| e.residual(c, k).powi(2)).sum();
            if c.is_finite() && best.is_none_or(|(_, bc)| c < bc) {
                best = Some((e, c));
            }
        }
    }
    let Some((e, _)) = best else {
        return Err(PoseError::Degenerate("no three-point solution".into()));
    };
    let (pose, _) = refine_pose(&e.to_pose(), corr, k, 10);
    let worst = reprojection_errors(&pose, corr, k).into_iter().fold(0.0, f64::max);
    if !(worst < MINIMAL_MAX_RESIDUAL_PX) {
        return Err(PoseError::Degenerate(format!("residual {worst:.2} px")));
    }
    Ok(pose)
}
