//! Pinhole intrinsics and rigid camera poses.
//!
//! Poses follow the RGB-D relocalization convention: a [`CameraPose`] maps
//! camera coordinates into the scene frame, `m = R x + t`, so `t` is the
//! camera centre in scene coordinates.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::SceneError;

/// Tolerance used when validating rotations built in code.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal_x: f64,
    pub focal_y: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        focal_x: f64,
        focal_y: f64,
        center_x: f64,
        center_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, SceneError> {
        let intrinsics = Self {
            focal_x,
            focal_y,
            center_x,
            center_y,
            width,
            height,
        };
        intrinsics.validate()?;
        Ok(intrinsics)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let ok = self.focal_x > 0.0
            && self.focal_y > 0.0
            && self.center_x > 0.0
            && self.center_x < self.width as f64
            && self.center_y > 0.0
            && self.center_y < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(SceneError::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    /// True when the continuous pixel coordinate lies on the sensor.
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.width as f64
            && pixel.y < self.height as f64
    }

    /// Projects a camera-frame point onto the image plane.
    pub fn project(&self, x: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.focal_x * x.x / x.z + self.center_x,
            self.focal_y * x.y / x.z + self.center_y,
        )
    }

    /// Camera-frame ray through `pixel` with unit z component.
    pub fn ray(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.center_x) / self.focal_x,
            (pixel.y - self.center_y) / self.focal_y,
            1.0,
        )
    }
}

/// Rigid transform from the camera frame into the scene frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose and checks that `rotation` is a proper rotation within `tol`.
    pub fn new_checked(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        tol: f64,
    ) -> Result<Self, SceneError> {
        let deviation = orthonormality_error(&rotation);
        if !deviation.is_finite() || deviation > tol || !translation.iter().all(|v| v.is_finite())
        {
            return Err(SceneError::MalformedPose(format!(
                "rotation deviates from SO(3) by {deviation:e}"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_axis_angle(axis_angle: &Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::new(*axis_angle).into_inner(),
            translation,
        }
    }

    /// Camera at `eye` looking towards `target`, with image y pointing along `down`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, down: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = down.cross(&z).normalize();
        let y = z.cross(&x);
        Self {
            rotation: Matrix3::from_columns(&[x, y, z]),
            translation: eye,
        }
    }

    /// Maps a camera-frame point into the scene frame.
    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Maps a scene point into the camera frame.
    pub fn inverse_transform(&self, m: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (m - self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &CameraPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Reads a homogeneous camera-to-scene matrix, validating the rotation block.
    pub fn from_matrix(m: &Matrix4<f64>, tol: f64) -> Result<Self, SceneError> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom
            .iter()
            .zip([0.0, 0.0, 0.0, 1.0])
            .any(|(a, b)| (a - b).abs() > tol)
        {
            return Err(SceneError::MalformedPose(format!(
                "bottom row {bottom:?} is not [0 0 0 1]"
            )));
        }
        Self::new_checked(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
            tol,
        )
    }
}

/// Frobenius deviation of `RᵀR` from identity plus the determinant error.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm() + (r.determinant() - 1.0).abs()
}

/// Back-projects a pixel with metric depth into the camera frame.
///
/// Depth `<= 0` marks a pixel without a usable measurement.
pub fn back_project(
    pixel: &Vector2<f64>,
    depth: f64,
    intrinsics: &CameraIntrinsics,
) -> Result<Vector3<f64>, SceneError> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(SceneError::InvalidDepth(depth));
    }
    if !intrinsics.contains(pixel) {
        return Err(SceneError::PixelOutOfBounds {
            x: pixel.x,
            y: pixel.y,
        });
    }
    Ok(intrinsics.ray(pixel) * depth)
}

/// Scene coordinate label `m = H x` of a pixel.
pub fn scene_coordinate(
    pixel: &Vector2<f64>,
    depth: f64,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
) -> Result<Vector3<f64>, SceneError> {
    back_project(pixel, depth, intrinsics).map(|x| pose.transform(&x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 110.0, 160.0, 120.0, 320, 240).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> CameraPose {
        let aa = Vector3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        );
        let t = Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        CameraPose::from_axis_angle(&aa, t)
    }

    #[test]
    fn principal_point_ray() {
        let k = intrinsics();
        let x = back_project(&Vector2::new(k.center_x, k.center_y), 1.0, &k).unwrap();
        assert_eq!(x, Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn unit_slope_ray() {
        let k = intrinsics();
        let x = back_project(&Vector2::new(k.center_x + k.focal_x, k.center_y), 2.0, &k).unwrap();
        assert_eq!(x, Vector3::new(2.0, 0.0, 2.0));
    }

    #[test]
    fn invalid_depth_is_rejected() {
        let k = intrinsics();
        let p = Vector2::new(10.0, 10.0);
        assert!(matches!(
            back_project(&p, 0.0, &k),
            Err(SceneError::InvalidDepth(_))
        ));
        assert!(matches!(
            back_project(&p, -1.0, &k),
            Err(SceneError::InvalidDepth(_))
        ));
        assert!(matches!(
            back_project(&Vector2::new(400.0, 10.0), 1.0, &k),
            Err(SceneError::PixelOutOfBounds { .. })
        ));
    }

    #[test]
    fn projection_round_trip() {
        let k = intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p = Vector2::new(
                rng.random_range(0.0..k.width as f64),
                rng.random_range(0.0..k.height as f64),
            );
            let depth = rng.random_range(0.1..20.0);
            let x = back_project(&p, depth, &k).unwrap();
            // forward pinhole projection written out independently
            let u = k.focal_x * x[0] / x[2] + k.center_x;
            let v = k.focal_y * x[1] / x[2] + k.center_y;
            assert!((u - p.x).abs() < 1e-9 && (v - p.y).abs() < 1e-9);
        }
    }

    #[test]
    fn scene_coordinate_identity_and_translation() {
        let k = intrinsics();
        let p = Vector2::new(k.center_x, k.center_y);
        let m = scene_coordinate(&p, 1.0, &k, &CameraPose::identity()).unwrap();
        assert_eq!(m, Vector3::new(0.0, 0.0, 1.0));
        let shifted = CameraPose {
            rotation: Matrix3::identity(),
            translation: Vector3::new(1.0, 2.0, 3.0),
        };
        let m = scene_coordinate(&p, 1.0, &k, &shifted).unwrap();
        assert_eq!(m, Vector3::new(1.0, 2.0, 4.0));
    }

    #[test]
    fn scene_coordinate_matches_homogeneous_matrix() {
        let k = intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let pose = random_pose(&mut rng);
            let p = Vector2::new(rng.random_range(0.0..320.0), rng.random_range(0.0..240.0));
            let d = rng.random_range(0.2..8.0);
            let m = scene_coordinate(&p, d, &k, &pose).unwrap();
            let x = nalgebra::Vector4::new(
                (p.x - 160.0) / 100.0 * d,
                (p.y - 120.0) / 110.0 * d,
                d,
                1.0,
            );
            let h = pose.to_matrix() * x;
            assert!((m - h.xyz()).norm() < 1e-9);
        }
    }

    #[test]
    fn pose_group_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = random_pose(&mut rng);
            let id = a.compose(&a.inverse());
            assert!((id.rotation - Matrix3::identity()).norm() < 1e-9);
            assert!(id.translation.norm() < 1e-9);
            assert!(orthonormality_error(&a.rotation) < ORTHONORMAL_TOL);
        }
    }

    #[test]
    fn non_orthonormal_matrix_rejected() {
        let mut m = Matrix4::identity();
        m[(0, 1)] = 0.01;
        assert!(matches!(
            CameraPose::from_matrix(&m, 1e-3),
            Err(SceneError::MalformedPose(_))
        ));
    }

    #[test]
    fn look_at_points_optical_axis_at_target() {
        let pose = CameraPose::look_at(
            Vector3::new(1.0, 1.0, 1.0),
            Vector3::new(3.0, 1.0, 1.0),
            Vector3::new(0.0, 0.0, -1.0),
        );
        let c = pose.inverse_transform(&Vector3::new(3.0, 1.0, 1.0));
        assert!(c.x.abs() < 1e-12 && c.y.abs() < 1e-12 && (c.z - 2.0).abs() < 1e-12);
        assert!(orthonormality_error(&pose.rotation) < 1e-12);
    }
}
