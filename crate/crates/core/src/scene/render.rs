//! Ray-cast renderer for an axis-aligned, procedurally textured box room.
//!
//! The scene frame has its origin at one floor corner with `z` pointing up.
//! Every wall carries a two-scale pattern of pseudo-random colour cells, so
//! local RGB differences identify position on the wall.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{scene_coordinate, CameraIntrinsics, CameraPose, Frame, SceneError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticScene {
    /// Room size along x, y, z in meters.
    pub extent: [f64; 3],
    pub rng_seed: u64,
    /// Edge length of the coarse texture cells, meters.
    pub coarse_cell: f64,
    /// Edge length of the fine texture cells, meters.
    pub fine_cell: f64,
    /// Truncate depth to whole millimeters, as the 16-bit depth maps do.
    pub quantize_depth: bool,
}

impl Default for SyntheticScene {
    fn default() -> Self {
        Self {
            extent: [4.0, 3.0, 2.5],
            rng_seed: 1,
            coarse_cell: 0.3,
            fine_cell: 0.1,
            quantize_depth: true,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn cell_color(seed: u64, wall: usize, level: u64, i: i64, j: i64) -> [f64; 3] {
    let mut h = splitmix64(seed ^ 0x5151_0000_0000_0000);
    for v in [wall as u64, level, i as u64, j as u64] {
        h = splitmix64(h ^ v);
    }
    [
        (h & 0xff) as f64,
        ((h >> 8) & 0xff) as f64,
        ((h >> 16) & 0xff) as f64,
    ]
}

impl SyntheticScene {
    fn extent_vec(&self) -> Vector3<f64> {
        Vector3::from(self.extent)
    }

    pub fn contains(&self, m: &Vector3<f64>, tol: f64) -> bool {
        (0..3).all(|a| m[a] >= -tol && m[a] <= self.extent[a] + tol)
    }

    /// Intersects a ray starting inside the room with the walls.
    ///
    /// Returns the ray parameter and the wall index (`2 * axis + far_side`).
    pub fn ray_cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
        let extent = self.extent_vec();
        let mut best: Option<(f64, usize)> = None;
        for axis in 0..3 {
            let d = dir[axis];
            if d == 0.0 {
                continue;
            }
            let (bound, side) = if d > 0.0 { (extent[axis], 1) } else { (0.0, 0) };
            let s = (bound - origin[axis]) / d;
            if s > 0.0 && best.is_none_or(|(b, _)| s < b) {
                best = Some((s, 2 * axis + side));
            }
        }
        best
    }

    /// Texture colour of the point `m` lying on `wall`.
    pub fn albedo(&self, wall: usize, m: &Vector3<f64>) -> [u8; 3] {
        let axis = wall / 2;
        let (a, b) = match axis {
            0 => (m.y, m.z),
            1 => (m.x, m.z),
            _ => (m.x, m.y),
        };
        let coarse = cell_color(
            self.rng_seed,
            wall,
            0,
            (a / self.coarse_cell).floor() as i64,
            (b / self.coarse_cell).floor() as i64,
        );
        // the fine grid is offset by half a cell so edges of the two levels
        // do not coincide
        let fine = cell_color(
            self.rng_seed,
            wall,
            1,
            (a / self.fine_cell + 0.5).floor() as i64,
            (b / self.fine_cell + 0.5).floor() as i64,
        );
        let mut out = [0u8; 3];
        for c in 0..3 {
            out[c] = (0.6 * coarse[c] + 0.4 * fine[c]).round().clamp(0.0, 255.0) as u8;
        }
        out
    }
}

/// Renders RGB, depth and exact scene coordinates for one camera pose.
pub fn render_synthetic(
    scene: &SyntheticScene,
    pose: &CameraPose,
    intrinsics: &CameraIntrinsics,
) -> Result<Frame, SceneError> {
    intrinsics.validate()?;
    let eye = pose.translation;
    if !scene.contains(&eye, 0.0)
        || (0..3).any(|a| eye[a] <= 0.0 || eye[a] >= scene.extent[a])
    {
        return Err(SceneError::CameraOutsideScene([eye.x, eye.y, eye.z]));
    }
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut rgb = Vec::with_capacity(w * h * 3);
    let mut depth = Vec::with_capacity(w * h);
    let mut coords = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let p = Vector2::new(x as f64, y as f64);
            let dir = pose.rotation * intrinsics.ray(&p);
            let (s, wall) = scene
                .ray_cast(&eye, &dir)
                .expect("a ray from inside a closed box always hits a wall");
            let hit = eye + dir * s;
            rgb.extend_from_slice(&scene.albedo(wall, &hit));
            // truncation keeps the back-projected point inside the room
            let d = if scene.quantize_depth {
                (s * 1000.0).floor() / 1000.0
            } else {
                s
            };
            depth.push(d);
            coords.push(scene_coordinate(&p, d, intrinsics, pose).ok());
        }
    }
    let mut frame = Frame::new(w, h, rgb, depth, *pose)?;
    frame.scene_coords = Some(coords);
    Ok(frame)
}

/// Camera path parameters for synthetic sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub frames: usize,
    pub seed: u64,
    /// Half-widths of the box around the room centre the camera moves in, meters.
    pub position_jitter: [f64; 3],
    /// Standard deviation of yaw noise around the loop heading, radians.
    pub yaw_jitter: f64,
    /// Maximum absolute pitch, radians.
    pub max_pitch: f64,
    /// Heading of the first frame, radians from the +x axis.
    pub yaw_start: f64,
    /// Heading range swept by the sequence, radians; a full turn by default.
    pub yaw_span: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            frames: 40,
            seed: 7,
            position_jitter: [0.5, 0.35, 0.2],
            yaw_jitter: 0.15,
            max_pitch: 0.25,
            yaw_start: 0.0,
            yaw_span: std::f64::consts::TAU,
        }
    }
}

/// A loop of camera poses around the room centre, each looking outward.
pub fn trajectory(scene: &SyntheticScene, cfg: &TrajectoryConfig) -> Vec<CameraPose> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centre = scene.extent_vec() * 0.5;
    let n = cfg.frames.max(1);
    (0..cfg.frames)
        .map(|i| {
            let angle = cfg.yaw_start + cfg.yaw_span * i as f64 / n as f64;
            let offset = Vector3::new(
                rng.random_range(-1.0..1.0) * cfg.position_jitter[0],
                rng.random_range(-1.0..1.0) * cfg.position_jitter[1],
                rng.random_range(-1.0..1.0) * cfg.position_jitter[2],
            );
            let eye = centre + offset;
            let yaw = angle + rng.random_range(-1.0..1.0) * cfg.yaw_jitter;
            let pitch = rng.random_range(-1.0..1.0) * cfg.max_pitch;
            let look = Vector3::new(
                yaw.cos() * pitch.cos(),
                yaw.sin() * pitch.cos(),
                pitch.sin(),
            );
            CameraPose::look_at(eye, eye + look, Vector3::new(0.0, 0.0, -1.0))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(80.0, 80.0, 40.0, 30.0, 80, 60).unwrap()
    }

    fn poses() -> Vec<CameraPose> {
        trajectory(&SyntheticScene::default(), &TrajectoryConfig::default())
    }

    #[test]
    fn scene_coords_inside_room() {
        let scene = SyntheticScene::default();
        for pose in poses().iter().take(8) {
            let f = render_synthetic(&scene, pose, &intrinsics()).unwrap();
            for m in f.scene_coords.as_ref().unwrap().iter().flatten() {
                assert!(scene.contains(m, 1e-9), "{m:?}");
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let scene = SyntheticScene::default();
        let pose = poses()[3];
        let a = render_synthetic(&scene, &pose, &intrinsics()).unwrap();
        let b = render_synthetic(&scene, &pose, &intrinsics()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn camera_outside_rejected() {
        let scene = SyntheticScene::default();
        let pose = CameraPose::look_at(
            Vector3::new(-1.0, 1.0, 1.0),
            Vector3::new(1.0, 1.0, 1.0),
            Vector3::new(0.0, 0.0, -1.0),
        );
        assert!(matches!(
            render_synthetic(&scene, &pose, &intrinsics()),
            Err(SceneError::CameraOutsideScene(_))
        ));
    }

    /// Independent slab intersection: smallest positive hit over all six planes.
    fn oracle_hit(scene: &SyntheticScene, o: Vector3<f64>, d: Vector3<f64>) -> Vector3<f64> {
        let mut best = f64::INFINITY;
        for axis in 0..3 {
            for plane in [0.0, scene.extent[axis]] {
                if d[axis].abs() > 0.0 {
                    let s = (plane - o[axis]) / d[axis];
                    if s > 0.0 {
                        let p = o + d * s;
                        if scene.contains(&p, 1e-9) {
                            best = best.min(s);
                        }
                    }
                }
            }
        }
        o + d * best
    }

    #[test]
    fn unquantized_depth_matches_ray_cast() {
        let scene = SyntheticScene {
            quantize_depth: false,
            ..Default::default()
        };
        let k = intrinsics();
        for pose in poses().iter().take(5) {
            let f = render_synthetic(&scene, pose, &k).unwrap();
            for y in (0..k.height).step_by(3) {
                for x in (0..k.width).step_by(3) {
                    let p = Vector2::new(x as f64, y as f64);
                    let m = scene_coordinate(&p, f.depth_at(x, y), &k, pose).unwrap();
                    let dir = pose.rotation * Vector3::new((p.x - 40.0) / 80.0, (p.y - 30.0) / 80.0, 1.0);
                    let hit = oracle_hit(&scene, pose.translation, dir);
                    assert!((m - hit).norm() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn frame_invariant_holds_for_quantized_depth() {
        let scene = SyntheticScene::default();
        let k = intrinsics();
        let pose = poses()[0];
        let f = render_synthetic(&scene, &pose, &k).unwrap();
        for y in 0..k.height {
            for x in 0..k.width {
                let d = f.depth_at(x, y);
                assert!(((d * 1000.0).round() - d * 1000.0).abs() < 1e-9);
                let m = f.scene_coord(x, y).unwrap();
                let expect = pose.transform(&(k.ray(&Vector2::new(x as f64, y as f64)) * d));
                assert!((m - expect).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn texture_has_variation() {
        let scene = SyntheticScene::default();
        let f = render_synthetic(&scene, &poses()[0], &intrinsics()).unwrap();
        let distinct: std::collections::HashSet<_> = f.rgb.chunks(3).collect();
        assert!(distinct.len() > 20);
    }
}
