//! Reader and writer for the 7-Scenes sequence layout.
//!
//! ```text
//! seq-01/
//!   intrinsics.json
//!   frame-000000.color.png   8-bit RGB
//!   frame-000000.depth.png   16-bit grayscale, millimeters, 0 = invalid
//!   frame-000000.pose.txt    4x4 row-major camera-to-world matrix
//! ```
//!
//! The intrinsics file may also sit in the parent (scene) directory.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use nalgebra::Matrix4;

use super::{CameraIntrinsics, CameraPose, Frame, SceneError};

/// Rotation tolerance for pose files, looser than in-memory construction to
/// accept text-rounded matrices.
pub const LOAD_ORTHONORMAL_TOL: f64 = 1e-3;

pub const INTRINSICS_FILE: &str = "intrinsics.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<Frame>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn img_err(path: &Path) -> impl FnOnce(image::ImageError) -> SceneError + '_ {
    move |source| SceneError::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn frame_path(dir: &Path, index: usize, suffix: &str) -> PathBuf {
    dir.join(format!("frame-{index:06}.{suffix}"))
}

/// Writes frames and intrinsics into `dir`, creating it if needed.
pub fn write_dataset(
    dir: &Path,
    intrinsics: &CameraIntrinsics,
    frames: &[Frame],
) -> Result<(), SceneError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let kpath = dir.join(INTRINSICS_FILE);
    let text = serde_json::to_string_pretty(intrinsics).expect("intrinsics serialize");
    fs::write(&kpath, text).map_err(io_err(&kpath))?;

    for (i, frame) in frames.iter().enumerate() {
        let (w, h) = (frame.width as u32, frame.height as u32);
        let color = frame_path(dir, i, "color.png");
        ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, frame.rgb.clone())
            .ok_or_else(|| SceneError::DimensionMismatch("rgb buffer".into()))?
            .save(&color)
            .map_err(img_err(&color))?;

        let depth_mm: Vec<u16> = frame
            .depth
            .iter()
            .map(|&d| {
                let mm = (d * 1000.0).round();
                if d > 0.0 && mm <= u16::MAX as f64 {
                    mm as u16
                } else {
                    0
                }
            })
            .collect();
        let depth = frame_path(dir, i, "depth.png");
        ImageBuffer::<Luma<u16>, _>::from_raw(w, h, depth_mm)
            .ok_or_else(|| SceneError::DimensionMismatch("depth buffer".into()))?
            .save(&depth)
            .map_err(img_err(&depth))?;

        let m = frame.pose.to_matrix();
        let mut text = String::new();
        for r in 0..4 {
            let row: Vec<String> = (0..4).map(|c| format!("{}", m[(r, c)])).collect();
            text.push_str(&row.join(" "));
            text.push('\n');
        }
        let pose = frame_path(dir, i, "pose.txt");
        fs::write(&pose, text).map_err(io_err(&pose))?;
    }
    Ok(())
}

fn read_intrinsics(dir: &Path) -> Result<CameraIntrinsics, SceneError> {
    let candidates = [
        dir.join(INTRINSICS_FILE),
        dir.parent()
            .map(|p| p.join(INTRINSICS_FILE))
            .unwrap_or_default(),
    ];
    let path = candidates
        .iter()
        .find(|p| p.is_file())
        .ok_or_else(|| SceneError::MissingFile(dir.join(INTRINSICS_FILE)))?;
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let k: CameraIntrinsics =
        serde_json::from_str(&text).map_err(|e| SceneError::MalformedIntrinsics {
            path: path.clone(),
            message: e.to_string(),
        })?;
    k.validate()?;
    Ok(k)
}

/// Parses a 4x4 whitespace-separated pose file.
pub fn parse_pose(text: &str) -> Result<CameraPose, SceneError> {
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| SceneError::MalformedPose(format!("token {t:?}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    if values.len() != 16 {
        return Err(SceneError::MalformedPose(format!(
            "expected 16 values, found {}",
            values.len()
        )));
    }
    let m = Matrix4::from_row_slice(&values);
    CameraPose::from_matrix(&m, LOAD_ORTHONORMAL_TOL)
}

fn frame_indices(dir: &Path) -> Result<Vec<usize>, SceneError> {
    let mut indices = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(num) = name
            .strip_prefix("frame-")
            .and_then(|s| s.strip_suffix(".color.png"))
        {
            if let Ok(i) = num.parse::<usize>() {
                indices.push(i);
            }
        }
    }
    indices.sort_unstable();
    Ok(indices)
}

/// Loads one sequence directory and precomputes ground-truth scene coordinates.
pub fn load_dataset(dir: &Path) -> Result<Dataset, SceneError> {
    if !dir.is_dir() {
        return Err(SceneError::MissingFile(dir.to_path_buf()));
    }
    let intrinsics = read_intrinsics(dir)?;
    let mut frames = Vec::new();
    for i in frame_indices(dir)? {
        let color_path = frame_path(dir, i, "color.png");
        let depth_path = frame_path(dir, i, "depth.png");
        let pose_path = frame_path(dir, i, "pose.txt");
        for p in [&depth_path, &pose_path] {
            if !p.is_file() {
                return Err(SceneError::MissingFile(p.clone()));
            }
        }
        let color = image::open(&color_path)
            .map_err(img_err(&color_path))?
            .to_rgb8();
        let depth = image::open(&depth_path)
            .map_err(img_err(&depth_path))?
            .to_luma16();
        if color.dimensions() != depth.dimensions()
            || color.dimensions() != (intrinsics.width as u32, intrinsics.height as u32)
        {
            return Err(SceneError::DimensionMismatch(format!(
                "frame {i}: color {:?}, depth {:?}, intrinsics {}x{}",
                color.dimensions(),
                depth.dimensions(),
                intrinsics.width,
                intrinsics.height
            )));
        }
        let text = fs::read_to_string(&pose_path).map_err(io_err(&pose_path))?;
        let pose = parse_pose(&text).map_err(|e| match e {
            SceneError::MalformedPose(m) => {
                SceneError::MalformedPose(format!("{}: {m}", pose_path.display()))
            }
            other => other,
        })?;
        let depth_m = depth
            .into_raw()
            .into_iter()
            .map(|mm| mm as f64 / 1000.0)
            .collect();
        let mut frame = Frame::new(
            intrinsics.width,
            intrinsics.height,
            color.into_raw(),
            depth_m,
            pose,
        )?;
        frame.compute_scene_coords(&intrinsics);
        frames.push(frame);
    }
    Ok(Dataset { intrinsics, frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{render_synthetic, trajectory, SyntheticScene, TrajectoryConfig};

    fn small_dataset() -> Dataset {
        let scene = SyntheticScene::default();
        let k = CameraIntrinsics::new(60.0, 60.0, 32.0, 24.0, 64, 48).unwrap();
        let poses = trajectory(
            &scene,
            &TrajectoryConfig {
                frames: 3,
                ..Default::default()
            },
        );
        let frames = poses
            .iter()
            .map(|p| render_synthetic(&scene, p, &k).unwrap())
            .collect();
        Dataset {
            intrinsics: k,
            frames,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset();
        write_dataset(dir.path(), &ds.intrinsics, &ds.frames).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, ds);
    }

    #[test]
    fn non_orthonormal_pose_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset();
        write_dataset(dir.path(), &ds.intrinsics, &ds.frames).unwrap();
        fs::write(
            dir.path().join("frame-000001.pose.txt"),
            "1 0.01 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n",
        )
        .unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(SceneError::MalformedPose(_))
        ));
    }

    #[test]
    fn all_zero_depth_gives_no_scene_coordinates() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = small_dataset();
        ds.frames[0].depth.iter_mut().for_each(|d| *d = 0.0);
        write_dataset(dir.path(), &ds.intrinsics, &ds.frames).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert!(loaded.frames[0].valid_pixels().is_empty());
        assert!(!loaded.frames[1].valid_pixels().is_empty());
    }

    #[test]
    fn missing_pose_file_reported() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset();
        write_dataset(dir.path(), &ds.intrinsics, &ds.frames).unwrap();
        fs::remove_file(dir.path().join("frame-000002.pose.txt")).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(SceneError::MissingFile(_))
        ));
    }

    #[test]
    fn dimension_mismatch_reported() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset();
        write_dataset(dir.path(), &ds.intrinsics, &ds.frames).unwrap();
        let small = ImageBuffer::<Luma<u16>, _>::from_raw(2, 2, vec![1u16; 4]).unwrap();
        small.save(dir.path().join("frame-000000.depth.png")).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(SceneError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn seven_scenes_style_pose_text_parses() {
        let text = "9.9935108e-001\t-3.5943140e-002\t0.0000000e+000\t1.0e-001\n\
                    3.5943140e-002\t9.9935108e-001\t0.0\t2.0e-001\n\
                    0 0 1 3.0e-001\n0 0 0 1\n";
        let pose = parse_pose(text).unwrap();
        assert!((pose.translation.z - 0.3).abs() < 1e-12);
    }
}
