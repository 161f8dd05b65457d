//! Camera geometry, RGB-D frames, the synthetic box-room renderer and the
//! on-disk dataset layout.

mod camera;
mod dataset;
mod render;

pub use camera::{
    back_project, orthonormality_error, scene_coordinate, CameraIntrinsics, CameraPose,
    ORTHONORMAL_TOL,
};
pub use dataset::{load_dataset, write_dataset, Dataset, LOAD_ORTHONORMAL_TOL};
pub use render::{render_synthetic, trajectory, SyntheticScene, TrajectoryConfig};

use nalgebra::{Vector2, Vector3};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid depth {0} (pixel has no usable measurement)")]
    InvalidDepth(f64),
    #[error("pixel ({x}, {y}) lies outside the image")]
    PixelOutOfBounds { x: f64, y: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("camera centre {0:?} is outside the scene volume")]
    CameraOutsideScene([f64; 3]),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("malformed pose matrix: {0}")]
    MalformedPose(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("malformed intrinsics file {path}: {message}")]
    MalformedIntrinsics { path: PathBuf, message: String },
}

/// One registered RGB-D frame.
///
/// Depth is held in meters (0 marks an invalid pixel); on disk it is stored
/// as 16-bit millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGB, 8 bits per channel.
    pub rgb: Vec<u8>,
    /// Row-major depth in meters.
    pub depth: Vec<f64>,
    pub pose: CameraPose,
    /// Ground-truth scene coordinates, `None` where depth is invalid.
    pub scene_coords: Option<Vec<Option<Vector3<f64>>>>,
}

impl Frame {
    pub fn new(
        width: usize,
        height: usize,
        rgb: Vec<u8>,
        depth: Vec<f64>,
        pose: CameraPose,
    ) -> Result<Self, SceneError> {
        if rgb.len() != width * height * 3 || depth.len() != width * height {
            return Err(SceneError::DimensionMismatch(format!(
                "{width}x{height} frame with {} rgb bytes and {} depth values",
                rgb.len(),
                depth.len()
            )));
        }
        Ok(Self {
            width,
            height,
            rgb,
            depth,
            pose,
            scene_coords: None,
        })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    /// Intensity of channel `c` (0 = R, 1 = G, 2 = B) at `(x, y)`.
    #[inline]
    pub fn intensity(&self, x: usize, y: usize, c: usize) -> u8 {
        self.rgb[3 * self.index(x, y) + c]
    }

    #[inline]
    pub fn depth_at(&self, x: usize, y: usize) -> f64 {
        self.depth[self.index(x, y)]
    }

    /// Fills `scene_coords` from depth, pose and intrinsics.
    pub fn compute_scene_coords(&mut self, intrinsics: &CameraIntrinsics) {
        let mut coords = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = Vector2::new(x as f64, y as f64);
                coords.push(scene_coordinate(&p, self.depth_at(x, y), intrinsics, &self.pose).ok());
            }
        }
        self.scene_coords = Some(coords);
    }

    pub fn scene_coord(&self, x: usize, y: usize) -> Option<Vector3<f64>> {
        self.scene_coords
            .as_ref()
            .and_then(|c| c[self.index(x, y)])
    }

    /// Pixels with a valid ground-truth scene coordinate.
    pub fn valid_pixels(&self) -> Vec<(usize, usize)> {
        let Some(coords) = &self.scene_coords else {
            return Vec::new();
        };
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .filter(|&(x, y)| coords[y * self.width + x].is_some())
            .collect()
    }
}
