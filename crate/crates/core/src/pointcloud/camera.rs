//! Pinhole back-projection of masked depth pixels.

use crate::error::{Error, Result};

use super::PointCloud;

#[derive(Debug, Clone, Copy)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<CameraIntrinsics> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }
}

/// Depth map in meters with a foreground mask; depth 0 marks invalid pixels.
#[derive(Debug, Clone)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    depth: Vec<f64>,
    mask: Vec<bool>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, depth: Vec<f64>, mask: Vec<bool>) -> Result<DepthImage> {
        if depth.len() != width * height || mask.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "depth/mask size mismatch for {width}x{height} image"
            )));
        }
        if depth.iter().any(|&d| d < 0.0 || !d.is_finite()) {
            return Err(Error::InvalidInput("negative or non-finite depth".into()));
        }
        Ok(DepthImage {
            width,
            height,
            depth,
            mask,
        })
    }

    pub fn depth_at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.width + u]
    }

    pub fn masked(&self, u: usize, v: usize) -> bool {
        self.mask[v * self.width + u]
    }
}

/// Back-project every masked pixel with valid depth to a camera-frame point,
/// in raster order: x = (u - cx) d / fx, y = (v - cy) d / fy, z = d.
pub fn pct(depth: &DepthImage, intrinsics: &CameraIntrinsics) -> Result<PointCloud> {
    let mut points = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.depth_at(u, v);
            if depth.masked(u, v) && d > 0.0 {
                points.push([
                    (u as f64 - intrinsics.cx) * d / intrinsics.fx,
                    (v as f64 - intrinsics.cy) * d / intrinsics.fy,
                    d,
                ]);
            }
        }
    }
    if points.is_empty() {
        return Err(Error::InvalidInput("no foreground points".into()));
    }
    PointCloud::from_points(points)
}

/// Forward pinhole projection of a camera-frame point to (u, v, d).
pub fn project(point: &[f64; 3], intrinsics: &CameraIntrinsics) -> (f64, f64, f64) {
    let d = point[2];
    (
        point[0] * intrinsics.fx / d + intrinsics.cx,
        point[1] * intrinsics.fy / d + intrinsics.cy,
        d,
    )
}
