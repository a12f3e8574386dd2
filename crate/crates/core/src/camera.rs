//! Pinhole camera: rigid extrinsic (uniform scale allowed) plus intrinsics.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CameraPose {
    /// 4x4 row-major world-to-camera transform; rotation block may carry a
    /// uniform positive scale.
    pub extrinsic: [[f64; 4]; 4],
    /// Focal length in pixels (same for x and y).
    pub focal: f64,
    /// Principal point in pixels.
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraPose {
    /// Frontal camera looking at the origin from `dist` along +z, image
    /// y-down, world y-up.
    pub fn frontal(dist: f64, focal: f64, width: usize, height: usize) -> Self {
        CameraPose {
            extrinsic: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, -1.0, 0.0, 0.0],
                [0.0, 0.0, -1.0, dist],
                [0.0, 0.0, 0.0, 1.0],
            ],
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    /// Rotation-block scale; errors if the block is not (scaled) orthogonal
    /// or the scale is degenerate.
    pub fn validate(&self) -> Result<f64> {
        if self.focal <= 0.0 {
            return Err(Error::Argument("camera focal length must be positive".into()));
        }
        let m = &self.extrinsic;
        // R Rᵀ must be s² I
        let mut rrt = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rrt[i][j] = (0..3).map(|k| m[i][k] * m[j][k]).sum();
            }
        }
        let s2 = (rrt[0][0] + rrt[1][1] + rrt[2][2]) / 3.0;
        if s2 < 1e-12 {
            return Err(Error::Argument("degenerate camera: zero scale".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { s2 } else { 0.0 };
                if (rrt[i][j] - expect).abs() > 1e-6 * s2.max(1.0) {
                    return Err(Error::Argument(
                        "camera extrinsic rotation block is not orthogonal with uniform scale".into(),
                    ));
                }
            }
        }
        Ok(s2.sqrt())
    }

    pub fn world_to_cam(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.extrinsic;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
        ]
    }

    /// Project one camera-space point; `None` when at or behind the camera.
    pub fn cam_to_pixel(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        if p[2] <= 1e-9 {
            return None;
        }
        Some([
            self.focal * p[0] / p[2] + self.cx,
            self.focal * p[1] / p[2] + self.cy,
        ])
    }

    pub fn extrinsic_flat(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                out[i * 4 + j] = self.extrinsic[i][j];
            }
        }
        out
    }

    pub fn from_flat(flat: &[f64], focal: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if flat.len() != 16 {
            return Err(Error::Format("camera extrinsic must have 16 entries".into()));
        }
        let mut extrinsic = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                extrinsic[i][j] = flat[i * 4 + j];
            }
        }
        let cam = CameraPose { extrinsic, focal, cx, cy, width, height };
        cam.validate()?;
        Ok(cam)
    }
}

/// Pinhole projection of a vertex array `(V, 3)`; invalid entries (behind the
/// camera) keep their last computed coordinates but are flagged.
pub struct Projected {
    pub pix: Array2<f64>,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

pub fn project_vertices(vertices: &Array2<f64>, camera: &CameraPose) -> Result<Projected> {
    camera.validate()?;
    let v = vertices.nrows();
    let mut pix = Array2::zeros((v, 2));
    let mut valid = vec![false; v];
    let mut depth = vec![0.0; v];
    for i in 0..v {
        let p = camera.world_to_cam([vertices[[i, 0]], vertices[[i, 1]], vertices[[i, 2]]]);
        depth[i] = p[2];
        match camera.cam_to_pixel(p) {
            Some(uv) => {
                pix[[i, 0]] = uv[0];
                pix[[i, 1]] = uv[1];
                valid[i] = true;
            }
            None => {
                // keep a clamped projection direction for edge-clamped sampling
                pix[[i, 0]] = camera.cx;
                pix[[i, 1]] = camera.cy;
            }
        }
    }
    Ok(Projected { pix, depth, valid })
}
