use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Intrinsics assumed for frames that carry none: a 60° horizontal field
    /// of view with the principal point at the image centre.
    pub fn assumed(width: usize, height: usize) -> Self {
        let f = (width as f64 / 2.0) / (30f64.to_radians()).tan();
        Self {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }
}

/// Metric depth in millimetres, 0 = missing.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub depth_mm: Vec<u16>,
    pub intrinsics: Intrinsics,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, depth_mm: Vec<u16>, intrinsics: Intrinsics) -> Result<Self> {
        if depth_mm.len() != width * height {
            return Err(Error::Shape(format!(
                "{} depth values for a {width}x{height} image",
                depth_mm.len()
            )));
        }
        if (intrinsics.width, intrinsics.height) != (width, height) {
            return Err(Error::Shape(format!(
                "intrinsics are for {}x{}, depth image is {width}x{height}",
                intrinsics.width, intrinsics.height
            )));
        }
        intrinsics.validate()?;
        Ok(Self {
            width,
            height,
            depth_mm,
            intrinsics,
        })
    }

    pub fn z_m(&self, idx: usize) -> f64 {
        f64::from(self.depth_mm[idx]) / 1000.0
    }
}

/// Per-pixel camera-frame points in metres (x right, y down, z forward).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub width: usize,
    pub height: usize,
    pub points: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

impl PointCloud {
    pub fn valid_points(&self) -> impl Iterator<Item = &[f64; 3]> {
        self.points.iter().zip(&self.valid).filter(|(_, &v)| v).map(|(p, _)| p)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            points: self.points.iter().map(|p| [p[0] * s, p[1] * s, p[2] * s]).collect(),
            ..self.clone()
        }
    }
}

pub fn backproject(depth: &DepthImage) -> PointCloud {
    let k = &depth.intrinsics;
    let mut points = Vec::with_capacity(depth.width * depth.height);
    let mut valid = Vec::with_capacity(depth.width * depth.height);
    for v in 0..depth.height {
        for u in 0..depth.width {
            let idx = v * depth.width + u;
            let z = depth.z_m(idx);
            if depth.depth_mm[idx] == 0 {
                points.push([0.0; 3]);
                valid.push(false);
            } else {
                points.push([(u as f64 - k.cx) * z / k.fx, (v as f64 - k.cy) * z / k.fy, z]);
                valid.push(true);
            }
        }
    }
    PointCloud {
        width: depth.width,
        height: depth.height,
        points,
        valid,
    }
}
