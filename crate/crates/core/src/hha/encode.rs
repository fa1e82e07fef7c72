//! Three-channel HHA encoding: horizontal disparity, height above ground
//! and the angle between the surface normal and the up axis.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use super::camera::{backproject, DepthImage, PointCloud};
use super::gravity::{angle_deg, infer_gravity, GravityConfig, GravityEstimate};
use super::ground::{estimate_ground, GroundEstimate, MAX_GROUND_DEPTH_M};
use super::normals::{estimate_normals, Normals};
use crate::error::{Error, Result};

pub const HHA_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HhaConfig {
    pub z_min_m: f64,
    /// Depth sensor range; farther readings are treated as missing.
    pub z_max_m: f64,
    pub height_range_m: f64,
    pub normal_window: usize,
    pub ground_percentile: f64,
    pub max_ground_depth_m: f64,
    pub gravity: GravityConfig,
}

impl Default for HhaConfig {
    fn default() -> Self {
        Self {
            z_min_m: 0.5,
            z_max_m: 5.0,
            height_range_m: 3.0,
            normal_window: 5,
            ground_percentile: 1.0,
            max_ground_depth_m: MAX_GROUND_DEPTH_M,
            gravity: GravityConfig::default(),
        }
    }
}

/// `3 x H x W` planar bytes: disparity, height, angle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HhaImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl HhaImage {
    pub fn channel(&self, c: usize) -> &[u8] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let n = self.width * self.height;
        let img = ImageBuffer::<Rgb<u8>, _>::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            Rgb([self.data[i], self.data[n + i], self.data[2 * n + i]])
        });
        img.save(path).map_err(|e| Error::image(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let n = w * h;
        let mut data = vec![0u8; 3 * n];
        for (x, y, p) in img.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                data[c * n + i] = p.0[c];
            }
        }
        Ok(Self { width: w, height: h, data })
    }
}

/// Per-frame record written next to each HHA image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HhaSidecar {
    pub schema_version: u32,
    pub gravity: GravityEstimate,
    pub ground: GroundEstimate,
    pub config: HhaConfig,
}

impl HhaSidecar {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Inverse depth mapped linearly from `[1/z_max, 1/z_min]` onto `[0, 1]`
/// (unclamped).
pub fn disparity_level(z_m: f64, cfg: &HhaConfig) -> f64 {
    let (lo, hi) = (1.0 / cfg.z_max_m, 1.0 / cfg.z_min_m);
    (1.0 / z_m - lo) / (hi - lo)
}

pub fn disparity_byte(z_m: f64, cfg: &HhaConfig) -> u8 {
    to_byte(disparity_level(z_m, cfg))
}

pub fn height_byte(height_above_ground_m: f64, cfg: &HhaConfig) -> u8 {
    to_byte(height_above_ground_m / cfg.height_range_m)
}

pub fn angle_byte(angle_deg: f64) -> u8 {
    to_byte(angle_deg / 180.0)
}

/// True where a depth reading exists and lies within sensor range.
pub fn validity_mask(depth: &DepthImage, z_max_m: f64) -> Vec<bool> {
    let max_mm = z_max_m * 1000.0;
    depth.depth_mm.iter().map(|&d| d > 0 && f64::from(d) <= max_mm).collect()
}

/// Back-projected points restricted to the validity mask.
pub fn valid_cloud(depth: &DepthImage, cfg: &HhaConfig) -> PointCloud {
    let mut cloud = backproject(depth);
    for (v, ok) in cloud.valid.iter_mut().zip(validity_mask(depth, cfg.z_max_m)) {
        *v &= ok;
    }
    cloud
}

/// Encodes a frame given its up axis and ground height.
pub fn encode_hha(depth: &DepthImage, gravity: &GravityEstimate, ground: &GroundEstimate, cfg: &HhaConfig) -> Result<HhaImage> {
    let cloud = valid_cloud(depth, cfg);
    let normals = estimate_normals(&cloud, cfg.normal_window)?;
    Ok(encode_with_normals(&cloud, &normals, depth, gravity, ground, cfg))
}

fn encode_with_normals(
    cloud: &PointCloud,
    normals: &Normals,
    depth: &DepthImage,
    gravity: &GravityEstimate,
    ground: &GroundEstimate,
    cfg: &HhaConfig,
) -> HhaImage {
    let n = depth.width * depth.height;
    let up = gravity.direction;
    let mut data = vec![0u8; 3 * n];
    for i in (0..n).filter(|&i| cloud.valid[i]) {
        let p = cloud.points[i];
        let h = p[0] * up[0] + p[1] * up[1] + p[2] * up[2];
        data[i] = disparity_byte(p[2], cfg);
        data[n + i] = height_byte(h - ground.height, cfg);
        if normals.valid[i] {
            data[2 * n + i] = angle_byte(angle_deg(normals.normals[i], up));
        }
    }
    HhaImage {
        width: depth.width,
        height: depth.height,
        data,
    }
}

/// Full per-frame pipeline: points, normals, gravity (with fallback),
/// clamped ground, encoding.
pub fn encode_frame(depth: &DepthImage, cfg: &HhaConfig) -> Result<(HhaImage, HhaSidecar)> {
    let cloud = valid_cloud(depth, cfg);
    let normals = estimate_normals(&cloud, cfg.normal_window)?;
    let gravity = infer_gravity(&normals, &cfg.gravity);
    let ground = estimate_ground(&cloud, gravity.direction, cfg.ground_percentile, cfg.max_ground_depth_m)?;
    let image = encode_with_normals(&cloud, &normals, depth, &gravity, &ground, cfg);
    Ok((
        image,
        HhaSidecar {
            schema_version: HHA_SCHEMA_VERSION,
            gravity,
            ground,
            config: cfg.clone(),
        },
    ))
}
