use serde::{Deserialize, Serialize};

use super::camera::PointCloud;
use crate::error::{Error, Result};

/// The ground may sit at most this far below the camera (metres). The
/// camera was carried 1.8 m above the floor, with 0.1 m allowance.
pub const MAX_GROUND_DEPTH_M: f64 = 1.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundEstimate {
    /// Ground height relative to the camera along the up axis (negative =
    /// below the camera).
    pub height: f64,
    /// Percentile height before clamping.
    pub raw_height: f64,
    pub clamped: bool,
}

/// Ground height as a low percentile of point heights `p · up`, clamped to
/// no lower than `-max_depth`.
pub fn estimate_ground(cloud: &PointCloud, up: [f64; 3], percentile: f64, max_depth: f64) -> Result<GroundEstimate> {
    let mut h: Vec<f64> = cloud
        .valid_points()
        .map(|p| p[0] * up[0] + p[1] * up[1] + p[2] * up[2])
        .collect();
    if h.is_empty() {
        return Err(Error::NoValidPoints);
    }
    h.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0) * (h.len() - 1) as f64).floor() as usize;
    let raw = h[rank.min(h.len() - 1)];
    let clamped = raw < -max_depth;
    Ok(GroundEstimate {
        height: if clamped { -max_depth } else { raw },
        raw_height: raw,
        clamped,
    })
}
