//! Gravity inference from surface normals.
//!
//! Starting from the camera's up axis, each iteration keeps the normals
//! that are nearly parallel or nearly perpendicular to the current estimate
//! and re-solves for the direction that best aligns with the parallel set
//! while staying orthogonal to the perpendicular set: the dominant
//! eigenvector of `Σ_par n nᵀ − Σ_perp n nᵀ`.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use super::normals::Normals;
use crate::error::{Error, Result};

/// Up axis of a level camera in camera coordinates (y points down).
pub const CAMERA_UP: [f64; 3] = [0.0, -1.0, 0.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GravityConfig {
    /// Angular band (degrees) per iteration; the last entry repeats.
    pub bands_deg: Vec<f64>,
    pub max_iter: usize,
    pub converge_deg: f64,
    /// Minimum fraction of pixels that must carry a valid normal.
    pub min_valid_fraction: f64,
    /// Minimum fraction of valid normals within `aligned_band_deg` of
    /// parallel or perpendicular; below it the scene has no usable structure
    /// and the estimate is rejected.
    pub min_aligned_fraction: f64,
    pub aligned_band_deg: f64,
}

impl Default for GravityConfig {
    fn default() -> Self {
        Self {
            bands_deg: vec![45.0, 15.0, 5.0, 2.0],
            max_iter: 10,
            converge_deg: 0.1,
            min_valid_fraction: 0.01,
            min_aligned_fraction: 0.45,
            aligned_band_deg: 15.0,
        }
    }
}

/// The scene's up axis in camera coordinates (opposite to gravity);
/// heights above the camera are `p · direction`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GravityEstimate {
    pub direction: [f64; 3],
    pub iterations_used: usize,
    pub aligned_fraction: f64,
    /// True when estimation failed and the camera up axis was used instead.
    #[serde(default)]
    pub fallback: bool,
}

pub fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let (a, b) = (Vector3::from(a), Vector3::from(b));
    (a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos().to_degrees()
}

fn classify(n: &Vector3<f64>, up: &Vector3<f64>, band_deg: f64) -> (bool, bool) {
    let c = n.dot(up).abs();
    let band = band_deg.to_radians();
    (c >= band.cos(), c <= band.sin())
}

pub fn estimate_gravity(normals: &Normals, cfg: &GravityConfig) -> Result<GravityEstimate> {
    let valid: Vec<Vector3<f64>> = normals
        .normals
        .iter()
        .zip(&normals.valid)
        .filter(|(_, &v)| v)
        .map(|(n, _)| Vector3::from(*n))
        .collect();
    let total = normals.valid.len().max(1);
    if (valid.len() as f64) < cfg.min_valid_fraction * total as f64 || valid.is_empty() {
        return Err(Error::Gravity(format!(
            "only {} of {total} pixels carry a normal",
            valid.len()
        )));
    }
    if cfg.bands_deg.is_empty() || cfg.max_iter == 0 {
        return Err(Error::InvalidArgument("gravity needs at least one band and iteration".into()));
    }
    let mut up = Vector3::from(CAMERA_UP);
    let mut iterations = 0;
    for iter in 0..cfg.max_iter {
        let band = cfg.bands_deg[iter.min(cfg.bands_deg.len() - 1)];
        let mut m = Matrix3::zeros();
        for n in &valid {
            let (par, perp) = classify(n, &up, band);
            if par {
                m += n * n.transpose();
            } else if perp {
                m -= n * n.transpose();
            }
        }
        let eig = SymmetricEigen::new(m);
        let mut next: Vector3<f64> = eig.eigenvectors.column(eig.eigenvalues.imax()).into_owned();
        next = next.normalize();
        if next.dot(&up) < 0.0 {
            next = -next;
        }
        let change = next.dot(&up).clamp(-1.0, 1.0).acos().to_degrees();
        up = next;
        iterations = iter + 1;
        if iter + 1 >= cfg.bands_deg.len() && change < cfg.converge_deg {
            break;
        }
    }
    let aligned = valid
        .iter()
        .filter(|n| {
            let (par, perp) = classify(n, &up, cfg.aligned_band_deg);
            par || perp
        })
        .count() as f64
        / valid.len() as f64;
    if aligned < cfg.min_aligned_fraction {
        return Err(Error::Gravity(format!(
            "only {:.1}% of normals align with the estimate",
            100.0 * aligned
        )));
    }
    Ok(GravityEstimate {
        direction: [up.x, up.y, up.z],
        iterations_used: iterations,
        aligned_fraction: aligned,
        fallback: false,
    })
}

/// [`estimate_gravity`], falling back to the camera up axis on failure.
pub fn infer_gravity(normals: &Normals, cfg: &GravityConfig) -> GravityEstimate {
    estimate_gravity(normals, cfg).unwrap_or_else(|e| {
        log::warn!("gravity estimation fell back to the camera axis: {e}");
        GravityEstimate {
            direction: CAMERA_UP,
            iterations_used: 0,
            aligned_fraction: 0.0,
            fallback: true,
        }
    })
}
