//! Surface normals from least-squares plane fits over a square window.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use super::camera::PointCloud;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Normals {
    pub width: usize,
    pub height: usize,
    /// Unit normals facing the camera; zero where invalid.
    pub normals: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

impl Normals {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Fits a plane to the valid points of each `window x window` neighbourhood.
/// A normal is produced only where at least half of the window is valid.
pub fn estimate_normals(cloud: &PointCloud, window: usize) -> Result<Normals> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!("normal window must be odd and >= 3, got {window}")));
    }
    let (w, h) = (cloud.width, cloud.height);
    let r = (window / 2) as isize;
    let need = (window * window).div_ceil(2);
    let mut normals = vec![[0.0; 3]; w * h];
    let mut valid = vec![false; w * h];
    let mut nbrs: Vec<Vector3<f64>> = Vec::with_capacity(window * window);
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            if !cloud.valid[idx] {
                continue;
            }
            nbrs.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if cloud.valid[j] {
                        nbrs.push(Vector3::from(cloud.points[j]));
                    }
                }
            }
            if nbrs.len() < need {
                continue;
            }
            let centroid = nbrs.iter().sum::<Vector3<f64>>() / nbrs.len() as f64;
            let mut cov = Matrix3::zeros();
            for p in &nbrs {
                let d = p - centroid;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let k = eig.eigenvalues.imin();
            let mut n: Vector3<f64> = eig.eigenvectors.column(k).into_owned();
            let norm = n.norm();
            if !(norm > 0.0) || !n.iter().all(|v| v.is_finite()) {
                continue;
            }
            n /= norm;
            if n.dot(&Vector3::from(cloud.points[idx])) > 0.0 {
                n = -n;
            }
            normals[idx] = [n.x, n.y, n.z];
            valid[idx] = true;
        }
    }
    Ok(Normals {
        width: w,
        height: h,
        normals,
        valid,
    })
}
