use serde::{Deserialize, Serialize};

use super::metrics::ObjectCounts;
use crate::dataset::{label_components, rasterize_one, PolygonLabel};

/// Default fraction of an object's pixels that must be predicted trip.
pub const DEFAULT_THETA_DET: f64 = 0.5;

/// Ground-truth instances as pixel index lists.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GtObjects {
    pub objects: Vec<Vec<usize>>,
}

impl GtObjects {
    /// One instance per polygon; polygons covering no pixel centre are
    /// dropped.
    pub fn from_polygons(polygons: &[PolygonLabel], width: usize, height: usize) -> Self {
        let objects = polygons
            .iter()
            .map(|p| {
                rasterize_one(p, width, height)
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &m)| m.then_some(i))
                    .collect::<Vec<_>>()
            })
            .filter(|o| !o.is_empty())
            .collect();
        Self { objects }
    }

    /// 8-connected components of a mask.
    pub fn from_mask(mask: &[bool], width: usize, height: usize) -> Self {
        let (labels, count) = label_components(mask, width, height, true);
        let mut objects = vec![Vec::new(); count as usize];
        for (i, &l) in labels.iter().enumerate() {
            if l > 0 {
                objects[l as usize - 1].push(i);
            }
        }
        Self { objects }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub pixels: usize,
    pub hit_pixels: usize,
    pub fraction: f64,
    pub detected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectDetection {
    pub counts: ObjectCounts,
    pub records: Vec<ObjectRecord>,
}

impl ObjectDetection {
    pub fn fraction(&self) -> Option<f64> {
        self.counts.fraction()
    }
}

/// An object is detected when at least `theta` of its pixels are predicted
/// trip.
pub fn trip_object_detection(pred: &[bool], gt: &GtObjects, theta: f64) -> ObjectDetection {
    let records: Vec<ObjectRecord> = gt
        .objects
        .iter()
        .map(|o| {
            let hit = o.iter().filter(|&&i| pred[i]).count();
            let fraction = hit as f64 / o.len() as f64;
            ObjectRecord {
                pixels: o.len(),
                hit_pixels: hit,
                fraction,
                detected: fraction >= theta,
            }
        })
        .collect();
    ObjectDetection {
        counts: ObjectCounts {
            detected: records.iter().filter(|r| r.detected).count() as u64,
            total: records.len() as u64,
        },
        records,
    }
}
