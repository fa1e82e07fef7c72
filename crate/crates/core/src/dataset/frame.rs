use serde::{Deserialize, Serialize};

use super::raster::rasterize;
use crate::error::{Error, Result};
use crate::fusion::{Modality, NetInputs};
use crate::hha::{validity_mask, DepthImage, HhaImage};
use crate::tensor::Tensor;

/// Depth range mapped onto 8 bits for the raw depth modality.
pub const DEPTH_MODALITY_MAX_M: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelClass {
    Trip,
}

/// Polygon annotation in pixel coordinates (pixel `(x, y)` spans
/// `[x, x+1) x [y, y+1)`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonLabel {
    pub class: LabelClass,
    pub vertices: Vec<[f64; 2]>,
}

impl PolygonLabel {
    pub fn trip(vertices: Vec<[f64; 2]>) -> Self {
        Self {
            class: LabelClass::Trip,
            vertices,
        }
    }

    /// Fewer than three distinct vertices.
    pub fn is_degenerate(&self) -> bool {
        let mut distinct: Vec<[f64; 2]> = Vec::new();
        for v in &self.vertices {
            if !distinct.contains(v) {
                distinct.push(*v);
                if distinct.len() >= 3 {
                    return false;
                }
            }
        }
        true
    }

    /// Clamps every vertex into `[0, width] x [0, height]`.
    pub fn clamped(&self, width: usize, height: usize) -> Self {
        Self {
            class: self.class,
            vertices: self
                .vertices
                .iter()
                .map(|v| [v[0].clamp(0.0, width as f64), v[1].clamp(0.0, height as f64)])
                .collect(),
        }
    }
}

/// 8-bit interleaved RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Shape(format!("{} bytes for a {width}x{height} colour image", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub frame_id: String,
    pub floor: String,
    pub color: ColorImage,
    pub depth: Option<DepthImage>,
    pub hha: Option<HhaImage>,
    pub polygons: Vec<PolygonLabel>,
}

fn normalise(v: u8) -> f32 {
    (f32::from(v) - 127.5) / 127.5
}

/// Depth in `(0, 5 m]` scaled to `1..=255`; missing or out of range is 0.
pub fn depth_byte(depth_mm: u16) -> u8 {
    let max_mm = DEPTH_MODALITY_MAX_M * 1000.0;
    let d = f64::from(depth_mm);
    if depth_mm == 0 || d > max_mm {
        0
    } else {
        ((d / max_mm) * 255.0).round().max(1.0) as u8
    }
}

impl LabeledFrame {
    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.width(), self.height());
        if let Some(d) = &self.depth {
            if (d.width, d.height) != (w, h) {
                return Err(Error::Shape(format!(
                    "frame {}: colour {w}x{h} but depth {}x{}",
                    self.frame_id, d.width, d.height
                )));
            }
        }
        if let Some(hha) = &self.hha {
            if (hha.width, hha.height) != (w, h) {
                return Err(Error::Shape(format!(
                    "frame {}: colour {w}x{h} but hha {}x{}",
                    self.frame_id, hha.width, hha.height
                )));
            }
        }
        Ok(())
    }

    pub fn trip_mask(&self) -> Vec<bool> {
        rasterize(&self.polygons, self.width(), self.height())
    }

    /// Depth validity (nonzero and within 5 m); all false without depth.
    pub fn depth_valid(&self) -> Vec<bool> {
        match &self.depth {
            Some(d) => validity_mask(d, DEPTH_MODALITY_MAX_M),
            None => vec![false; self.width() * self.height()],
        }
    }

    pub fn has_modality(&self, m: Modality) -> bool {
        match m {
            Modality::Rgb => true,
            Modality::Depth => self.depth.is_some(),
            Modality::Hha => self.hha.is_some(),
        }
    }

    /// Normalised `3 x H x W` network input for one modality.
    pub fn modality_tensor(&self, m: Modality) -> Result<Tensor<f32>> {
        let (w, h) = (self.width(), self.height());
        let n = w * h;
        let mut out = vec![0f32; 3 * n];
        match m {
            Modality::Rgb => {
                for i in 0..n {
                    for c in 0..3 {
                        out[c * n + i] = normalise(self.color.data[3 * i + c]);
                    }
                }
            }
            Modality::Depth => {
                let d = self
                    .depth
                    .as_ref()
                    .ok_or_else(|| Error::MissingModality(format!("depth for frame {}", self.frame_id)))?;
                for (i, &mm) in d.depth_mm.iter().enumerate() {
                    let v = normalise(depth_byte(mm));
                    for c in 0..3 {
                        out[c * n + i] = v;
                    }
                }
            }
            Modality::Hha => {
                let hha = self
                    .hha
                    .as_ref()
                    .ok_or_else(|| Error::MissingModality(format!("hha for frame {}", self.frame_id)))?;
                for (o, &v) in out.iter_mut().zip(&hha.data) {
                    *o = normalise(v);
                }
            }
        }
        Tensor::from_vec(&[3, h, w], out)
    }

    /// Inputs for a network over `modalities`, in order.
    pub fn net_inputs(&self, modalities: &[Modality]) -> Result<NetInputs<f32>> {
        let tensors = modalities
            .iter()
            .map(|&m| self.modality_tensor(m))
            .collect::<Result<Vec<_>>>()?;
        Ok(NetInputs {
            modalities: tensors,
            depth_valid: self.depth.as_ref().map(|_| self.depth_valid()),
        })
    }
}
