//! On-disk corpus layout:
//!
//! ```text
//! root/manifest.json            optional
//! root/intrinsics.json          optional, shared by every frame
//! root/<floor>/rgb/<id>.png     8-bit colour
//! root/<floor>/depth/<id>.png   16-bit depth in mm (optional per frame)
//! root/<floor>/labels/<id>.json {frame_id, polygons: [{class, vertices}]}
//! root/<floor>/hha/<id>.png     optional precomputed HHA
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use log::warn;
use serde::{Deserialize, Serialize};

use super::frame::{ColorImage, LabeledFrame, PolygonLabel};
use crate::error::{Error, Result};
use crate::hha::{DepthImage, HhaImage, Intrinsics};
use crate::json::{read_json, write_json};

pub const CORPUS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelFile {
    pub frame_id: String,
    pub polygons: Vec<PolygonLabel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame_id: String,
    pub floor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub source: String,
    pub seed: Option<u64>,
    pub config: Option<serde_json::Value>,
    pub frames: Vec<FrameEntry>,
    pub tool_version: String,
}

/// A frame that could not be loaded, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameIssue {
    pub floor: String,
    pub frame_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub frames: Vec<LabeledFrame>,
    pub issues: Vec<FrameIssue>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(e.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

pub fn load_color_png(path: &Path) -> Result<ColorImage> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    ColorImage::new(w, h, img.into_raw())
}

pub fn save_color_png(img: &ColorImage, path: &Path) -> Result<()> {
    let buf = ImageBuffer::<Rgb<u8>, _>::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| Error::Shape("colour buffer size".into()))?;
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Reads a 16-bit greyscale PNG as millimetres.
pub fn load_depth_png(path: &Path, intrinsics: Option<Intrinsics>) -> Result<DepthImage> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    if img.color() != image::ColorType::L16 {
        return Err(Error::Corpus(format!(
            "{}: depth must be 16-bit greyscale, found {:?}",
            path.display(),
            img.color()
        )));
    }
    let img = img.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let k = intrinsics.unwrap_or_else(|| Intrinsics::assumed(w, h));
    if (k.width, k.height) != (w, h) {
        return Err(Error::Shape(format!(
            "{}: depth is {w}x{h} but intrinsics describe {}x{}",
            path.display(),
            k.width,
            k.height
        )));
    }
    DepthImage::new(w, h, img.into_raw(), k)
}

pub fn save_depth_png(depth: &DepthImage, path: &Path) -> Result<()> {
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(depth.width as u32, depth.height as u32, depth.depth_mm.clone())
        .ok_or_else(|| Error::Shape("depth buffer size".into()))?;
    buf.save(path).map_err(|e| Error::image(path, e))
}

fn load_frame(floor_dir: &Path, floor: &str, id: &str, intrinsics: Option<Intrinsics>) -> Result<LabeledFrame> {
    let color = load_color_png(&floor_dir.join("rgb").join(format!("{id}.png")))?;
    let depth_path = floor_dir.join("depth").join(format!("{id}.png"));
    let depth = if depth_path.exists() {
        Some(load_depth_png(&depth_path, intrinsics)?)
    } else {
        None
    };
    let hha_path = floor_dir.join("hha").join(format!("{id}.png"));
    let hha = if hha_path.exists() {
        Some(HhaImage::load_png(&hha_path)?)
    } else {
        None
    };
    let labels: LabelFile = read_json(&floor_dir.join("labels").join(format!("{id}.json")))?;
    if labels.frame_id != id {
        return Err(Error::Corpus(format!("label file names frame `{}`", labels.frame_id)));
    }
    let (w, h) = (color.width, color.height);
    let frame = LabeledFrame {
        frame_id: id.to_string(),
        floor: floor.to_string(),
        color,
        depth,
        hha,
        polygons: labels.polygons.iter().map(|p| p.clamped(w, h)).collect(),
    };
    frame.validate()?;
    Ok(frame)
}

/// Loads every frame under `root`. Frames that fail to load are reported in
/// `issues` and skipped; an empty result is an error.
pub fn load_corpus(root: &Path) -> Result<Corpus> {
    let k_path = root.join("intrinsics.json");
    let intrinsics: Option<Intrinsics> = if k_path.exists() { Some(read_json(&k_path)?) } else { None };
    let mut frames = Vec::new();
    let mut issues = Vec::new();
    for floor_dir in sorted_entries(root)?.into_iter().filter(|p| p.join("rgb").is_dir()) {
        let floor = floor_dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        for rgb in sorted_entries(&floor_dir.join("rgb"))? {
            if rgb.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let id = rgb.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            match load_frame(&floor_dir, &floor, &id, intrinsics) {
                Ok(f) => frames.push(f),
                Err(e) => {
                    warn!("skipping frame {floor}/{id}: {e}");
                    issues.push(FrameIssue {
                        floor: floor.clone(),
                        frame_id: id,
                        message: e.to_string(),
                    });
                }
            }
        }
    }
    if frames.is_empty() {
        return Err(Error::Corpus(format!("no frames found under {}", root.display())));
    }
    Ok(Corpus { frames, issues })
}

/// Writes one frame in the corpus layout.
pub fn save_frame(root: &Path, frame: &LabeledFrame) -> Result<()> {
    let dir = root.join(&frame.floor);
    for sub in ["rgb", "depth", "labels", "hha"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let id = &frame.frame_id;
    save_color_png(&frame.color, &dir.join("rgb").join(format!("{id}.png")))?;
    if let Some(d) = &frame.depth {
        save_depth_png(d, &dir.join("depth").join(format!("{id}.png")))?;
    }
    if let Some(h) = &frame.hha {
        h.save_png(&dir.join("hha").join(format!("{id}.png")))?;
    }
    write_json(
        &dir.join("labels").join(format!("{id}.json")),
        &LabelFile {
            frame_id: id.clone(),
            polygons: frame.polygons.clone(),
        },
    )
}

/// Writes frames, shared intrinsics (taken from the first depth image) and
/// the manifest.
pub fn save_corpus(root: &Path, frames: &[LabeledFrame], manifest: &CorpusManifest) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for f in frames {
        save_frame(root, f)?;
    }
    if let Some(d) = frames.iter().find_map(|f| f.depth.as_ref()) {
        write_json(&root.join("intrinsics.json"), &d.intrinsics)?;
    }
    write_json(&root.join("manifest.json"), manifest)
}
