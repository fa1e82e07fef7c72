//! Ray-cast synthetic corpus: a pitched camera over a floor with an
//! optional back wall and box/cylinder objects.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::contour::mask_to_polygons;
use super::frame::{ColorImage, LabeledFrame, PolygonLabel};
use crate::error::{Error, Result};
use crate::hha::{encode_frame, DepthImage, HhaConfig, Intrinsics};
use crate::rng::{stream, Rng};

/// Objects whose top lies below this height are trip hazards.
pub const TRIP_HEIGHT_M: f64 = 0.5;

pub fn is_trip(top_height_m: f64) -> bool {
    top_height_m < TRIP_HEIGHT_M
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub focal_px: f64,
    pub camera_height_m: f64,
    pub pitch_deg: [f64; 2],
    pub groups: usize,
    pub objects_per_frame: [usize; 2],
    /// Relative frequency of trip boxes, flat strips, floor-coloured boxes,
    /// standing tall objects and tall objects lying down.
    pub kind_weights: [f64; 5],
    pub object_distance_m: [f64; 2],
    pub wall_probability: f64,
    pub wall_distance_m: [f64; 2],
    pub floor_texture: i32,
    pub depth_noise_base_m: f64,
    pub depth_noise_rel: f64,
    pub speckle: f64,
    pub z_max_m: f64,
    pub hha: HhaConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 48,
            focal_px: 55.0,
            camera_height_m: 1.8,
            pitch_deg: [20.0, 30.0],
            groups: 4,
            objects_per_frame: [3, 6],
            kind_weights: [0.25, 0.25, 0.2, 0.2, 0.1],
            object_distance_m: [1.9, 4.2],
            wall_probability: 0.5,
            wall_distance_m: [4.5, 7.0],
            floor_texture: 6,
            depth_noise_base_m: 0.005,
            depth_noise_rel: 0.01,
            speckle: 0.02,
            z_max_m: 5.0,
            hha: HhaConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.width >= 8
            && self.height >= 8
            && self.focal_px > 0.0
            && self.camera_height_m > 0.0
            && self.pitch_deg[0] <= self.pitch_deg[1]
            && self.groups >= 1
            && self.objects_per_frame[0] <= self.objects_per_frame[1]
            && self.kind_weights.iter().all(|&w| w >= 0.0)
            && self.kind_weights.iter().sum::<f64>() > 0.0
            && self.object_distance_m[0] > 0.0
            && self.object_distance_m[0] <= self.object_distance_m[1]
            && (0.0..=1.0).contains(&self.wall_probability)
            && (0.0..1.0).contains(&self.speckle)
            && self.z_max_m > 0.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid synthetic config {self:?}")));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.focal_px,
            fy: self.focal_px,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    TripBox,
    FlatStrip,
    FloorColouredBox,
    Tall,
    Lying,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    /// Extents along its local x, y (vertical) and z axes, rotated by `yaw`
    /// radians about the vertical.
    Box { size: [f64; 3], yaw: f64 },
    Cylinder { radius: f64, height: f64 },
}

impl Shape {
    pub fn top(&self) -> f64 {
        match *self {
            Shape::Box { size, .. } => size[1],
            Shape::Cylinder { height, .. } => height,
        }
    }

    fn footprint_radius(&self) -> f64 {
        match *self {
            Shape::Box { size, .. } => 0.5 * (size[0].hypot(size[2])),
            Shape::Cylinder { radius, .. } => radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ObjectKind,
    pub shape: Shape,
    /// Footprint centre on the floor: lateral offset and forward distance.
    pub position: [f64; 2],
    pub color: [u8; 3],
    /// Drawn with the floor's colour and texture and no shading.
    pub camouflaged: bool,
}

impl SceneObject {
    pub fn is_trip(&self) -> bool {
        is_trip(self.shape.top())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub pitch_deg: f64,
    pub camera_height_m: f64,
    pub floor_color: [u8; 3],
    pub wall: Option<(f64, [u8; 3])>,
    pub objects: Vec<SceneObject>,
}

/// Render-time truth retained for oracle checks.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderTruth {
    /// Up axis in camera coordinates.
    pub up: [f64; 3],
    /// Floor height relative to the camera along `up`.
    pub ground_height_m: f64,
    /// Noise-free z-depth per pixel (infinite where nothing is hit).
    pub clean_depth_m: Vec<f64>,
    /// Per-pixel surface: `None` for sky, `Some(None)` floor or wall,
    /// `Some(Some(i))` object `i`.
    pub surface: Vec<Option<Option<usize>>>,
    pub trip_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub frame: LabeledFrame,
    pub scene: Scene,
    pub truth: RenderTruth,
}

struct Hit {
    t: f64,
    normal: [f64; 3],
    object: Option<usize>,
}

fn ray_box(o: [f64; 3], d: [f64; 3], centre: [f64; 2], size: [f64; 3], yaw: f64) -> Option<(f64, [f64; 3])> {
    let (s, c) = yaw.sin_cos();
    // world -> local: rotate by -yaw about the vertical
    let to_local = |v: [f64; 3]| [c * v[0] - s * v[2], v[1], s * v[0] + c * v[2]];
    let lo = to_local([o[0] - centre[0], o[1] - size[1] / 2.0, o[2] - centre[1]]);
    let ld = to_local(d);
    let half = [size[0] / 2.0, size[1] / 2.0, size[2] / 2.0];
    let (mut tmin, mut tmax) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut axis = 0;
    let mut sign = 1.0;
    for a in 0..3 {
        if ld[a].abs() < 1e-12 {
            if lo[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let t1 = (-half[a] - lo[a]) / ld[a];
        let t2 = (half[a] - lo[a]) / ld[a];
        let (near, far) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if near > tmin {
            tmin = near;
            axis = a;
            sign = if ld[a] > 0.0 { -1.0 } else { 1.0 };
        }
        tmax = tmax.min(far);
    }
    if tmin > tmax || tmin <= 1e-9 {
        return None;
    }
    let mut ln = [0.0; 3];
    ln[axis] = sign;
    // local -> world
    let n = [c * ln[0] + s * ln[2], ln[1], -s * ln[0] + c * ln[2]];
    Some((tmin, n))
}

fn ray_cylinder(o: [f64; 3], d: [f64; 3], centre: [f64; 2], radius: f64, height: f64) -> Option<(f64, [f64; 3])> {
    let mut best: Option<(f64, [f64; 3])> = None;
    let (px, pz) = (o[0] - centre[0], o[2] - centre[1]);
    let a = d[0] * d[0] + d[2] * d[2];
    if a > 1e-12 {
        let b = 2.0 * (px * d[0] + pz * d[2]);
        let cc = px * px + pz * pz - radius * radius;
        let disc = b * b - 4.0 * a * cc;
        if disc >= 0.0 {
            let t = (-b - disc.sqrt()) / (2.0 * a);
            let y = o[1] + t * d[1];
            if t > 1e-9 && (0.0..=height).contains(&y) {
                let (hx, hz) = (px + t * d[0], pz + t * d[2]);
                best = Some((t, [hx / radius, 0.0, hz / radius]));
            }
        }
    }
    if d[1].abs() > 1e-12 {
        let t = (height - o[1]) / d[1];
        let (hx, hz) = (px + t * d[0], pz + t * d[2]);
        if t > 1e-9 && hx * hx + hz * hz <= radius * radius && best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, [0.0, 1.0, 0.0]));
        }
    }
    best
}

fn camera_axes(pitch_deg: f64) -> ([f64; 3], [f64; 3], [f64; 3]) {
    let (s, c) = pitch_deg.to_radians().sin_cos();
    ([1.0, 0.0, 0.0], [0.0, -c, -s], [0.0, -s, c])
}

/// Camera-frame up axis for a camera pitched down by `pitch_deg`.
pub fn camera_up(pitch_deg: f64) -> [f64; 3] {
    let (s, c) = pitch_deg.to_radians().sin_cos();
    [0.0, -c, -s]
}

fn cast(scene: &Scene, d: [f64; 3]) -> Option<Hit> {
    let o = [0.0, scene.camera_height_m, 0.0];
    let mut best: Option<Hit> = None;
    let mut offer = |t: f64, normal: [f64; 3], object: Option<usize>| {
        if best.as_ref().is_none_or(|b| t < b.t) {
            best = Some(Hit { t, normal, object });
        }
    };
    if d[1] < 0.0 {
        offer(-o[1] / d[1], [0.0, 1.0, 0.0], None);
    }
    if let Some((dist, _)) = scene.wall {
        if d[2] > 0.0 {
            offer(dist / d[2], [0.0, 0.0, -1.0], None);
        }
    }
    for (i, obj) in scene.objects.iter().enumerate() {
        let hit = match obj.shape {
            Shape::Box { size, yaw } => ray_box(o, d, obj.position, size, yaw),
            Shape::Cylinder { radius, height } => ray_cylinder(o, d, obj.position, radius, height),
        };
        if let Some((t, n)) = hit {
            offer(t, n, Some(i));
        }
    }
    best
}

fn texture(rng: &mut Rng, amp: i32) -> i32 {
    if amp == 0 {
        0
    } else {
        rng.random_range(-amp..=amp)
    }
}

fn add(c: [u8; 3], delta: i32, shade: f64) -> [u8; 3] {
    c.map(|v| ((f64::from(v) * shade).round() as i32 + delta).clamp(0, 255) as u8)
}

/// Renders a scene. `rng` drives texture and sensor noise only.
pub fn render_scene(scene: &Scene, cfg: &SynthConfig, frame_id: &str, floor: &str, rng: &mut Rng) -> Result<RenderedFrame> {
    cfg.validate()?;
    let k = cfg.intrinsics();
    let (w, h) = (cfg.width, cfg.height);
    let n = w * h;
    let (right, down, fwd) = camera_axes(scene.pitch_deg);
    let mut color = vec![0u8; 3 * n];
    let mut clean = vec![f64::INFINITY; n];
    let mut surface = vec![None; n];
    let mut object_at: Vec<Option<usize>> = vec![None; n];
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut depth_mm = vec![0u16; n];
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let (xc, yc) = ((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy);
            let d = [0, 1, 2].map(|a| xc * right[a] + yc * down[a] + fwd[a]);
            let tex = texture(rng, cfg.floor_texture);
            let Some(hit) = cast(scene, d) else {
                color[3 * i..3 * i + 3].copy_from_slice(&[200, 210, 225]);
                continue;
            };
            clean[i] = hit.t;
            surface[i] = Some(hit.object);
            object_at[i] = hit.object;
            let lambert = 0.8 + 0.2 * hit.normal[1] - 0.1 * hit.normal[2].abs();
            let px = match hit.object {
                None if hit.normal[1] > 0.5 => add(scene.floor_color, tex, 1.0),
                None => add(scene.wall.map_or([180; 3], |w| w.1), tex / 2, 1.0),
                Some(j) => {
                    let obj = &scene.objects[j];
                    if obj.camouflaged {
                        add(scene.floor_color, tex, 1.0)
                    } else {
                        add(obj.color, tex / 2, lambert)
                    }
                }
            };
            color[3 * i..3 * i + 3].copy_from_slice(&px);
            let sigma = cfg.depth_noise_base_m + cfg.depth_noise_rel * hit.t;
            let z = hit.t + sigma * noise.sample(rng);
            let speckled = rng.random_bool(cfg.speckle);
            if !speckled && z > 0.0 && z <= cfg.z_max_m {
                depth_mm[i] = (z * 1000.0).round().clamp(1.0, 65535.0) as u16;
            }
        }
    }
    let mut polygons: Vec<PolygonLabel> = Vec::new();
    let mut trip_mask = vec![false; n];
    for (j, obj) in scene.objects.iter().enumerate() {
        if !obj.is_trip() {
            continue;
        }
        let mask: Vec<bool> = object_at.iter().map(|&o| o == Some(j)).collect();
        for (t, &m) in trip_mask.iter_mut().zip(&mask) {
            *t |= m;
        }
        polygons.extend(mask_to_polygons(&mask, w, h));
    }
    let depth = DepthImage::new(w, h, depth_mm, k)?;
    let hha = encode_frame(&depth, &cfg.hha).ok().map(|(img, _)| img);
    let frame = LabeledFrame {
        frame_id: frame_id.to_string(),
        floor: floor.to_string(),
        color: ColorImage::new(w, h, color)?,
        depth: Some(depth),
        hha,
        polygons,
    };
    Ok(RenderedFrame {
        frame,
        scene: scene.clone(),
        truth: RenderTruth {
            up: camera_up(scene.pitch_deg),
            ground_height_m: -scene.camera_height_m,
            clean_depth_m: clean,
            surface,
            trip_mask,
        },
    })
}

fn uniform(rng: &mut Rng, r: [f64; 2]) -> f64 {
    if r[0] >= r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn palette(rng: &mut Rng, colours: &[[u8; 3]], amp: i32) -> [u8; 3] {
    let c = colours[rng.random_range(0..colours.len())];
    jitter(rng, c, amp)
}

fn contrast(a: [u8; 3], b: [u8; 3]) -> i32 {
    (0..3).map(|c| (i32::from(a[c]) - i32::from(b[c])).abs()).max().unwrap_or(0)
}

const STRIP_COLOURS: [[u8; 3]; 5] = [[210, 40, 35], [230, 200, 30], [240, 240, 235], [30, 60, 200], [240, 120, 20]];
const BOX_COLOURS: [[u8; 3]; 4] = [[150, 95, 45], [120, 75, 40], [180, 120, 60], [100, 60, 30]];
const TALL_COLOURS: [[u8; 3]; 4] = [[50, 140, 60], [110, 60, 150], [40, 110, 110], [150, 50, 110]];

fn jitter(rng: &mut Rng, c: [u8; 3], amp: i32) -> [u8; 3] {
    c.map(|v| (i32::from(v) + rng.random_range(-amp..=amp)).clamp(0, 255) as u8)
}

/// Floor colour of a scene group: a mid grey with a slight tint.
pub fn group_floor_color(seed: u64, group: usize) -> [u8; 3] {
    let mut rng = stream(seed, &format!("synth/group{group}"));
    let level = rng.random_range(105..=150);
    [0; 3].map(|_| (level + rng.random_range(-6..=6)) as u8)
}

fn sample_kind(rng: &mut Rng, weights: &[f64; 5]) -> ObjectKind {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random_range(0.0..total);
    let kinds = [
        ObjectKind::TripBox,
        ObjectKind::FlatStrip,
        ObjectKind::FloorColouredBox,
        ObjectKind::Tall,
        ObjectKind::Lying,
    ];
    for (k, &w) in kinds.iter().zip(weights) {
        if x < w {
            return *k;
        }
        x -= w;
    }
    ObjectKind::Tall
}

fn sample_object(rng: &mut Rng, kind: ObjectKind, floor_color: [u8; 3]) -> (Shape, [u8; 3], bool) {
    let yaw = rng.random_range(0.0..std::f64::consts::PI);
    match kind {
        ObjectKind::TripBox => {
            let size = [rng.random_range(0.3..0.8), rng.random_range(0.1..0.45), rng.random_range(0.3..0.8)];
            (Shape::Box { size, yaw }, palette(rng, &BOX_COLOURS, 15), false)
        }
        ObjectKind::FlatStrip => {
            let size = [rng.random_range(0.6..1.2), rng.random_range(0.002..0.003), rng.random_range(0.2..0.45)];
            let mut c = palette(rng, &STRIP_COLOURS, 10);
            while contrast(c, floor_color) < 50 {
                c = palette(rng, &STRIP_COLOURS, 10);
            }
            (Shape::Box { size, yaw }, c, false)
        }
        ObjectKind::FloorColouredBox => {
            let size = [rng.random_range(0.35..0.8), rng.random_range(0.15..0.45), rng.random_range(0.35..0.8)];
            (Shape::Box { size, yaw }, floor_color, true)
        }
        ObjectKind::Tall => {
            let c = palette(rng, &TALL_COLOURS, 15);
            let height = rng.random_range(0.8..1.9);
            if rng.random_bool(0.5) {
                (Shape::Cylinder { radius: rng.random_range(0.15..0.35), height }, c, false)
            } else {
                let size = [rng.random_range(0.3..0.6), height, rng.random_range(0.2..0.4)];
                (Shape::Box { size, yaw }, c, false)
            }
        }
        ObjectKind::Lying => {
            let c = palette(rng, &TALL_COLOURS, 15);
            let size = [rng.random_range(0.8..1.9), rng.random_range(0.2..0.4), rng.random_range(0.3..0.6)];
            (Shape::Box { size, yaw }, c, false)
        }
    }
}

/// Samples a random scene for one frame.
pub fn sample_scene(rng: &mut Rng, cfg: &SynthConfig, floor_color: [u8; 3]) -> Scene {
    let pitch = uniform(rng, cfg.pitch_deg);
    let wall = rng
        .random_bool(cfg.wall_probability)
        .then(|| (uniform(rng, cfg.wall_distance_m), jitter(rng, [200, 190, 170], 15)));
    let count = rng.random_range(cfg.objects_per_frame[0]..=cfg.objects_per_frame[1]);
    let half_fov = (cfg.width as f64 / 2.0) / cfg.focal_px;
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut attempts = 0;
    while objects.len() < count && attempts < 200 {
        attempts += 1;
        let kind = sample_kind(rng, &cfg.kind_weights);
        let (shape, color, camouflaged) = sample_object(rng, kind, floor_color);
        let z = uniform(rng, cfg.object_distance_m);
        let x = rng.random_range(-0.8..0.8) * half_fov * z;
        if let Some((wall_z, _)) = wall {
            if z + shape.footprint_radius() > wall_z {
                continue;
            }
        }
        let r = shape.footprint_radius();
        let clear = objects.iter().all(|o| {
            let (dx, dz) = (o.position[0] - x, o.position[1] - z);
            dx.hypot(dz) > r + o.shape.footprint_radius() + 0.05
        });
        if clear {
            objects.push(SceneObject {
                kind,
                shape,
                position: [x, z],
                color,
                camouflaged,
            });
        }
    }
    Scene {
        pitch_deg: pitch,
        camera_height_m: cfg.camera_height_m,
        floor_color,
        wall,
        objects,
    }
}

pub fn group_name(group: usize) -> String {
    format!("scene{group}")
}

/// Generates `n_frames` frames, frame `i` belonging to scene group
/// `i % groups`. Every frame draws from its own seeded stream.
pub fn synth_generate(seed: u64, n_frames: usize, cfg: &SynthConfig) -> Result<Vec<RenderedFrame>> {
    if n_frames == 0 {
        return Err(Error::InvalidArgument("n_frames must be at least 1".into()));
    }
    cfg.validate()?;
    (0..n_frames)
        .into_par_iter()
        .map(|i| {
            let group = i % cfg.groups;
            let mut rng = stream(seed, &format!("synth/frame{i}"));
            let scene = sample_scene(&mut rng, cfg, group_floor_color(seed, group));
            render_scene(&scene, cfg, &format!("f{i:04}"), &group_name(group), &mut rng)
        })
        .collect()
}
