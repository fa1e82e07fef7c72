use log::warn;

use super::frame::PolygonLabel;

/// Even-odd test with the half-open crossing rule. Each edge is evaluated
/// with its endpoints in a canonical order so that an edge traversed twice
/// in opposite directions always contributes two identical crossings.
pub fn point_in_polygon(vertices: &[[f64; 2]], px: f64, py: f64) -> bool {
    let n = vertices.len();
    let mut inside = false;
    for i in 0..n {
        let (mut a, mut b) = (vertices[i], vertices[(i + 1) % n]);
        if (a[1], a[0]) > (b[1], b[0]) {
            std::mem::swap(&mut a, &mut b);
        }
        if (a[1] > py) != (b[1] > py) {
            let x = a[0] + (py - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if px < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Mask of pixels whose centre lies inside any polygon.
pub fn rasterize(polygons: &[PolygonLabel], width: usize, height: usize) -> Vec<bool> {
    let mut mask = vec![false; width * height];
    for poly in polygons {
        if poly.is_degenerate() {
            warn!("skipping degenerate polygon with {} vertices", poly.vertices.len());
            continue;
        }
        fill(&mut mask, poly, width, height);
    }
    mask
}

/// Mask of a single polygon (empty when degenerate).
pub fn rasterize_one(poly: &PolygonLabel, width: usize, height: usize) -> Vec<bool> {
    let mut mask = vec![false; width * height];
    if !poly.is_degenerate() {
        fill(&mut mask, poly, width, height);
    }
    mask
}

fn fill(mask: &mut [bool], poly: &PolygonLabel, width: usize, height: usize) {
    let v = &poly.vertices;
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in v {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let xs = (x0 - 0.5).ceil().max(0.0) as usize;
    let ys = (y0 - 0.5).ceil().max(0.0) as usize;
    let xe = ((x1 - 0.5).floor() + 1.0).clamp(0.0, width as f64) as usize;
    let ye = ((y1 - 0.5).floor() + 1.0).clamp(0.0, height as f64) as usize;
    for y in ys..ye {
        for x in xs..xe {
            if point_in_polygon(v, x as f64 + 0.5, y as f64 + 0.5) {
                mask[y * width + x] = true;
            }
        }
    }
}
