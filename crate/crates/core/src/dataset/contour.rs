use std::collections::{BTreeMap, VecDeque};

use super::frame::PolygonLabel;

/// 4-connected (or 8-connected) component labels; 0 = background,
/// components numbered from 1 in raster order of their first pixel.
pub fn label_components(mask: &[bool], width: usize, height: usize, eight: bool) -> (Vec<u32>, u32) {
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % width) as isize, (i / width) as isize);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if (dx == 0 && dy == 0) || (!eight && dx != 0 && dy != 0) {
                        continue;
                    }
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                        continue;
                    }
                    let j = ny as usize * width + nx as usize;
                    if mask[j] && labels[j] == 0 {
                        labels[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    (labels, next)
}

type Vertex = (i64, i64);

fn direction(a: Vertex, b: Vertex) -> u8 {
    match (b.0 - a.0, b.1 - a.1) {
        (1, 0) => 0,
        (0, 1) => 1,
        (-1, 0) => 2,
        _ => 3,
    }
}

/// Traces the pixel-edge boundary of one component (given as a mask) into
/// closed rectilinear loops. Edges run clockwise on screen with the
/// component on their right; at pinch vertices the rightmost turn is taken.
fn trace_loops(mask: &[bool], width: usize, height: usize) -> Vec<Vec<Vertex>> {
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height && mask[y as usize * width + x as usize];
    let mut out: BTreeMap<Vertex, Vec<Vertex>> = BTreeMap::new();
    for y in 0..height as i64 {
        for x in 0..width as i64 {
            if !inside(x, y) {
                continue;
            }
            if !inside(x, y - 1) {
                out.entry((x, y)).or_default().push((x + 1, y));
            }
            if !inside(x + 1, y) {
                out.entry((x + 1, y)).or_default().push((x + 1, y + 1));
            }
            if !inside(x, y + 1) {
                out.entry((x + 1, y + 1)).or_default().push((x, y + 1));
            }
            if !inside(x - 1, y) {
                out.entry((x, y + 1)).or_default().push((x, y));
            }
        }
    }
    let mut loops = Vec::new();
    while let Some((&start, _)) = out.iter().find(|(_, v)| !v.is_empty()) {
        let mut ring = vec![start];
        let mut cur = start;
        let mut next = out.get_mut(&start).expect("start").remove(0);
        loop {
            let dir = direction(cur, next);
            cur = next;
            if cur == start && out.get(&cur).map_or(true, Vec::is_empty) {
                break;
            }
            ring.push(cur);
            let cands = out.get_mut(&cur).expect("boundary edges form closed loops");
            // right turn, straight, left turn
            let pick = [(dir + 1) % 4, dir, (dir + 3) % 4]
                .iter()
                .find_map(|&d| cands.iter().position(|&c| direction(cur, c) == d))
                .unwrap_or(0);
            next = cands.remove(pick);
        }
        loops.push(simplify(ring));
    }
    loops
}

/// Drops vertices lying on a straight run.
fn simplify(ring: Vec<Vertex>) -> Vec<Vertex> {
    let n = ring.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (p, c, q) = (ring[(i + n - 1) % n], ring[i], ring[(i + 1) % n]);
        if direction(p, c) != direction(c, q) {
            out.push(c);
        }
    }
    if out.is_empty() {
        ring
    } else {
        out
    }
}

/// Converts a component mask into one polygon whose even-odd fill at pixel
/// centres reproduces the mask exactly. Extra loops (holes, pinched parts)
/// are spliced onto the first loop through doubled bridge edges, which
/// cancel under the even-odd rule.
pub fn mask_to_polygon(mask: &[bool], width: usize, height: usize) -> Option<PolygonLabel> {
    let loops = trace_loops(mask, width, height);
    let first = loops.first()?;
    let anchor = first[0];
    let mut verts: Vec<Vertex> = first.clone();
    for l in &loops[1..] {
        verts.push(anchor);
        verts.extend_from_slice(l);
        verts.push(l[0]);
    }
    if loops.len() > 1 {
        verts.push(anchor);
    }
    Some(PolygonLabel::trip(verts.into_iter().map(|(x, y)| [x as f64, y as f64]).collect()))
}

/// One polygon per 4-connected component of `mask`.
pub fn mask_to_polygons(mask: &[bool], width: usize, height: usize) -> Vec<PolygonLabel> {
    let (labels, count) = label_components(mask, width, height, false);
    (1..=count)
        .filter_map(|k| {
            let comp: Vec<bool> = labels.iter().map(|&l| l == k).collect();
            mask_to_polygon(&comp, width, height)
        })
        .collect()
}
