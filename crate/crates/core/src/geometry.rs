//! Planar geometry used by annotation digitization and pen segmentation:
//! an exact nearest-neighbour k-d tree, convex hulls, minimum-area bounding
//! rectangles and convex polygon rasterization.

pub type Point = (f64, f64);

/// Static 2-D k-d tree over a point set; queries return the exact nearest
/// Euclidean neighbour (ties resolved toward the lowest input index).
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Point>,
    // Permutation of point indices laid out as an implicit balanced tree.
    order: Vec<usize>,
}

impl KdTree {
    pub fn new(points: Vec<Point>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        build(&points, &mut order, 0);
        KdTree { points, order }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Point {
        self.points[i]
    }

    /// Index and squared distance of the nearest point.
    pub fn nearest(&self, q: Point) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, self.order.len(), 0, q, &mut best);
        Some(best)
    }

    fn search(&self, lo: usize, hi: usize, depth: usize, q: Point, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = self.points[idx];
        let d2 = sq_dist(p, q);
        if d2 < best.1 || (d2 == best.1 && idx < best.0) {
            *best = (idx, d2);
        }
        let diff = if depth % 2 == 0 { q.0 - p.0 } else { q.1 - p.1 };
        let (first, second) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(first.0, first.1, depth + 1, q, best);
        if diff * diff <= best.1 {
            self.search(second.0, second.1, depth + 1, q, best);
        }
    }
}

fn build(points: &[Point], order: &mut [usize], depth: usize) {
    if order.len() <= 1 {
        return;
    }
    let mid = order.len() / 2;
    let key = |i: &usize| {
        let p = points[*i];
        if depth % 2 == 0 {
            (p.0, p.1, *i)
        } else {
            (p.1, p.0, *i)
        }
    };
    order.select_nth_unstable_by(mid, |a, b| {
        key(a).partial_cmp(&key(b)).expect("finite coordinates")
    });
    let (left, right) = order.split_at_mut(mid);
    build(points, left, depth + 1);
    build(points, &mut right[1..], depth + 1);
}

#[inline]
pub fn sq_dist(a: Point, b: Point) -> f64 {
    let (dx, dy) = (a.0 - b.0, a.1 - b.1);
    dx * dx + dy * dy
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull of integer points (Andrew's monotone chain), counter-clockwise
/// in a y-up frame, without collinear points. Degenerate inputs return one
/// or two points.
pub fn convex_hull(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let mut lower: Vec<(i64, i64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i64, i64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Side lengths `(short, long)` of the minimum-area enclosing rectangle of a
/// convex polygon, found by testing every hull edge direction.
pub fn min_area_rect_sides(hull: &[(f64, f64)]) -> (f64, f64) {
    match hull.len() {
        0 | 1 => return (0.0, 0.0),
        2 => return (0.0, sq_dist(hull[0], hull[1]).sqrt()),
        _ => {}
    }
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        let len = sq_dist(a, b).sqrt();
        if len == 0.0 {
            continue;
        }
        let (ux, uy) = ((b.0 - a.0) / len, (b.1 - a.1) / len);
        let (mut min_u, mut max_u, mut min_v, mut max_v) = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        for &p in hull {
            let u = p.0 * ux + p.1 * uy;
            let v = -p.0 * uy + p.1 * ux;
            min_u = min_u.min(u);
            max_u = max_u.max(u);
            min_v = min_v.min(v);
            max_v = max_v.max(v);
        }
        let (su, sv) = (max_u - min_u, max_v - min_v);
        let area = su * sv;
        if area < best.0 {
            best = (area, su.min(sv), su.max(sv));
        }
    }
    (best.1, best.2)
}

/// Shorter side of the minimum-area rectangle enclosing a set of pixels,
/// treating each pixel as a unit square.
pub fn pixel_set_width(pixels: &[(usize, usize)]) -> f64 {
    let mut corners = Vec::with_capacity(pixels.len() * 4);
    for &(x, y) in pixels {
        let (x, y) = (x as i64, y as i64);
        corners.extend_from_slice(&[(x, y), (x + 1, y), (x, y + 1), (x + 1, y + 1)]);
    }
    let hull: Vec<(f64, f64)> = convex_hull(&corners)
        .into_iter()
        .map(|(x, y)| (x as f64, y as f64))
        .collect();
    min_area_rect_sides(&hull).0
}

/// Distance from `p` to segment `ab`.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return sq_dist(p, a).sqrt();
    }
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    sq_dist(p, (a.0 + t * dx, a.1 + t * dy)).sqrt()
}

/// Grid cells of a `width`×`height` raster whose centres lie inside the
/// convex hull (integer cell coordinates as vertices) or within half a cell
/// of its boundary. Works for degenerate hulls of one or two vertices.
pub fn rasterize_hull(hull: &[(i64, i64)], width: usize, height: usize) -> Vec<(usize, usize)> {
    if hull.is_empty() || width == 0 || height == 0 {
        return Vec::new();
    }
    let verts: Vec<Point> = hull.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
    let min_x = hull.iter().map(|p| p.0).min().unwrap().max(0);
    let max_x = hull
        .iter()
        .map(|p| p.0)
        .max()
        .unwrap()
        .min(width as i64 - 1);
    let min_y = hull.iter().map(|p| p.1).min().unwrap().max(0);
    let max_y = hull
        .iter()
        .map(|p| p.1)
        .max()
        .unwrap()
        .min(height as i64 - 1);
    let mut out = Vec::new();
    if min_x > max_x || min_y > max_y {
        return out;
    }
    let n = verts.len();
    for y in min_y..=max_y {
        for x in min_x..=max_x {
            let p = (x as f64, y as f64);
            let inside = if n >= 3 {
                (0..n).all(|i| {
                    let a = verts[i];
                    let b = verts[(i + 1) % n];
                    let cr = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
                    cr >= 0.0
                })
            } else {
                false
            };
            let near = inside
                || (0..n).any(|i| point_segment_distance(p, verts[i], verts[(i + 1) % n]) <= 0.5);
            if near {
                out.push((x as usize, y as usize));
            }
        }
    }
    out
}
