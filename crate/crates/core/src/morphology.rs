//! Binary morphology with disk structuring elements, hole filling and
//! connected-component labelling.
//!
//! Disk operations go through an exact squared Euclidean distance transform,
//! so `dilate(m, r)` is precisely the union of disks `dx² + dy² <= r²` around
//! every set pixel, at O(n) cost independent of the radius.

use crate::raster::{BinaryMask, Grid};

/// Disk radius in mask pixels for a physical radius.
pub fn disk_radius_px(radius_um: f64, pixel_size_um: f64, downsample: u32) -> u32 {
    (radius_um / (pixel_size_um * downsample as f64))
        .round()
        .max(0.0) as u32
}

/// Offsets of a disk structuring element, `dx² + dy² <= r²`.
pub fn disk_offsets(radius: u32) -> Vec<(i32, i32)> {
    let r = radius as i32;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

const INF: f64 = 1e20;

// Lower envelope of parabolas for one row/column (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -INF;
    z[1] = INF;
    for q in 1..n {
        if f[q] >= INF {
            continue;
        }
        loop {
            let p = v[k];
            if f[p] >= INF {
                // An infinite parabola never wins; replace it outright.
                if k == 0 {
                    v[0] = q;
                    z[0] = -INF;
                    z[1] = INF;
                    break;
                }
                k -= 1;
                continue;
            }
            let s =
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = -INF;
                    z[1] = INF;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = INF;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = if f[p] >= INF {
            INF
        } else {
            let d = q as f64 - p as f64;
            d * d + f[p]
        };
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel.
/// Pixels with no seed anywhere get a very large value.
pub fn squared_distance_transform(seeds: &Grid<bool>) -> Grid<f64> {
    let (w, h) = (seeds.width(), seeds.height());
    let mut d: Vec<f64> = seeds
        .as_slice()
        .iter()
        .map(|&b| if b { 0.0 } else { INF })
        .collect();
    let n = w.max(h);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    // columns
    for x in 0..w {
        for y in 0..h {
            f[y] = d[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            d[y * w + x] = out[y];
        }
    }
    // rows
    for y in 0..h {
        f[..w].copy_from_slice(&d[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        d[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    Grid::from_vec(w, h, d).expect("same shape")
}

pub fn dilate(mask: &BinaryMask, radius: u32) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let d = squared_distance_transform(&mask.bits);
    let r2 = (radius as f64) * (radius as f64);
    BinaryMask::from_grid(d.map(|&v| v <= r2), mask.downsample)
}

/// Erosion; pixels outside the raster count as foreground, so objects
/// touching the border are not eaten from that side.
pub fn erode(mask: &BinaryMask, radius: u32) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    dilate(&mask.not(), radius).not()
}

pub fn close(mask: &BinaryMask, radius: u32) -> BinaryMask {
    erode(&dilate(mask, radius), radius)
}

pub fn open(mask: &BinaryMask, radius: u32) -> BinaryMask {
    dilate(&erode(mask, radius), radius)
}

/// Fills background regions (4-connected) that do not reach the border.
pub fn fill_holes(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let bits = mask.bits.as_slice();
    let mut reach = vec![false; w * h];
    let mut stack: Vec<usize> = Vec::new();
    let push = |i: usize, reach: &mut Vec<bool>, stack: &mut Vec<usize>| {
        if !bits[i] && !reach[i] {
            reach[i] = true;
            stack.push(i);
        }
    };
    for x in 0..w {
        push(x, &mut reach, &mut stack);
        if h > 0 {
            push((h - 1) * w + x, &mut reach, &mut stack);
        }
    }
    for y in 0..h {
        push(y * w, &mut reach, &mut stack);
        if w > 0 {
            push(y * w + w - 1, &mut reach, &mut stack);
        }
    }
    while let Some(i) = stack.pop() {
        let (x, y) = (i % w, i / w);
        if x > 0 {
            push(i - 1, &mut reach, &mut stack);
        }
        if x + 1 < w {
            push(i + 1, &mut reach, &mut stack);
        }
        if y > 0 {
            push(i - w, &mut reach, &mut stack);
        }
        if y + 1 < h {
            push(i + w, &mut reach, &mut stack);
        }
    }
    let data = reach.iter().map(|&r| !r).collect();
    BinaryMask::from_grid(
        Grid::from_vec(w, h, data).expect("same shape"),
        mask.downsample,
    )
}

/// One 8-connected component.
#[derive(Clone, Debug)]
pub struct Component {
    /// Linear pixel indices, in scanline order.
    pub pixels: Vec<usize>,
    pub min_x: usize,
    pub min_y: usize,
    pub max_x: usize,
    pub max_y: usize,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn centroid(&self, width: usize) -> (f64, f64) {
        let n = self.pixels.len() as f64;
        let (sx, sy) = self.pixels.iter().fold((0.0, 0.0), |(sx, sy), &i| {
            (sx + (i % width) as f64, sy + (i / width) as f64)
        });
        (sx / n, sy / n)
    }

    pub fn to_mask(&self, width: usize, height: usize, downsample: u32) -> BinaryMask {
        let mut m = BinaryMask::empty(width, height, downsample);
        let s = m.bits.as_mut_slice();
        for &i in &self.pixels {
            s[i] = true;
        }
        m
    }
}

/// 8-connected components, ordered by their first pixel in scanline order.
pub fn connected_components(mask: &BinaryMask) -> Vec<Component> {
    connected_components_grid(&mask.bits)
}

pub fn connected_components_grid(bits: &Grid<bool>) -> Vec<Component> {
    let (w, h) = (bits.width(), bits.height());
    let b = bits.as_slice();
    let mut seen = vec![false; w * h];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !b[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        let (mut min_x, mut min_y, mut max_x, mut max_y) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(i) = stack.pop() {
            pixels.push(i);
            let (x, y) = (i % w, i / w);
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
            let x0 = x.saturating_sub(1);
            let x1 = (x + 1).min(w - 1);
            let y0 = y.saturating_sub(1);
            let y1 = (y + 1).min(h - 1);
            for ny in y0..=y1 {
                for nx in x0..=x1 {
                    let j = ny * w + nx;
                    if b[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        pixels.sort_unstable();
        comps.push(Component {
            pixels,
            min_x,
            min_y,
            max_x,
            max_y,
        });
    }
    comps
}

/// Set pixels with at least one 4-neighbour that is unset or off-raster.
pub fn boundary_pixels(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !mask.get(x - 1, y)
                || !mask.get(x + 1, y)
                || !mask.get(x, y - 1)
                || !mask.get(x, y + 1);
            if edge {
                out.push((x, y));
            }
        }
    }
    out
}
