//! Handcrafted texture descriptors of a patch, used by the reference patch
//! classifier.
//!
//! Texture statistics are computed on a 2×2 box-averaged luminance image with
//! integer arithmetic, so the descriptor of a rotated or flipped patch is an
//! exact permutation of the original (see [`dihedral_action`]) up to float
//! summation order.

use crate::morphology::connected_components_grid;
use crate::patching::Dihedral;
use crate::raster::{Grid, RgbImage};
use crate::segmentation::{hue, otsu_threshold_values};

pub const N_FEATURES: usize = 42;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "mean_r",
    "std_r",
    "mean_g",
    "std_g",
    "mean_b",
    "std_b",
    "hue_0",
    "hue_1",
    "hue_2",
    "hue_3",
    "hue_4",
    "hue_5",
    "hue_6",
    "hue_7",
    "grad_mean",
    "grad_std",
    "tissue_frac",
    "blob_count_s1",
    "blob_mean_area_s1",
    "blob_std_area_s1",
    "blob_count_s2",
    "blob_mean_area_s2",
    "blob_std_area_s2",
    "blob_count_s4",
    "blob_mean_area_s4",
    "blob_std_area_s4",
    "cooc_contrast_h",
    "cooc_homogeneity_h",
    "cooc_contrast_v",
    "cooc_homogeneity_v",
    "lum_p05",
    "lum_p25",
    "lum_p50",
    "lum_p75",
    "lum_p95",
    "bright_frac",
    "lumen_frac",
    "lumen_count",
    "lumen_mean_area",
    "lumen_std_area",
    "lumen_max_area",
    "lumen_mean_fill",
];

// Luminance weights scaled by 1e4 so per-pixel luminance is an integer.
const LUM_W: [u32; 3] = [2989, 5870, 1140];
const LUM_SCALE: f64 = 1e4;
const BRIGHT_GRAY: f64 = 200.0;
const COOC_OFFSET: usize = 4;
const COOC_LEVELS: u64 = 16;

fn mean_std(n: u64, sum: u64, sum_sq: u128) -> (f64, f64) {
    if n == 0 {
        return (0.0, 0.0);
    }
    let var = (n as u128 * sum_sq - (sum as u128) * (sum as u128)) as f64 / (n as f64 * n as f64);
    (sum as f64 / n as f64, var.max(0.0).sqrt())
}

fn mean_std_f(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Integer luminance (scaled by 4e4) averaged over 2×2 blocks.
fn half_luminance(img: &RgbImage) -> Grid<u32> {
    let (w, h) = ((img.width() / 2) as usize, (img.height() / 2) as usize);
    let lum = |x: u32, y: u32| {
        let p = img.get_pixel(x, y).0;
        LUM_W[0] * p[0] as u32 + LUM_W[1] * p[1] as u32 + LUM_W[2] * p[2] as u32
    };
    Grid::from_fn(w, h, |x, y| {
        let (x, y) = (2 * x as u32, 2 * y as u32);
        lum(x, y) + lum(x + 1, y) + lum(x, y + 1) + lum(x + 1, y + 1)
    })
}

fn box_sum(g: &Grid<u32>, s: usize) -> Grid<u32> {
    if s == 1 {
        return g.clone();
    }
    let (w, h) = (g.width() / s, g.height() / s);
    Grid::from_fn(w, h, |x, y| {
        let mut acc = 0;
        for dy in 0..s {
            for dx in 0..s {
                acc += g.get(x * s + dx, y * s + dy);
            }
        }
        acc
    })
}

fn blob_stats(lum: &Grid<u32>, scale: usize) -> [f64; 3] {
    let g = box_sum(lum, scale);
    if g.is_empty() {
        return [0.0; 3];
    }
    let values: Vec<f64> = g.as_slice().iter().map(|&v| v as f64).collect();
    let Ok(t) = otsu_threshold_values(&values) else {
        return [0.0; 3];
    };
    let dark = g.map(|&v| v as f64 <= t);
    let areas: Vec<f64> = connected_components_grid(&dark)
        .iter()
        .map(|c| (c.area() * scale * scale) as f64)
        .collect();
    let (m, s) = mean_std_f(&areas);
    [areas.len() as f64, m, s]
}

/// Contrast and homogeneity of 16-level co-occurrence at offset `(dx, dy)`.
fn cooccurrence(lum: &Grid<u32>, dx: usize, dy: usize) -> [f64; 2] {
    let (w, h) = (lum.width(), lum.height());
    if w <= dx || h <= dy {
        return [0.0, 0.0];
    }
    let max = (4 * 255 * (LUM_W[0] + LUM_W[1] + LUM_W[2])) as u64 + 1;
    let q = |v: u32| v as u64 * COOC_LEVELS / max;
    let mut diff_hist = [0u64; COOC_LEVELS as usize];
    for y in 0..h - dy {
        for x in 0..w - dx {
            let a = q(lum.get(x, y));
            let b = q(lum.get(x + dx, y + dy));
            diff_hist[a.abs_diff(b) as usize] += 1;
        }
    }
    let n: u64 = diff_hist.iter().sum();
    let contrast = diff_hist
        .iter()
        .enumerate()
        .map(|(d, &c)| (d * d) as f64 * c as f64)
        .sum::<f64>()
        / n as f64;
    let homog = diff_hist
        .iter()
        .enumerate()
        .map(|(d, &c)| c as f64 / (1.0 + d as f64))
        .sum::<f64>()
        / n as f64;
    [contrast, homog]
}

fn gradient_stats(lum: &Grid<u32>) -> [f64; 2] {
    let (w, h) = (lum.width(), lum.height());
    if w == 0 || h == 0 {
        return [0.0, 0.0];
    }
    let at = |x: usize, y: usize| lum.get(x, y) as i64;
    let mut mags = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let gx = at((x + 1).min(w - 1), y) - at(x.saturating_sub(1), y);
            let gy = at(x, (y + 1).min(h - 1)) - at(x, y.saturating_sub(1));
            // central difference, back to gray units
            mags.push(((gx * gx + gy * gy) as f64).sqrt() / (2.0 * 4.0 * LUM_SCALE));
        }
    }
    let (m, s) = mean_std_f(&mags);
    [m, s]
}

fn lumen_stats(lum: &Grid<u32>) -> [f64; 7] {
    let (w, h) = (lum.width(), lum.height());
    if w == 0 || h == 0 {
        return [0.0; 7];
    }
    let cut = BRIGHT_GRAY * 4.0 * LUM_SCALE;
    let bright = lum.map(|&v| v as f64 > cut);
    let total = (w * h) as f64;
    let bright_n = bright.as_slice().iter().filter(|&&b| b).count() as f64;
    let mut areas = Vec::new();
    let mut fills = Vec::new();
    for c in connected_components_grid(&bright) {
        if c.min_x == 0 || c.min_y == 0 || c.max_x + 1 == w || c.max_y + 1 == h {
            continue;
        }
        let bbox = ((c.max_x - c.min_x + 1) * (c.max_y - c.min_y + 1)) as f64;
        areas.push(c.area() as f64);
        fills.push(c.area() as f64 / bbox);
    }
    let lumen_n: f64 = areas.iter().sum();
    let (m, s) = mean_std_f(&areas);
    let max = areas.iter().cloned().fold(0.0, f64::max);
    let fill = mean_std_f(&fills).0;
    [
        bright_n / total,
        lumen_n / total,
        areas.len() as f64,
        m,
        s,
        max,
        fill,
    ]
}

/// 42-value descriptor in the order of [`FEATURE_NAMES`]. Pixels that are
/// exactly white count as background.
pub fn extract_patch_features(img: &RgbImage) -> Vec<f64> {
    let n = img.width() as u64 * img.height() as u64;
    let mut out = Vec::with_capacity(N_FEATURES);
    let mut sum = [0u64; 3];
    let mut sum_sq = [0u128; 3];
    let mut hue_hist = [0u64; 8];
    let mut lum_hist = [0u64; 256];
    let mut tissue = 0u64;
    for p in img.pixels() {
        let [r, g, b] = p.0;
        for c in 0..3 {
            sum[c] += p.0[c] as u64;
            sum_sq[c] += (p.0[c] as u128) * (p.0[c] as u128);
        }
        if [r, g, b] != [255, 255, 255] {
            tissue += 1;
            hue_hist[((hue(r, g, b) * 8.0) as usize).min(7)] += 1;
        }
        let l = LUM_W[0] * r as u32 + LUM_W[1] * g as u32 + LUM_W[2] * b as u32;
        lum_hist[((l as f64 / LUM_SCALE) as usize).min(255)] += 1;
    }
    for c in 0..3 {
        let (m, s) = mean_std(n, sum[c], sum_sq[c]);
        out.push(m);
        out.push(s);
    }
    for hcount in hue_hist {
        out.push(if tissue == 0 {
            0.0
        } else {
            hcount as f64 / tissue as f64
        });
    }
    let half = half_luminance(img);
    out.extend(gradient_stats(&half));
    out.push(if n == 0 {
        0.0
    } else {
        tissue as f64 / n as f64
    });
    for s in [1, 2, 4] {
        out.extend(blob_stats(&half, s));
    }
    out.extend(cooccurrence(&half, COOC_OFFSET, 0));
    out.extend(cooccurrence(&half, 0, COOC_OFFSET));
    for q in [5.0, 25.0, 50.0, 75.0, 95.0] {
        out.push(histogram_percentile(&lum_hist, n, q));
    }
    out.extend(lumen_stats(&half));
    debug_assert_eq!(out.len(), N_FEATURES);
    out
}

fn histogram_percentile(hist: &[u64; 256], n: u64, q: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let need = (q / 100.0 * n as f64).ceil().max(1.0) as u64;
    let mut cum = 0;
    for (b, &c) in hist.iter().enumerate() {
        cum += c;
        if cum >= need {
            return b as f64;
        }
    }
    255.0
}

/// Descriptor of `d.apply(patch)` expressed through the descriptor of
/// `patch`: only the axis-aligned co-occurrence pair changes places.
pub fn dihedral_action(features: &[f64], d: Dihedral) -> Vec<f64> {
    let mut out = features.to_vec();
    if d.swaps_axes() {
        out.swap(26, 28);
        out.swap(27, 29);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            if (x / 7 + y / 3) % 5 == 0 {
                image::Rgb([255, 255, 255])
            } else if (x * x + 3 * y) % 11 < 4 {
                image::Rgb([70, 30, 120])
            } else {
                image::Rgb([(200 + x % 40) as u8, (150 + y % 50) as u8, 210])
            }
        })
    }

    #[test]
    fn white_patch_is_empty_safe() {
        let f = extract_patch_features(&RgbImage::from_pixel(64, 64, image::Rgb([255, 255, 255])));
        assert_eq!(f.len(), N_FEATURES);
        assert_eq!(f[16], 0.0);
        assert!(f[6..14].iter().all(|&v| v == 0.0));
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dihedral_views_permute_features() {
        let img = textured(96, 96);
        let base = extract_patch_features(&img);
        for d in Dihedral::all() {
            let got = extract_patch_features(&d.apply(&img));
            let want = dihedral_action(&base, d);
            for (i, (a, b)) in got.iter().zip(&want).enumerate() {
                assert!(
                    (a - b).abs() <= 1e-9 * (1.0 + b.abs()),
                    "{} {:?}: {a} vs {b}",
                    FEATURE_NAMES[i],
                    d
                );
            }
        }
    }

    #[test]
    fn names_match_length() {
        assert_eq!(
            FEATURE_NAMES.len(),
            extract_patch_features(&textured(20, 20)).len()
        );
    }
}
