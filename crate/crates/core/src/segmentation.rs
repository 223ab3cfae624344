//! Tissue and pen-mark segmentation on the downsampled slide image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::pixel_set_width;
use crate::morphology::{close, connected_components, disk_radius_px, fill_holes, Component};
use crate::raster::{BinaryMask, Grid, RgbImage};
use crate::slide_io::ImagePyramid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationParams {
    pub close_radius_um: f64,
    pub min_area_um2: f64,
    pub pen_min_width_um: f64,
    /// Tissue-stage objects with a lower mean hue are treated as leftover ink.
    pub tissue_pen_hue_cut: f64,
    /// Pen-stage objects with a higher mean hue are treated as blurred tissue.
    pub pen_tissue_hue_cut: f64,
    pub work_downsample: u32,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        SegmentationParams {
            close_radius_um: 50.0,
            min_area_um2: 100_000.0,
            pen_min_width_um: 400.0,
            tissue_pen_hue_cut: 0.7,
            pen_tissue_hue_cut: 0.6,
            work_downsample: 16,
        }
    }
}

impl SegmentationParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.close_radius_um,
            self.min_area_um2,
            self.pen_min_width_um,
        ];
        if positive.iter().any(|&v| !(v > 0.0)) || self.work_downsample == 0 {
            return Err(Error::InvalidParam(
                "segmentation sizes must be positive".into(),
            ));
        }
        for cut in [self.tissue_pen_hue_cut, self.pen_tissue_hue_cut] {
            if !(0.0..=1.0).contains(&cut) {
                return Err(Error::InvalidParam(format!("hue cut {cut} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// NTSC luma, kept in real precision.
pub fn to_grayscale(img: &RgbImage) -> Grid<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .pixels()
        .map(|p| 0.2989 * p[0] as f64 + 0.5870 * p[1] as f64 + 0.1140 * p[2] as f64)
        .collect();
    Grid::from_vec(w, h, data).expect("pixel count")
}

/// HSV hue in [0, 1); achromatic pixels have hue 0.
pub fn hue(r: u8, g: u8, b: u8) -> f64 {
    let (r, g, b) = (r as f64, g as f64, b as f64);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d == 0.0 {
        return 0.0;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    let h = h / 6.0;
    if h >= 1.0 {
        0.0
    } else {
        h
    }
}

/// Otsu threshold over a 256-bin histogram spanning the data range. Values
/// strictly above the returned threshold form the upper class. When several
/// cuts tie, the middle of the tied run is used.
pub fn otsu_threshold(gray: &Grid<f64>) -> Result<f64> {
    otsu_threshold_values(gray.as_slice())
}

pub fn otsu_threshold_values(values: &[f64]) -> Result<f64> {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if values.is_empty() || !(max > min) {
        return Err(Error::DegenerateHistogram);
    }
    let span = max - min;
    let mut hist = [0u64; 256];
    for &v in values {
        let b = (((v - min) / span) * 256.0) as usize;
        hist[b.min(255)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut between = [f64::NEG_INFINITY; 255];
    for (k, b) in between.iter_mut().enumerate() {
        w0 += hist[k] as f64;
        sum0 += k as f64 * hist[k] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        *b = w0 * w1 * (m0 - m1) * (m0 - m1);
    }
    let best = between.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tol = best.abs() * 1e-12;
    let ties: Vec<usize> = (0..255).filter(|&k| between[k] >= best - tol).collect();
    let k = (ties[0] + ties[ties.len() - 1]) as f64 / 2.0;
    Ok(min + (k + 1.0) * span / 256.0)
}

/// Absolute response of the 4-neighbour Laplacian, replicating edges.
pub fn abs_laplacian(gray: &Grid<f64>) -> Grid<f64> {
    let (w, h) = (gray.width(), gray.height());
    Grid::from_fn(w, h, |x, y| {
        let c = gray.get(x, y);
        let l = gray.get(x.saturating_sub(1), y);
        let r = gray.get((x + 1).min(w - 1), y);
        let u = gray.get(x, y.saturating_sub(1));
        let d = gray.get(x, (y + 1).min(h - 1));
        (l + r + u + d - 4.0 * c).abs()
    })
}

fn component_means(comp: &Component, img: &RgbImage, gray: &Grid<f64>) -> (f64, f64) {
    let w = img.width() as usize;
    let (mut hs, mut gs) = (0.0, 0.0);
    for &i in &comp.pixels {
        let p = img.get_pixel((i % w) as u32, (i / w) as u32);
        hs += hue(p[0], p[1], p[2]);
        gs += gray.as_slice()[i];
    }
    let n = comp.pixels.len() as f64;
    (hs / n, gs / n)
}

fn work_image(pyr: &ImagePyramid, params: &SegmentationParams) -> Result<RgbImage> {
    pyr.read_region(params.work_downsample, pyr.full_rect())
}

fn um_per_px(pyr: &ImagePyramid, params: &SegmentationParams) -> f64 {
    pyr.pixel_size_um() * params.work_downsample as f64
}

/// Tissue mask `T` at the working downsample.
pub fn segment_tissue(pyr: &ImagePyramid, params: &SegmentationParams) -> Result<BinaryMask> {
    params.validate()?;
    let img = work_image(pyr, params)?;
    let gray = to_grayscale(&img);
    let (w, h) = (gray.width(), gray.height());
    let ds = params.work_downsample;
    let lap = abs_laplacian(&gray);
    let t = match otsu_threshold(&lap) {
        Ok(t) => t,
        Err(Error::DegenerateHistogram) => return Ok(BinaryMask::empty(w, h, ds)),
        Err(e) => return Err(e),
    };
    let raw = BinaryMask::from_grid(lap.map(|&v| v > t), ds);
    let radius = disk_radius_px(params.close_radius_um, pyr.pixel_size_um(), ds);
    let mask = fill_holes(&close(&raw, radius));

    let px_area = um_per_px(pyr, params).powi(2);
    let gray_cut = otsu_threshold(&gray).ok();
    let mut out = BinaryMask::empty(w, h, ds);
    for comp in connected_components(&mask) {
        if (comp.area() as f64) * px_area < params.min_area_um2 {
            continue;
        }
        let (mean_hue, mean_gray) = component_means(&comp, &img, &gray);
        let dark = gray_cut.is_some_and(|c| mean_gray <= c);
        if dark && mean_hue < params.tissue_pen_hue_cut {
            continue;
        }
        let s = out.bits.as_mut_slice();
        for &i in &comp.pixels {
            s[i] = true;
        }
    }
    Ok(out)
}

/// Pen-mark mask `P` at the working downsample; disjoint from `tissue`.
pub fn segment_penmarks(
    pyr: &ImagePyramid,
    tissue: &BinaryMask,
    params: &SegmentationParams,
) -> Result<BinaryMask> {
    params.validate()?;
    let img = work_image(pyr, params)?;
    let gray = to_grayscale(&img);
    let (w, h) = (gray.width(), gray.height());
    let ds = params.work_downsample;
    if tissue.width() != w || tissue.height() != h || tissue.downsample != ds {
        return Err(Error::DimensionMismatch(format!(
            "tissue mask {}x{}@{} vs work image {w}x{h}@{ds}",
            tissue.width(),
            tissue.height(),
            tissue.downsample
        )));
    }
    let t = match otsu_threshold(&gray) {
        Ok(t) => t,
        Err(Error::DegenerateHistogram) => return Ok(BinaryMask::empty(w, h, ds)),
        Err(e) => return Err(e),
    };
    let dark = BinaryMask::from_grid(gray.map(|&v| v <= t), ds);
    let radius = disk_radius_px(params.close_radius_um, pyr.pixel_size_um(), ds);
    let cand = fill_holes(&close(&dark, radius).and_not(tissue));

    let um = um_per_px(pyr, params);
    let mut out = BinaryMask::empty(w, h, ds);
    for comp in connected_components(&cand) {
        if (comp.area() as f64) * um * um < params.min_area_um2 {
            continue;
        }
        let pts: Vec<(usize, usize)> = comp.pixels.iter().map(|&i| (i % w, i / w)).collect();
        if pixel_set_width(&pts) * um < params.pen_min_width_um {
            continue;
        }
        let (mean_hue, _) = component_means(&comp, &img, &gray);
        if mean_hue > params.pen_tissue_hue_cut {
            continue;
        }
        let s = out.bits.as_mut_slice();
        for &i in &comp.pixels {
            s[i] = true;
        }
    }
    // Hole filling can reach back into enclosed tissue; keep the sets disjoint.
    Ok(out.and_not(tissue))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slide_io::rgb;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn grayscale_weights() {
        let img = RgbImage::from_vec(3, 1, vec![0, 0, 0, 255, 255, 255, 100, 50, 200]).unwrap();
        let g = to_grayscale(&img);
        assert_eq!(g.get(0, 0), 0.0);
        assert!((g.get(1, 0) - 254.9745).abs() < 1e-9);
        assert!((g.get(2, 0) - 82.04).abs() < 1e-9);
    }

    #[test]
    fn hue_reference_values() {
        assert_eq!(hue(10, 10, 10), 0.0);
        assert!((hue(0, 255, 0) - 1.0 / 3.0).abs() < 1e-12);
        assert!((hue(0, 0, 255) - 2.0 / 3.0).abs() < 1e-12);
        assert!((hue(255, 0, 0)).abs() < 1e-12);
        assert!(hue(235, 160, 200) > 0.9);
    }

    #[test]
    fn otsu_symmetric_bimodal_splits_evenly() {
        let vals: Vec<f64> = (0..1000)
            .map(|i| if i % 2 == 0 { 0.0 } else { 255.0 })
            .collect();
        let t = otsu_threshold_values(&vals).unwrap();
        assert!(t > 0.0 && t < 255.0);
        assert_eq!(vals.iter().filter(|&&v| v > t).count(), 500);
    }

    #[test]
    fn otsu_constant_is_degenerate() {
        assert!(matches!(
            otsu_threshold_values(&[3.0; 10]),
            Err(Error::DegenerateHistogram)
        ));
    }

    /// Brute force: every distinct cut between sorted values, class variance
    /// computed from raw values.
    fn brute_otsu(vals: &[f64]) -> f64 {
        let mut s = vals.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = s.len() as f64;
        let total: f64 = s.iter().sum();
        let (mut best, mut cut, mut acc) = (f64::NEG_INFINITY, 0.0, 0.0);
        for i in 0..s.len() - 1 {
            acc += s[i];
            if s[i] == s[i + 1] {
                continue;
            }
            let w0 = (i + 1) as f64;
            let w1 = n - w0;
            let m0 = acc / w0;
            let m1 = (total - acc) / w1;
            let v = w0 * w1 * (m0 - m1).powi(2);
            if v > best {
                best = v;
                cut = (s[i] + s[i + 1]) / 2.0;
            }
        }
        cut
    }

    #[test]
    fn otsu_two_gaussian_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Normal::new(60.0, 10.0).unwrap();
        let b = Normal::new(190.0, 10.0).unwrap();
        let vals: Vec<f64> = (0..4000)
            .map(|i| {
                if i % 2 == 0 {
                    a.sample(&mut rng)
                } else {
                    b.sample(&mut rng)
                }
            })
            .collect();
        let t = otsu_threshold_values(&vals).unwrap();
        let oracle = brute_otsu(&vals);
        assert!((110.0..=140.0).contains(&t), "{t}");
        assert!((110.0..=140.0).contains(&oracle), "{oracle}");
        // binned search lands within one bin width of the exact optimum
        let bin = (vals.iter().cloned().fold(f64::MIN, f64::max)
            - vals.iter().cloned().fold(f64::MAX, f64::min))
            / 256.0;
        assert!((t - oracle).abs() <= 2.0 * bin + 1.0, "{t} vs {oracle}");
    }

    #[test]
    fn blank_slide_gives_empty_masks() {
        let img = RgbImage::from_pixel(320, 320, rgb(255, 255, 255));
        let pyr = ImagePyramid::from_base(img, 0.904, &[16]).unwrap();
        let p = SegmentationParams::default();
        let t = segment_tissue(&pyr, &p).unwrap();
        assert!(t.is_empty());
        assert!(segment_penmarks(&pyr, &t, &p).unwrap().is_empty());
    }
}
