//! Confidence masks from patch probabilities and overlay rendering.
//!
//! Channel encoding: R = 1 − P(benign) from detection, G = P(G3) and
//! B = P(G4) + P(G5) from grading. Each mask pixel averages every patch whose
//! window covers it, after averaging ensemble members per patch.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::patch_model::{ProbMatrix, Stage};
use crate::raster::{div_ceil, Grid, RgbImage};
use crate::slide_io::{save_rgb_png, ImagePyramid};

/// Resolution at which window coverage is accumulated.
pub const ACCUMULATE_DOWNSAMPLE: u32 = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMask {
    pub downsample: u32,
    pub image: RgbImage,
}

/// `floor(v·255 + 0.5)` of a probability clamped to [0, 1].
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn member_mean(mats: &[ProbMatrix], stage: Stage) -> Result<Vec<Vec<f64>>> {
    let first = mats
        .first()
        .ok_or_else(|| Error::Degenerate(format!("no {} matrices", stage.name())))?;
    for m in mats {
        if m.stage != stage {
            return Err(Error::IdMismatch(format!(
                "expected {} matrices",
                stage.name()
            )));
        }
        if m.slide_id != first.slide_id || m.coords != first.coords {
            return Err(Error::IdMismatch(
                "ensemble matrices cover different patch grids".into(),
            ));
        }
        m.validate()?;
    }
    let k = mats.len() as f64;
    Ok((0..first.n_patches())
        .map(|r| {
            let mut acc = vec![0.0; stage.n_classes()];
            for m in mats {
                acc.iter_mut().zip(&m.probs[r]).for_each(|(a, p)| *a += p);
            }
            acc.into_iter().map(|v| v / k).collect()
        })
        .collect())
}

/// Per-pixel channel probabilities at [`ACCUMULATE_DOWNSAMPLE`].
pub fn accumulate_channels(
    detection: &[ProbMatrix],
    grading: &[ProbMatrix],
    window_size: u32,
    base_width: u32,
    base_height: u32,
) -> Result<Grid<[f64; 3]>> {
    let det = member_mean(detection, Stage::Detection)?;
    let gra = member_mean(grading, Stage::Grading)?;
    let coords = &detection[0].coords;
    if grading[0].coords != *coords || grading[0].slide_id != detection[0].slide_id {
        return Err(Error::IdMismatch(
            "detection and grading grids differ".into(),
        ));
    }
    let ds = ACCUMULATE_DOWNSAMPLE;
    let (w, h) = (
        div_ceil(base_width, ds) as usize,
        div_ceil(base_height, ds) as usize,
    );
    let mut sum = Grid::new(w, h, [0.0f64; 3]);
    let mut count = Grid::new(w, h, 0u32);
    let edge = |v: u32| ((v as f64 / ds as f64 - 0.5).ceil().max(0.0)) as usize;
    for (i, &(x, y)) in coords.iter().enumerate() {
        let px = [1.0 - det[i][0], gra[i][1], gra[i][2] + gra[i][3]];
        for cy in edge(y)..edge(y + window_size).min(h) {
            for cx in edge(x)..edge(x + window_size).min(w) {
                let s = sum.get(cx, cy);
                sum.set(cx, cy, [s[0] + px[0], s[1] + px[1], s[2] + px[2]]);
                count.set(cx, cy, count.get(cx, cy) + 1);
            }
        }
    }
    Ok(Grid::from_fn(w, h, |x, y| {
        let n = count.get(x, y);
        if n == 0 {
            [0.0; 3]
        } else {
            sum.get(x, y).map(|v| v / n as f64)
        }
    }))
}

/// Bilinear resample of a channel grid between downsample factors, sampling
/// at pixel centres with clamped edges.
pub fn resample_bilinear(
    src: &Grid<[f64; 3]>,
    from_ds: u32,
    to_ds: u32,
    out_w: usize,
    out_h: usize,
) -> Grid<[f64; 3]> {
    if from_ds == to_ds && src.width() == out_w && src.height() == out_h {
        return src.clone();
    }
    let ratio = to_ds as f64 / from_ds as f64;
    let (sw, sh) = (src.width(), src.height());
    let coord = |o: usize, n: usize| {
        let c = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n - 1) as f64);
        let i = (c.floor() as usize).min(n - 1);
        (i, (i + 1).min(n - 1), c - i as f64)
    };
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    let rows: Vec<Vec<[f64; 3]>> = (0..out_h)
        .into_par_iter()
        .map(|y| {
            let (y0, y1, ty) = coord(y, sh);
            (0..out_w)
                .map(|x| {
                    let (x0, x1, tx) = coord(x, sw);
                    let mut px = [0.0; 3];
                    for (c, v) in px.iter_mut().enumerate() {
                        let top = lerp(src.get(x0, y0)[c], src.get(x1, y0)[c], tx);
                        let bottom = lerp(src.get(x0, y1)[c], src.get(x1, y1)[c], tx);
                        *v = lerp(top, bottom, ty);
                    }
                    px
                })
                .collect()
        })
        .collect();
    Grid::from_vec(out_w, out_h, rows.into_iter().flatten().collect()).expect("sized")
}

pub fn build_confidence_mask(
    detection: &[ProbMatrix],
    grading: &[ProbMatrix],
    window_size: u32,
    base_width: u32,
    base_height: u32,
    out_downsample: u32,
) -> Result<ConfidenceMask> {
    if out_downsample == 0 {
        return Err(Error::InvalidParam("downsample must be >= 1".into()));
    }
    let acc = accumulate_channels(detection, grading, window_size, base_width, base_height)?;
    let (ow, oh) = (
        div_ceil(base_width, out_downsample),
        div_ceil(base_height, out_downsample),
    );
    let up = resample_bilinear(
        &acc,
        ACCUMULATE_DOWNSAMPLE,
        out_downsample,
        ow as usize,
        oh as usize,
    );
    let image = RgbImage::from_fn(ow, oh, |x, y| {
        image::Rgb(up.get(x as usize, y as usize).map(quantize))
    });
    Ok(ConfidenceMask {
        downsample: out_downsample,
        image,
    })
}

/// `round(alpha·mask + (1 − alpha)·slide)` per channel, halves rounded up.
pub fn blend(slide: &RgbImage, mask: &RgbImage, alpha: f64) -> Result<RgbImage> {
    if slide.dimensions() != mask.dimensions() {
        return Err(Error::DimensionMismatch(format!(
            "slide {:?} vs mask {:?}",
            slide.dimensions(),
            mask.dimensions()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParam(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut out = slide.clone();
    for (o, m) in out.pixels_mut().zip(mask.pixels()) {
        for c in 0..3 {
            let v = alpha * m[c] as f64 + (1.0 - alpha) * o[c] as f64;
            o[c] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// Blends the mask over the slide read at the mask's downsample and writes
/// the result as PNG.
pub fn render_overlay(
    pyr: &ImagePyramid,
    mask: &ConfidenceMask,
    alpha: f64,
    out: &Path,
) -> Result<RgbImage> {
    let slide = pyr.read_region(mask.downsample, pyr.full_rect())?;
    let img = blend(&slide, &mask.image, alpha)?;
    save_rgb_png(&img, out)?;
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm(stage: Stage, coords: Vec<(u32, u32)>, probs: Vec<Vec<f64>>) -> ProbMatrix {
        ProbMatrix {
            slide_id: "s".into(),
            stage,
            coords,
            probs,
        }
    }

    #[test]
    fn single_patch_fixture() {
        let d = pm(Stage::Detection, vec![(0, 0)], vec![vec![0.2, 0.8]]);
        let g = pm(Stage::Grading, vec![(0, 0)], vec![vec![0.1, 0.5, 0.3, 0.1]]);
        for ds in [16, 4] {
            let m = build_confidence_mask(&[d.clone()], &[g.clone()], 64, 64, 64, ds).unwrap();
            assert!(m.image.pixels().all(|p| p.0 == [204, 128, 102]), "ds {ds}");
        }
    }

    #[test]
    fn overlap_averages_patches() {
        let coords = vec![(0, 0), (32, 0)];
        let d = pm(
            Stage::Detection,
            coords.clone(),
            vec![vec![1.0, 0.0], vec![0.6, 0.4]],
        );
        let g = pm(Stage::Grading, coords, vec![vec![1.0, 0.0, 0.0, 0.0]; 2]);
        let m = build_confidence_mask(&[d], &[g], 64, 96, 64, 16).unwrap();
        assert_eq!(m.image.get_pixel(0, 0).0, [0, 0, 0]);
        assert_eq!(m.image.get_pixel(2, 0).0[0], 51);
        assert_eq!(m.image.get_pixel(5, 0).0[0], 102);
    }

    #[test]
    fn members_must_align() {
        let d1 = pm(Stage::Detection, vec![(0, 0)], vec![vec![0.5, 0.5]]);
        let d2 = pm(Stage::Detection, vec![(16, 0)], vec![vec![0.5, 0.5]]);
        let g = pm(Stage::Grading, vec![(0, 0)], vec![vec![0.25; 4]]);
        assert!(build_confidence_mask(&[d1, d2], &[g], 64, 64, 64, 16).is_err());
    }

    #[test]
    fn blend_endpoints() {
        let s = RgbImage::from_pixel(3, 2, image::Rgb([10, 20, 31]));
        let m = RgbImage::from_pixel(3, 2, image::Rgb([200, 100, 0]));
        assert_eq!(blend(&s, &m, 0.0).unwrap(), s);
        assert_eq!(blend(&s, &m, 1.0).unwrap(), m);
        assert_eq!(blend(&s, &m, 0.5).unwrap().get_pixel(0, 0).0, [105, 60, 16]);
    }
}
