//! Turns pen strokes drawn beside tissue into pixel labels.
//!
//! Each pen component is projected onto the facing tissue: boundary pixels of
//! the stroke are paired with their nearest tissue-boundary pixels, pairs
//! pointing away from the dominant direction are dropped, rays are marched
//! through the tissue along the surviving pairs and the convex hull of all
//! entry and exit points becomes the annotated region.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{convex_hull, rasterize_hull, KdTree};
use crate::morphology::{
    boundary_pixels, close, connected_components, dilate, disk_radius_px, fill_holes,
};
use crate::raster::{label, BinaryMask, LabelMask, RgbImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DigitizerParams {
    pub smooth_radius_um: f64,
    pub pair_max_dist_um: f64,
    pub angle_floor_deg: f64,
    pub hull_thicken_px: u32,
    pub normal_dilate_um: f64,
    pub cancer_dilate_um: f64,
    pub unknown_margin_um: f64,
}

impl Default for DigitizerParams {
    fn default() -> Self {
        DigitizerParams {
            smooth_radius_um: 100.0,
            pair_max_dist_um: 2000.0,
            angle_floor_deg: 20.0,
            hull_thicken_px: 3,
            normal_dilate_um: 100.0,
            cancer_dilate_um: 100.0,
            unknown_margin_um: 700.0,
        }
    }
}

impl DigitizerParams {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.smooth_radius_um,
            self.pair_max_dist_um,
            self.angle_floor_deg,
            self.normal_dilate_um,
            self.cancer_dilate_um,
            self.unknown_margin_um,
        ];
        if vals.iter().any(|v| !(*v > 0.0)) || self.hull_thicken_px == 0 {
            return Err(Error::InvalidParam(
                "digitizer parameters must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DirectionStats {
    /// Mean direction in radians, in (−π, π].
    pub theta: f64,
    /// Circular variance in [0, 1].
    pub sigma: f64,
    /// Resultant vanished; `theta` is reported as 0.
    pub degenerate: bool,
}

pub fn circular_stats(vectors: &[(f64, f64)]) -> Result<DirectionStats> {
    let angles: Vec<f64> = vectors
        .iter()
        .filter(|v| v.0 != 0.0 || v.1 != 0.0)
        .map(|v| v.1.atan2(v.0))
        .collect();
    if angles.is_empty() {
        return Err(Error::Degenerate("no direction vectors".into()));
    }
    let n = angles.len() as f64;
    let c = angles.iter().map(|a| a.cos()).sum::<f64>() / n;
    let s = angles.iter().map(|a| a.sin()).sum::<f64>() / n;
    let r = (c * c + s * s).sqrt();
    if r < 1e-12 {
        return Ok(DirectionStats {
            theta: 0.0,
            sigma: 1.0,
            degenerate: true,
        });
    }
    Ok(DirectionStats {
        theta: s.atan2(c),
        sigma: (1.0 - r).clamp(0.0, 1.0),
        degenerate: false,
    })
}

/// Absolute angle difference on the circle, in [0, π].
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}

#[derive(Clone, Debug)]
pub struct Projection {
    pub mask: BinaryMask,
    pub warning: Option<String>,
}

fn um_per_px(mask: &BinaryMask, pixel_size_um: f64) -> f64 {
    pixel_size_um * mask.downsample as f64
}

/// Cancer region annotated by one pen component.
pub fn project_penmark(
    tissue: &BinaryMask,
    pen_region: &BinaryMask,
    params: &DigitizerParams,
    pixel_size_um: f64,
) -> Result<Projection> {
    params.validate()?;
    if !tissue.same_shape(pen_region) || tissue.downsample != pen_region.downsample {
        return Err(Error::DimensionMismatch(
            "tissue and pen masks differ in shape".into(),
        ));
    }
    let (w, h) = (tissue.width(), tissue.height());
    let empty = |msg: String| Projection {
        mask: BinaryMask::empty(w, h, tissue.downsample),
        warning: Some(msg),
    };
    let um = um_per_px(tissue, pixel_size_um);
    let r = disk_radius_px(params.smooth_radius_um, pixel_size_um, tissue.downsample);

    let smooth_t = fill_holes(&close(tissue, r));
    let smooth_p = fill_holes(&close(pen_region, r));
    let overlap = smooth_t.and(&smooth_p);
    let smooth_t = smooth_t.and_not(&overlap);
    let smooth_p = smooth_p.and_not(&overlap);

    let t_boundary = boundary_pixels(&smooth_t);
    let p_boundary = boundary_pixels(&smooth_p);
    if t_boundary.is_empty() || p_boundary.is_empty() {
        return Ok(empty("pen region has no tissue or pen boundary".into()));
    }
    let tree = KdTree::new(
        t_boundary
            .iter()
            .map(|&(x, y)| (x as f64, y as f64))
            .collect(),
    );
    let max_d = params.pair_max_dist_um / um;

    // (pen point, tissue point, direction vector)
    let mut pairs: Vec<((f64, f64), (f64, f64), (f64, f64))> = Vec::new();
    for &(px, py) in &p_boundary {
        let p = (px as f64, py as f64);
        let (i, d2) = tree.nearest(p).expect("non-empty tree");
        if d2.sqrt() <= max_d {
            let t = tree.point(i);
            pairs.push((p, t, (t.0 - p.0, t.1 - p.1)));
        }
    }
    if pairs.is_empty() {
        return Ok(empty(format!(
            "pen region lies farther than {} um from tissue; skipped",
            params.pair_max_dist_um
        )));
    }

    let dirs: Vec<(f64, f64)> = pairs.iter().map(|p| p.2).collect();
    let stats = circular_stats(&dirs)?;
    let tol = params
        .angle_floor_deg
        .to_radians()
        .max(std::f64::consts::PI * stats.sigma);
    let diffs: Vec<f64> = dirs
        .iter()
        .map(|d| angle_diff(d.1.atan2(d.0), stats.theta))
        .collect();
    let mut kept: Vec<usize> = (0..pairs.len()).filter(|&i| diffs[i] <= tol).collect();
    if kept.is_empty() {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.sort_by(|&a, &b| diffs[a].total_cmp(&diffs[b]).then(a.cmp(&b)));
        kept = order.into_iter().take(2).collect();
    }

    let mut hull_pts: Vec<(i64, i64)> = Vec::with_capacity(kept.len() * 2);
    for &i in &kept {
        let (p, t, d) = pairs[i];
        hull_pts.push((t.0 as i64, t.1 as i64));
        let len = (d.0 * d.0 + d.1 * d.1).sqrt();
        let (ux, uy) = (d.0 / len, d.1 / len);
        let mut last = (t.0 as i64, t.1 as i64);
        let mut k = 1.0;
        loop {
            let q = (t.0 + k * ux, t.1 + k * uy);
            let (qx, qy) = (q.0.round() as i64, q.1.round() as i64);
            if !smooth_t.bits.in_bounds(qx, qy) || !smooth_t.get(qx as usize, qy as usize) {
                break;
            }
            if ((q.0 - p.0).powi(2) + (q.1 - p.1).powi(2)).sqrt() > max_d {
                break;
            }
            last = (qx, qy);
            k += 1.0;
        }
        hull_pts.push(last);
    }

    let hull = convex_hull(&hull_pts);
    let mut region = BinaryMask::empty(w, h, tissue.downsample);
    for (x, y) in rasterize_hull(&hull, w, h) {
        region.set(x, y, true);
    }
    let region = dilate(&region, params.hull_thicken_px).and(tissue);
    Ok(Projection {
        mask: region,
        warning: None,
    })
}

/// Reference ink colours and the grade each encodes.
pub const PEN_COLORS: [([f64; 3], u8); 3] = [
    ([0.0, 255.0, 0.0], label::GLEASON3),
    ([0.0, 0.0, 255.0], label::GLEASON4),
    ([0.0, 0.0, 0.0], label::GLEASON5),
];

/// Grade encoded by the mean colour of a pen region; `image` has the same
/// dimensions as the mask.
pub fn classify_pen_color(pen_region: &BinaryMask, image: &RgbImage) -> Result<u8> {
    if image.width() as usize != pen_region.width()
        || image.height() as usize != pen_region.height()
    {
        return Err(Error::DimensionMismatch(
            "pen mask and image differ in size".into(),
        ));
    }
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for (i, &on) in pen_region.bits.as_slice().iter().enumerate() {
        if on {
            let p = image.get_pixel(
                (i % pen_region.width()) as u32,
                (i / pen_region.width()) as u32,
            );
            for c in 0..3 {
                sum[c] += p[c] as f64;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("empty pen region".into()));
    }
    let mean = sum.map(|s| s / n as f64);
    Ok(nearest_pen_color(mean))
}

/// Nearest reference colour; ties go to the higher grade.
pub fn nearest_pen_color(rgb: [f64; 3]) -> u8 {
    let mut best = (f64::INFINITY, 0u8);
    for (c, g) in PEN_COLORS {
        let d: f64 = (0..3).map(|i| (rgb[i] - c[i]).powi(2)).sum();
        if d < best.0 || (d == best.0 && g > best.1) {
            best = (d, g);
        }
    }
    best.1
}

#[derive(Clone, Debug)]
pub struct LabelOutcome {
    pub labels: LabelMask,
    pub warnings: Vec<String>,
}

/// Writes `value` where `region` is set, turning disagreements into MIXED.
fn merge_cancer(labels: &mut LabelMask, region: &BinaryMask, value: u8) {
    for (i, &on) in region.bits.as_slice().iter().enumerate() {
        if !on {
            continue;
        }
        let (x, y) = (i % labels.width(), i / labels.width());
        let cur = labels.get(x, y);
        let next = if cur == label::UNKNOWN || cur == value {
            value
        } else {
            label::MIXED
        };
        labels.set(x, y, next);
    }
}

/// Label mask from tissue and pen masks. `image` is the slide at the masks'
/// downsample and is only consulted when `grade_coded`.
pub fn build_label_mask(
    tissue: &BinaryMask,
    pen: &BinaryMask,
    image: &RgbImage,
    grade_coded: bool,
    params: &DigitizerParams,
    pixel_size_um: f64,
) -> Result<LabelOutcome> {
    if !tissue.same_shape(pen) {
        return Err(Error::DimensionMismatch(
            "tissue and pen masks differ in shape".into(),
        ));
    }
    let (w, h) = (tissue.width(), tissue.height());
    let mut labels = LabelMask::new(w, h, tissue.downsample);
    let mut comps = connected_components(pen);
    if comps.is_empty() {
        for (i, &t) in tissue.bits.as_slice().iter().enumerate() {
            if t {
                labels.set(i % w, i / w, label::BENIGN);
            }
        }
        return Ok(LabelOutcome {
            labels,
            warnings: Vec::new(),
        });
    }
    comps.sort_by(|a, b| {
        let (ax, ay) = a.centroid(w);
        let (bx, by) = b.centroid(w);
        ay.total_cmp(&by).then(ax.total_cmp(&bx))
    });
    let projected: Vec<Result<(Projection, u8)>> = comps
        .par_iter()
        .map(|c| {
            let region = c.to_mask(w, h, pen.downsample);
            let value = if grade_coded {
                classify_pen_color(&region, image)?
            } else {
                label::CANCER
            };
            Ok((
                project_penmark(tissue, &region, params, pixel_size_um)?,
                value,
            ))
        })
        .collect();
    let mut warnings = Vec::new();
    for item in projected {
        let (proj, value) = item?;
        if let Some(msg) = proj.warning {
            warnings.push(msg);
        }
        merge_cancer(&mut labels, &proj.mask, value);
    }
    for section in connected_components(tissue) {
        let annotated = section
            .pixels
            .iter()
            .any(|&i| label::is_cancer(labels.get(i % w, i / w)));
        if annotated {
            for &i in &section.pixels {
                if labels.get(i % w, i / w) == label::UNKNOWN {
                    labels.set(i % w, i / w, label::BENIGN);
                }
            }
        }
    }
    Ok(LabelOutcome { labels, warnings })
}

/// Grows cancer and benign labels by a small radius, then clears an
/// uncertainty margin of non-cancer tissue around every cancer region.
pub fn refine_label_mask(
    labels: &LabelMask,
    tissue: &BinaryMask,
    params: &DigitizerParams,
    pixel_size_um: f64,
) -> Result<LabelMask> {
    params.validate()?;
    if labels.width() != tissue.width() || labels.height() != tissue.height() {
        return Err(Error::DimensionMismatch(
            "label and tissue masks differ in shape".into(),
        ));
    }
    let ds = labels.downsample;
    let w = labels.width();
    let mut out = labels.clone();
    let t = tissue.bits.as_slice();

    let r_cancer = disk_radius_px(params.cancer_dilate_um, pixel_size_um, ds);
    let original_cancer = labels.mask_where(label::is_cancer);
    let mut grown = LabelMask::new(w, labels.height(), ds);
    for v in [
        label::CANCER,
        label::GLEASON3,
        label::GLEASON4,
        label::GLEASON5,
        label::MIXED,
    ] {
        let m = labels.mask_where(|l| l == v);
        if m.is_empty() {
            continue;
        }
        merge_cancer(&mut grown, &dilate(&m, r_cancer), v);
    }
    for (i, &g) in grown.grid().as_slice().iter().enumerate() {
        if g != label::UNKNOWN && t[i] && !original_cancer.bits.as_slice()[i] {
            out.set(i % w, i / w, g);
        }
    }

    let r_benign = disk_radius_px(params.normal_dilate_um, pixel_size_um, ds);
    let benign = dilate(&out.mask_where(|l| l == label::BENIGN), r_benign);
    for (i, &b) in benign.bits.as_slice().iter().enumerate() {
        if b && t[i] && out.grid().as_slice()[i] == label::UNKNOWN {
            out.set(i % w, i / w, label::BENIGN);
        }
    }

    let cancer = out.mask_where(label::is_cancer);
    if !cancer.is_empty() {
        let r_margin = disk_radius_px(params.unknown_margin_um, pixel_size_um, ds);
        let margin = dilate(&cancer, r_margin);
        for (i, &m) in margin.bits.as_slice().iter().enumerate() {
            if m && t[i] && !cancer.bits.as_slice()[i] {
                out.set(i % w, i / w, label::UNKNOWN);
            }
        }
    }
    Ok(out)
}
