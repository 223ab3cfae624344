//! Procedural biopsy slides with exact ground truth.
//!
//! A slide holds one elongated core on a white background. Tissue classes
//! are drawn as gland fields: benign tissue has sparse large glands with wide
//! lumens, pattern 3 dense small glands, pattern 4 fused masses with small
//! cribriform lumens and pattern 5 solid nucleated sheets. The cancerous span
//! is marked by a pen stroke running beside the core.

use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{label, BinaryMask, Grid, LabelMask, RgbImage};
use crate::slide_io::{save_mask, save_slidepack, ImagePyramid, Mask};

pub const BASE_PIXEL_UM: f64 = 0.904;
pub const LEVELS: [u32; 2] = [1, 16];
const MASK_DS: u32 = 16;
const MARGIN_UM: f64 = 300.0;
/// Gap left between differently coloured stroke segments.
const STROKE_GAP_UM: f64 = 150.0;
/// Shortest cancer span drawn by [`plan_dataset`].
pub const MIN_SPAN_MM: f64 = 2.0;

const STROMA: [f64; 3] = [232.0, 168.0, 205.0];
const EPITHELIUM: [f64; 3] = [178.0, 112.0, 178.0];
const SHEET: [f64; 3] = [150.0, 88.0, 165.0];
const NUCLEUS: [f64; 3] = [88.0, 46.0, 122.0];
const LUMEN: [f64; 3] = [244.0, 236.0, 244.0];

/// Ink colour for uncoded strokes and for each pattern when coded.
pub fn pen_rgb(pattern: Option<u8>) -> [f64; 3] {
    match pattern {
        Some(3) => [0.0, 150.0, 0.0],
        Some(4) => [0.0, 90.0, 200.0],
        _ => [25.0, 25.0, 25.0],
    }
}

/// Gleason patterns `(primary, secondary)` for an ISUP grade; grade 5 uses
/// `(5, 5)` unless another combination is given explicitly.
pub fn default_patterns(isup: u8) -> Option<(u8, u8)> {
    match isup {
        1 => Some((3, 3)),
        2 => Some((3, 4)),
        3 => Some((4, 3)),
        4 => Some((4, 4)),
        5 => Some((5, 5)),
        _ => None,
    }
}

/// ISUP grade of a pattern pair.
pub fn isup_of(primary: u8, secondary: u8) -> u8 {
    match (primary, secondary) {
        (3, 3) => 1,
        (3, 4) => 2,
        (4, 3) => 3,
        (4, 4) | (3, 5) | (5, 3) => 4,
        _ => 5,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub slide_id: String,
    /// 0 benign, 1..=5 ISUP.
    pub isup: u8,
    /// Overrides [`default_patterns`].
    #[serde(default)]
    pub patterns: Option<(u8, u8)>,
    pub core_length_mm: f64,
    pub core_width_um: f64,
    /// Cancer extent as fractions of the core length.
    pub cancer_span: (f64, f64),
    /// Share of the span drawn in the secondary pattern.
    pub secondary_fraction: f64,
    pub rotation_deg: f64,
    pub pen_offset_um: f64,
    pub pen_width_um: f64,
    /// Draw the stroke on the positive side of the core axis.
    pub pen_above: bool,
    pub grade_coded: bool,
    pub seed: u64,
}

impl SynthSpec {
    pub fn benign(slide_id: &str, seed: u64) -> Self {
        SynthSpec {
            slide_id: slide_id.to_string(),
            isup: 0,
            patterns: None,
            core_length_mm: 15.0,
            core_width_um: 1000.0,
            cancer_span: (0.0, 0.0),
            secondary_fraction: 0.0,
            rotation_deg: 0.0,
            pen_offset_um: 300.0,
            pen_width_um: 700.0,
            pen_above: false,
            grade_coded: false,
            seed,
        }
    }

    pub fn malignant(slide_id: &str, isup: u8, span: (f64, f64), seed: u64) -> Self {
        SynthSpec {
            isup,
            cancer_span: span,
            secondary_fraction: 0.3,
            ..SynthSpec::benign(slide_id, seed)
        }
    }

    pub fn patterns(&self) -> Option<(u8, u8)> {
        if self.isup == 0 {
            None
        } else {
            self.patterns.or(default_patterns(self.isup))
        }
    }

    pub fn cancer_length_mm(&self) -> f64 {
        if self.isup == 0 {
            0.0
        } else {
            (self.cancer_span.1 - self.cancer_span.0) * self.core_length_mm
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.isup > 5 {
            return bad(format!("isup {} outside 0..=5", self.isup));
        }
        if !(self.core_length_mm > 0.0) || !(self.core_width_um > 0.0) {
            return bad("core dimensions must be positive".into());
        }
        if !(self.pen_width_um > 0.0) || !(self.pen_offset_um > 0.0) {
            return bad("pen geometry must be positive".into());
        }
        if !(0.0..1.0).contains(&self.secondary_fraction) {
            return bad("secondary_fraction must lie in [0, 1)".into());
        }
        if self.isup > 0 {
            let (a, b) = self.cancer_span;
            if !(0.0 <= a && a < b && b <= 1.0) {
                return bad(format!("cancer span ({a}, {b}) not inside [0, 1]"));
            }
            if let Some((p, s)) = self.patterns() {
                if !(3..=5).contains(&p) || !(3..=5).contains(&s) {
                    return bad(format!("patterns ({p}, {s}) outside 3..=5"));
                }
                if isup_of(p, s) != self.isup {
                    return bad(format!(
                        "patterns ({p}, {s}) do not give ISUP {}",
                        self.isup
                    ));
                }
                if p != s && self.secondary_fraction <= 0.0 {
                    return bad("mixed patterns need a secondary fraction".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TissueClass {
    Benign,
    Pattern3,
    Pattern4,
    Pattern5,
}

impl TissueClass {
    fn of_pattern(p: u8) -> Self {
        match p {
            3 => TissueClass::Pattern3,
            4 => TissueClass::Pattern4,
            _ => TissueClass::Pattern5,
        }
    }
}

/// Stretch of the core axis `[start, end)` in micrometres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub class: TissueClass,
    pub pattern: Option<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub slide_id: String,
    pub isup: u8,
    pub patterns: Option<(u8, u8)>,
    pub cancer_length_mm: f64,
    pub core_length_mm: f64,
    pub grade_coded: bool,
    #[serde(skip)]
    pub labels: Option<LabelMask>,
    #[serde(skip)]
    pub tissue: Option<BinaryMask>,
}

/// Rotated frame placing the core axis on the canvas.
#[derive(Clone, Copy, Debug)]
struct Frame {
    cos: f64,
    sin: f64,
    ox: f64,
    oy: f64,
}

impl Frame {
    /// Canvas micrometres of a local point (u along the axis, v across).
    fn to_canvas(&self, u: f64, v: f64) -> (f64, f64) {
        (
            self.ox + u * self.cos - v * self.sin,
            self.oy + u * self.sin + v * self.cos,
        )
    }

    fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.ox, y - self.oy);
        (
            dx * self.cos + dy * self.sin,
            -dx * self.sin + dy * self.cos,
        )
    }
}

struct Layout {
    frame: Frame,
    width: u32,
    height: u32,
    length_um: f64,
    half_width_um: f64,
    segments: Vec<Segment>,
    /// (u0, u1, v0, v1, ink)
    strokes: Vec<(f64, f64, f64, f64, [f64; 3])>,
}

fn segments_of(spec: &SynthSpec) -> Vec<Segment> {
    let l = spec.core_length_mm * 1000.0;
    let benign = |start: f64, end: f64| Segment {
        start,
        end,
        class: TissueClass::Benign,
        pattern: None,
    };
    let Some((p, s)) = spec.patterns() else {
        return vec![benign(0.0, l)];
    };
    let (a, b) = (spec.cancer_span.0 * l, spec.cancer_span.1 * l);
    let mut out = Vec::new();
    if a > 0.0 {
        out.push(benign(0.0, a));
    }
    let cancer = |start: f64, end: f64, pat: u8| Segment {
        start,
        end,
        class: TissueClass::of_pattern(pat),
        pattern: Some(pat),
    };
    if p == s {
        out.push(cancer(a, b, p));
    } else {
        let m = a + (1.0 - spec.secondary_fraction) * (b - a);
        out.push(cancer(a, m, p));
        out.push(cancer(m, b, s));
    }
    if b < l {
        out.push(benign(b, l));
    }
    out
}

fn layout(spec: &SynthSpec) -> Layout {
    let length_um = spec.core_length_mm * 1000.0;
    let half = spec.core_width_um / 2.0;
    let reach = half + spec.pen_offset_um + spec.pen_width_um + MARGIN_UM;
    let theta = spec.rotation_deg.to_radians();
    let probe = Frame {
        cos: theta.cos(),
        sin: theta.sin(),
        ox: 0.0,
        oy: 0.0,
    };
    let corners = [
        (-MARGIN_UM, -reach),
        (length_um + MARGIN_UM, -reach),
        (length_um + MARGIN_UM, reach),
        (-MARGIN_UM, reach),
    ]
    .map(|(u, v)| probe.to_canvas(u, v));
    let min_x = corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let max_x = corners
        .iter()
        .map(|c| c.0)
        .fold(f64::NEG_INFINITY, f64::max);
    let min_y = corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let max_y = corners
        .iter()
        .map(|c| c.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let frame = Frame {
        ox: -min_x,
        oy: -min_y,
        ..probe
    };
    let segments = segments_of(spec);
    let side = if spec.pen_above { 1.0 } else { -1.0 };
    let (v_near, v_far) = (
        half + spec.pen_offset_um,
        half + spec.pen_offset_um + spec.pen_width_um,
    );
    let (v0, v1) = if side > 0.0 {
        (v_near, v_far)
    } else {
        (-v_far, -v_near)
    };
    let cancer: Vec<&Segment> = segments.iter().filter(|s| s.pattern.is_some()).collect();
    let mut strokes = Vec::new();
    if spec.grade_coded {
        for (i, s) in cancer.iter().enumerate() {
            let lo = if i > 0 {
                s.start + STROKE_GAP_UM / 2.0
            } else {
                s.start
            };
            let hi = if i + 1 < cancer.len() {
                s.end - STROKE_GAP_UM / 2.0
            } else {
                s.end
            };
            strokes.push((lo, hi, v0, v1, pen_rgb(s.pattern)));
        }
    } else if let (Some(first), Some(last)) = (cancer.first(), cancer.last()) {
        strokes.push((first.start, last.end, v0, v1, pen_rgb(None)));
    }
    Layout {
        frame,
        width: ((max_x - min_x) / BASE_PIXEL_UM).ceil() as u32,
        height: ((max_y - min_y) / BASE_PIXEL_UM).ceil() as u32,
        length_um,
        half_width_um: half,
        segments,
        strokes,
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash3(a: i64, b: i64, seed: u64) -> u64 {
    mix((a as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (b as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
        ^ seed)
}

/// Uniform in [-1, 1).
fn hash_unit(a: i64, b: i64, seed: u64) -> f64 {
    (hash3(a, b, seed) >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

const NUCLEUS_CELL_UM: f64 = 9.0;
const NUCLEUS_RADIUS_UM: f64 = 3.2;

/// Nuclear speckle over a jittered lattice in local coordinates.
fn nucleus_at(u: f64, v: f64, density: f64, seed: u64) -> bool {
    let (cu, cv) = ((u / NUCLEUS_CELL_UM).floor(), (v / NUCLEUS_CELL_UM).floor());
    let h = hash3(cu as i64, cv as i64, seed ^ 0x51);
    if (h & 0xffff) as f64 / 65536.0 >= density {
        return false;
    }
    let jitter = NUCLEUS_CELL_UM - 2.0 * NUCLEUS_RADIUS_UM;
    let nu =
        (cu * NUCLEUS_CELL_UM) + NUCLEUS_RADIUS_UM + ((h >> 16) & 0xff) as f64 / 255.0 * jitter;
    let nv =
        (cv * NUCLEUS_CELL_UM) + NUCLEUS_RADIUS_UM + ((h >> 24) & 0xff) as f64 / 255.0 * jitter;
    (u - nu).powi(2) + (v - nv).powi(2) <= NUCLEUS_RADIUS_UM * NUCLEUS_RADIUS_UM
}

fn shade(c: [f64; 3], delta: f64) -> image::Rgb<u8> {
    image::Rgb(c.map(|v| (v + delta).round().clamp(0.0, 254.0) as u8))
}

// Luminance noise: pixel grain plus 15 um blotches, both hue-neutral.
fn noise(x: u32, y: u32, u: f64, v: f64, seed: u64) -> f64 {
    let grain = hash_unit(x as i64, y as i64, seed) * 5.0;
    let blotch = hash_unit(
        (u / 15.0).floor() as i64,
        (v / 15.0).floor() as i64,
        seed ^ 0xb1,
    ) * 16.0;
    grain + blotch
}

/// A gland: epithelial disk with lumens (each `(du, dv, radius)` relative to
/// the centre).
#[derive(Clone, Debug)]
struct Gland {
    u: f64,
    v: f64,
    radius: f64,
    lumens: Vec<(f64, f64, f64)>,
}

fn gland_field(seg: &Segment, half: f64, rng: &mut ChaCha8Rng) -> Vec<Gland> {
    // cell size, occupancy, radius range, lumen fraction of radius
    let (cell, occ, r_lo, r_hi) = match seg.class {
        TissueClass::Benign => (250.0, 0.75, 55.0, 100.0),
        TissueClass::Pattern3 => (85.0, 0.9, 22.0, 34.0),
        TissueClass::Pattern4 => (170.0, 1.0, 85.0, 130.0),
        TissueClass::Pattern5 => return Vec::new(),
    };
    let mut out = Vec::new();
    let nu = ((seg.end - seg.start) / cell).ceil() as i64 + 1;
    let nv = (2.0 * half / cell).ceil() as i64 + 1;
    for i in 0..nu {
        for j in 0..nv {
            if rng.random::<f64>() >= occ {
                continue;
            }
            let u = seg.start + (i as f64 + rng.random::<f64>()) * cell - cell / 2.0;
            let v = -half + (j as f64 + rng.random::<f64>()) * cell - cell / 2.0;
            let radius = rng.random_range(r_lo..r_hi);
            let lumens = match seg.class {
                TissueClass::Benign => vec![(0.0, 0.0, radius * rng.random_range(0.62..0.75))],
                TissueClass::Pattern3 => vec![(0.0, 0.0, radius * rng.random_range(0.4..0.5))],
                _ => {
                    let n = rng.random_range(4..9);
                    (0..n)
                        .map(|_| {
                            let a = rng.random_range(0.0..std::f64::consts::TAU);
                            let d = radius * 0.7 * rng.random::<f64>().sqrt();
                            (d * a.cos(), d * a.sin(), rng.random_range(7.0..13.0))
                        })
                        .collect()
                }
            };
            out.push(Gland {
                u,
                v,
                radius,
                lumens,
            });
        }
    }
    out
}

/// Renders a slide and its ground truth.
pub fn generate_slide(spec: &SynthSpec) -> Result<(ImagePyramid, SynthTruth)> {
    spec.validate()?;
    let lay = layout(spec);
    let (w, h) = (lay.width, lay.height);
    if w as u64 * h as u64 > 400_000_000 {
        return Err(Error::InvalidParam(format!("canvas {w}x{h} too large")));
    }
    let seed = spec.seed;
    let fr = lay.frame;
    let class_at =
        |u: f64| -> Option<&Segment> { lay.segments.iter().find(|s| u >= s.start && u < s.end) };
    let in_core = |u: f64, v: f64| u >= 0.0 && u < lay.length_um && v.abs() <= lay.half_width_um;

    // background, stroma, sheets and ink
    let mut raw = vec![255u8; w as usize * h as usize * 3];
    raw.par_chunks_mut(w as usize * 3)
        .enumerate()
        .for_each(|(y, row)| {
            let cy = (y as f64 + 0.5) * BASE_PIXEL_UM;
            for x in 0..w as usize {
                let cx = (x as f64 + 0.5) * BASE_PIXEL_UM;
                let (u, v) = fr.to_local(cx, cy);
                let px = if in_core(u, v) {
                    let seg = class_at(u).expect("segments cover the core");
                    let n = noise(x as u32, y as u32, u, v, seed);
                    match seg.class {
                        TissueClass::Pattern5 => {
                            if nucleus_at(u, v, 0.85, seed) {
                                shade(NUCLEUS, n * 0.5)
                            } else {
                                shade(SHEET, n)
                            }
                        }
                        _ if nucleus_at(u, v, 0.3, seed ^ 0x5707) => shade(NUCLEUS, n * 0.5),
                        _ => shade(STROMA, n),
                    }
                } else if let Some(s) = lay
                    .strokes
                    .iter()
                    .find(|s| u >= s.0 && u < s.1 && v >= s.2 && v < s.3)
                {
                    shade(s.4, hash_unit(x as i64, y as i64, seed ^ 0x7e) * 3.0 + 3.0)
                } else {
                    continue;
                };
                row[x * 3..x * 3 + 3].copy_from_slice(&px.0);
            }
        });
    let mut img = RgbImage::from_raw(w, h, raw).expect("sized");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for seg in &lay.segments {
        for g in gland_field(seg, lay.half_width_um, &mut rng) {
            stamp_gland(&mut img, &g, seg, &lay, seed);
        }
    }

    let pyr = ImagePyramid::from_base(img, BASE_PIXEL_UM, &LEVELS)?;
    let (tissue, labels) = truth_masks(spec, &lay);
    Ok((
        pyr,
        SynthTruth {
            slide_id: spec.slide_id.clone(),
            isup: spec.isup,
            patterns: spec.patterns(),
            cancer_length_mm: spec.cancer_length_mm(),
            core_length_mm: spec.core_length_mm,
            grade_coded: spec.grade_coded,
            labels: Some(labels),
            tissue: Some(tissue),
        },
    ))
}

fn stamp_gland(img: &mut RgbImage, g: &Gland, seg: &Segment, lay: &Layout, seed: u64) {
    let fr = lay.frame;
    let (cx, cy) = fr.to_canvas(g.u, g.v);
    let r_px = g.radius / BASE_PIXEL_UM;
    let x0 = ((cx / BASE_PIXEL_UM - r_px).floor().max(0.0)) as u32;
    let y0 = ((cy / BASE_PIXEL_UM - r_px).floor().max(0.0)) as u32;
    let x1 = ((cx / BASE_PIXEL_UM + r_px).ceil() as u32).min(img.width());
    let y1 = ((cy / BASE_PIXEL_UM + r_px).ceil() as u32).min(img.height());
    let r2 = g.radius * g.radius;
    for y in y0..y1 {
        for x in x0..x1 {
            let (u, v) = fr.to_local(
                (x as f64 + 0.5) * BASE_PIXEL_UM,
                (y as f64 + 0.5) * BASE_PIXEL_UM,
            );
            if u < seg.start || u >= seg.end || v.abs() > lay.half_width_um {
                continue;
            }
            let (du, dv) = (u - g.u, v - g.v);
            if du * du + dv * dv > r2 {
                continue;
            }
            let n = noise(x, y, u, v, seed);
            let in_lumen = g
                .lumens
                .iter()
                .any(|&(lu, lv, lr)| (du - lu).powi(2) + (dv - lv).powi(2) <= lr * lr);
            let px = if in_lumen {
                shade(LUMEN, n * 0.4)
            } else if nucleus_at(u, v, 0.55, seed) {
                shade(NUCLEUS, n * 0.5)
            } else {
                shade(EPITHELIUM, n)
            };
            img.put_pixel(x, y, px);
        }
    }
}

fn truth_masks(spec: &SynthSpec, lay: &Layout) -> (BinaryMask, LabelMask) {
    let (mw, mh) = (
        lay.width.div_ceil(MASK_DS) as usize,
        lay.height.div_ceil(MASK_DS) as usize,
    );
    let cell = BASE_PIXEL_UM * MASK_DS as f64;
    let cancer_value = |seg: &Segment| match (seg.pattern, spec.grade_coded) {
        (None, _) => label::BENIGN,
        (Some(p), true) => p,
        (Some(_), false) => label::CANCER,
    };
    let labels = Grid::from_fn(mw, mh, |x, y| {
        let (u, v) = lay
            .frame
            .to_local((x as f64 + 0.5) * cell, (y as f64 + 0.5) * cell);
        if u >= 0.0 && u < lay.length_um && v.abs() <= lay.half_width_um {
            lay.segments
                .iter()
                .find(|s| u >= s.start && u < s.end)
                .map_or(label::BENIGN, cancer_value)
        } else {
            label::UNKNOWN
        }
    });
    let tissue = BinaryMask::from_grid(labels.map(|&l| l != label::UNKNOWN), MASK_DS);
    let labels = LabelMask::from_grid(labels, MASK_DS).expect("valid labels");
    (tissue, labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Slides per class: benign, ISUP 1..=5.
    pub counts: [usize; 6],
    pub seed: u64,
    pub min_cores_per_man: usize,
    pub max_cores_per_man: usize,
    pub core_length_mm: (f64, f64),
    pub core_width_um: (f64, f64),
    /// Fraction of the core length covered by cancer.
    pub span_fraction: (f64, f64),
    pub rotation_deg: (f64, f64),
    pub grade_coded_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            counts: [0; 6],
            seed: 0,
            min_cores_per_man: 10,
            max_cores_per_man: 12,
            core_length_mm: (12.0, 16.0),
            core_width_um: (900.0, 1100.0),
            span_fraction: (0.15, 0.7),
            rotation_deg: (-8.0, 8.0),
            grade_coded_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub man_id: String,
    pub isup: u8,
    pub patterns: Option<(u8, u8)>,
    pub cancer_length_mm: f64,
    pub spec: SynthSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub slides: Vec<ManifestEntry>,
}

fn draw(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

/// Draws slide specifications and groups them into men.
pub fn plan_dataset(cfg: &DatasetConfig) -> Result<Manifest> {
    if cfg.min_cores_per_man == 0 || cfg.max_cores_per_man < cfg.min_cores_per_man {
        return Err(Error::InvalidParam("invalid cores-per-man range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut grades: Vec<u8> = Vec::new();
    for (g, &n) in cfg.counts.iter().enumerate() {
        grades.extend(std::iter::repeat_n(g as u8, n));
    }
    grades.shuffle(&mut rng);
    let mut slides = Vec::with_capacity(grades.len());
    let mut man = 0usize;
    let mut left_in_man = 0usize;
    for (i, &isup) in grades.iter().enumerate() {
        if left_in_man == 0 {
            man += 1;
            left_in_man = rng.random_range(cfg.min_cores_per_man..=cfg.max_cores_per_man);
        }
        left_in_man -= 1;
        let slide_id = format!("slide_{i:05}");
        let length = draw(&mut rng, cfg.core_length_mm);
        // keep every pen segment wide enough to survive segmentation
        let frac = draw(&mut rng, cfg.span_fraction)
            .max(MIN_SPAN_MM / length)
            .min(1.0);
        let start = rng.random_range(0.0..(1.0 - frac).max(1e-9));
        let patterns = match isup {
            5 => [(5, 5), (4, 5), (5, 4)].choose(&mut rng).copied(),
            g => default_patterns(g),
        };
        let spec = SynthSpec {
            slide_id: slide_id.clone(),
            isup,
            patterns,
            core_length_mm: length,
            core_width_um: draw(&mut rng, cfg.core_width_um),
            cancer_span: if isup == 0 {
                (0.0, 0.0)
            } else {
                (start, start + frac)
            },
            secondary_fraction: if isup == 0 {
                0.0
            } else {
                rng.random_range(0.3..0.45)
            },
            rotation_deg: draw(&mut rng, cfg.rotation_deg),
            pen_offset_um: rng.random_range(200.0..500.0),
            pen_width_um: rng.random_range(600.0..800.0),
            pen_above: rng.random_bool(0.5),
            grade_coded: isup > 0 && rng.random_bool(cfg.grade_coded_fraction.clamp(0.0, 1.0)),
            seed: rng.random(),
        };
        slides.push(ManifestEntry {
            slide_id,
            man_id: format!("man_{man:04}"),
            isup,
            patterns: spec.patterns(),
            cancer_length_mm: spec.cancer_length_mm(),
            spec,
        });
    }
    Ok(Manifest {
        schema_version: 1,
        seed: cfg.seed,
        slides,
    })
}

/// Splits slide ids by man so that no man contributes to both sides;
/// `test_fraction` of the men (rounded) go to the test side.
pub fn split_by_man(
    manifest: &Manifest,
    test_fraction: f64,
    seed: u64,
) -> (Vec<String>, Vec<String>) {
    let mut men: Vec<&str> = manifest.slides.iter().map(|s| s.man_id.as_str()).collect();
    men.sort_unstable();
    men.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    men.shuffle(&mut rng);
    let n_test = (men.len() as f64 * test_fraction).round() as usize;
    let test: std::collections::BTreeSet<&str> =
        men[..n_test.min(men.len())].iter().copied().collect();
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for s in &manifest.slides {
        if test.contains(s.man_id.as_str()) {
            held.push(s.slide_id.clone());
        } else {
            train.push(s.slide_id.clone());
        }
    }
    (train, held)
}

pub fn slide_dir(root: &Path, slide_id: &str) -> PathBuf {
    root.join(slide_id)
}

pub fn truth_labels_path(root: &Path, slide_id: &str) -> PathBuf {
    slide_dir(root, slide_id).join("truth_labels.png")
}

/// Renders every planned slide into `root/<slide_id>/` (slide pack, truth
/// label mask and truth JSON) and writes `root/manifest.json`.
pub fn write_dataset(manifest: &Manifest, root: &Path) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    manifest
        .slides
        .par_iter()
        .try_for_each(|entry| -> Result<()> {
            let (pyr, truth) = generate_slide(&entry.spec)?;
            let dir = slide_dir(root, &entry.slide_id);
            save_slidepack(&pyr, &dir)?;
            save_mask(
                &Mask::Label(truth.labels.clone().expect("generated")),
                &truth_labels_path(root, &entry.slide_id),
            )?;
            let json = serde_json::to_string_pretty(&truth)?;
            let p = dir.join("truth.json");
            std::fs::write(&p, json).map_err(|e| Error::io(&p, e))
        })?;
    let p = root.join("manifest.json");
    std::fs::write(&p, serde_json::to_string_pretty(manifest)?).map_err(|e| Error::io(&p, e))
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}
