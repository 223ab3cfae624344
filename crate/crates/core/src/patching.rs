//! Sliding-window patch grid, patch extraction and labelling, the
//! class-balanced epoch sampler and dihedral augmentation.

use std::collections::BTreeMap;

use image::imageops;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{label, BinaryMask, LabelMask, Rect, RgbImage};
use crate::slide_io::{mask_at_base, ImagePyramid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchGridConfig {
    /// Stride in output patch pixels.
    pub stride_px: u32,
    /// Patch side in output pixels.
    pub patch_px: u32,
    /// Nominal pyramid level the patches correspond to; the actual sampling
    /// scale follows from `target_pixel_um` and the slide's base pixel size.
    pub level: u32,
    pub min_tissue_frac: f64,
    pub target_pixel_um: f64,
}

impl Default for PatchGridConfig {
    fn default() -> Self {
        PatchGridConfig {
            stride_px: 299,
            patch_px: 598,
            level: 1,
            min_tissue_frac: 0.5,
            target_pixel_um: 0.904,
        }
    }
}

impl PatchGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride_px == 0 || self.patch_px < self.stride_px {
            return Err(Error::InvalidParam("need patch_px >= stride_px > 0".into()));
        }
        if !(self.min_tissue_frac > 0.0 && self.min_tissue_frac <= 1.0) {
            return Err(Error::InvalidParam(
                "min_tissue_frac must lie in (0, 1]".into(),
            ));
        }
        if !(self.target_pixel_um > 0.0) {
            return Err(Error::InvalidParam(
                "target_pixel_um must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Base pixels per output patch pixel.
    pub fn base_per_patch_px(&self, base_pixel_um: f64) -> f64 {
        self.target_pixel_um / base_pixel_um
    }

    /// Window side in base pixels.
    pub fn window_base_px(&self, base_pixel_um: f64) -> u32 {
        (self.patch_px as f64 * self.base_per_patch_px(base_pixel_um)).round() as u32
    }
}

/// Square window in base-level coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub x: u32,
    pub y: u32,
    pub size: u32,
}

impl Window {
    pub fn rect(&self) -> Rect {
        Rect::new(self.x, self.y, self.size, self.size)
    }

    // Mask cells whose centres fall inside the window.
    fn cells(&self, ds: u32, mw: usize, mh: usize) -> impl Iterator<Item = (usize, usize)> {
        let ds = ds as f64;
        let edge = |v: u32| (v as f64 / ds - 0.5).ceil().max(0.0) as usize;
        let (x0, y0) = (edge(self.x), edge(self.y));
        let (x1, y1) = (
            edge(self.x + self.size).min(mw),
            edge(self.y + self.size).min(mh),
        );
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }
}

/// All fully contained windows on the stride lattice whose tissue fraction,
/// measured on the mask cells they cover, reaches `min_tissue_frac`.
pub fn plan_patch_grid(
    tissue: &BinaryMask,
    cfg: &PatchGridConfig,
    base_pixel_um: f64,
    base_width: u32,
    base_height: u32,
) -> Result<Vec<Window>> {
    cfg.validate()?;
    let k = cfg.base_per_patch_px(base_pixel_um);
    let size = cfg.window_base_px(base_pixel_um);
    let stride = cfg.stride_px as f64 * k;
    let offsets = |limit: u32| -> Vec<u32> {
        let mut v = Vec::new();
        let mut i = 0u64;
        loop {
            let o = (i as f64 * stride).round() as u64;
            if o + size as u64 > limit as u64 {
                break;
            }
            v.push(o as u32);
            i += 1;
        }
        v
    };
    let (xs, ys) = (offsets(base_width), offsets(base_height));
    let mut out = Vec::new();
    for &y in &ys {
        for &x in &xs {
            let win = Window { x, y, size };
            let (mut n, mut t) = (0usize, 0usize);
            for (cx, cy) in win.cells(tissue.downsample, tissue.width(), tissue.height()) {
                n += 1;
                t += tissue.get(cx, cy) as usize;
            }
            if n > 0 && t as f64 >= cfg.min_tissue_frac * n as f64 {
                out.push(win);
            }
        }
    }
    Ok(out)
}

pub const WHITE: image::Rgb<u8> = image::Rgb([255, 255, 255]);

/// Patch pixels at the target pixel size, with non-tissue and pen pixels
/// set to white.
pub fn extract_patch(
    pyr: &ImagePyramid,
    window: &Window,
    tissue: &BinaryMask,
    pen: Option<&BinaryMask>,
    cfg: &PatchGridConfig,
) -> Result<RgbImage> {
    let t = cfg.patch_px;
    let mut img = pyr.read_region_resized(window.rect(), t, t)?;
    let scale = window.size as f64 / t as f64;
    for v in 0..t {
        let by = window.y as f64 + (v as f64 + 0.5) * scale;
        for u in 0..t {
            let bx = window.x as f64 + (u as f64 + 0.5) * scale;
            let keep =
                mask_at_base(tissue, bx, by) && !pen.is_some_and(|p| mask_at_base(p, bx, by));
            if !keep {
                img.put_pixel(u, v, WHITE);
            }
        }
    }
    Ok(img)
}

#[derive(Clone, Debug)]
pub struct Patch {
    pub slide_id: String,
    pub x: u32,
    pub y: u32,
    pub pixels: RgbImage,
    pub label: u8,
}

// Ordering used to break mode ties: more malignant wins.
fn severity(l: u8) -> u16 {
    if l == label::MIXED {
        6
    } else {
        l as u16
    }
}

/// Most frequent label among tissue cells inside the window.
pub fn label_patch(window: &Window, labels: &LabelMask, tissue: &BinaryMask) -> Result<u8> {
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for (x, y) in window.cells(labels.downsample, labels.width(), labels.height()) {
        if x < tissue.width() && y < tissue.height() && tissue.get(x, y) {
            *counts.entry(labels.get(x, y)).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(severity(a.0).cmp(&severity(b.0))))
        .map(|(l, _)| l)
        .ok_or_else(|| {
            Error::Degenerate(format!(
                "window at ({}, {}) covers no tissue",
                window.x, window.y
            ))
        })
}

/// One class-balanced epoch: every item of the rarest class plus an equal
/// number drawn without replacement from each other class, shuffled.
pub fn balanced_epoch<R: Rng + ?Sized>(
    classes: &[usize],
    n_classes: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in classes.iter().enumerate() {
        if c >= n_classes {
            return Err(Error::InvalidParam(format!(
                "class {c} outside 0..{n_classes}"
            )));
        }
        by_class[c].push(i);
    }
    if let Some(c) = by_class.iter().position(|v| v.is_empty()) {
        return Err(Error::EmptyClass(format!("class {c} has no samples")));
    }
    let m = by_class.iter().map(Vec::len).min().unwrap_or(0);
    let mut out = Vec::with_capacity(m * n_classes);
    for items in &by_class {
        if items.len() == m {
            out.extend_from_slice(items);
        } else {
            out.extend(items.choose_multiple(rng, m).copied());
        }
    }
    out.shuffle(rng);
    Ok(out)
}

/// Independent balanced epochs from one seeded stream.
pub fn balanced_epochs(
    classes: &[usize],
    n_classes: usize,
    epochs: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..epochs)
        .map(|_| balanced_epoch(classes, n_classes, &mut rng))
        .collect()
}

/// Element of the square's symmetry group: counter-clockwise quarter turns
/// followed by an optional vertical flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dihedral {
    pub quarter_turns: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        quarter_turns: 0,
        flip: false,
    };

    pub fn all() -> [Dihedral; 8] {
        let mut out = [Dihedral::IDENTITY; 8];
        for (i, d) in out.iter_mut().enumerate() {
            *d = Dihedral {
                quarter_turns: (i / 2) as u8,
                flip: i % 2 == 1,
            };
        }
        out
    }

    pub fn index(&self) -> usize {
        self.quarter_turns as usize * 2 + self.flip as usize
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let quarter_turns = rng.random_range(0..4u8);
        let flip = rng.random_bool(0.5);
        Dihedral {
            quarter_turns,
            flip,
        }
    }

    /// Whether the transform swaps the image axes.
    pub fn swaps_axes(&self) -> bool {
        self.quarter_turns % 2 == 1
    }

    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        let rotated = match self.quarter_turns % 4 {
            0 => img.clone(),
            // image's rotate90 is clockwise
            1 => imageops::rotate270(img),
            2 => imageops::rotate180(img),
            _ => imageops::rotate90(img),
        };
        if self.flip {
            imageops::flip_vertical(&rotated)
        } else {
            rotated
        }
    }
}

/// Random rotation by a multiple of 90° then a vertical flip with
/// probability ½.
pub fn augment<R: Rng + ?Sized>(patch: &RgbImage, rng: &mut R) -> (RgbImage, Dihedral) {
    let d = Dihedral::random(rng);
    (d.apply(patch), d)
}
