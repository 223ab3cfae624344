//! Multi-resolution slides ("SlidePack" directories) and mask files.
//!
//! A SlidePack is a directory holding `meta.json` plus one PNG per pyramid
//! level (`level_<factor>.png`). Masks are a single-channel PNG with a
//! `<name>.mask.json` sidecar recording the kind and downsample.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder, Rgb};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Grid, LabelMask, Rect, RgbImage};

pub const SLIDEPACK_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub factor: u32,
    pub raster: RgbImage,
}

/// Multi-resolution RGB raster with a physical base pixel size.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePyramid {
    pixel_size_um: f64,
    base_width: u32,
    base_height: u32,
    levels: Vec<Level>,
}

impl ImagePyramid {
    /// Validates level ordering, presence of the base level and level
    /// dimensions (`ceil(base / factor)` per axis).
    pub fn new(pixel_size_um: f64, mut levels: Vec<Level>) -> Result<Self> {
        if !(pixel_size_um > 0.0 && pixel_size_um.is_finite()) {
            return Err(Error::InvalidParam(format!("pixel size {pixel_size_um}")));
        }
        levels.sort_by_key(|l| l.factor);
        if levels.first().map(|l| l.factor) != Some(1) {
            return Err(Error::BaseLevelRequired);
        }
        if levels.windows(2).any(|w| w[0].factor == w[1].factor) {
            return Err(Error::InvalidParam("duplicate level factor".into()));
        }
        let (bw, bh) = levels[0].raster.dimensions();
        for l in &levels[1..] {
            let expected = (bw.div_ceil(l.factor), bh.div_ceil(l.factor));
            let got = l.raster.dimensions();
            if got != expected {
                return Err(Error::LevelDimensionMismatch {
                    factor: l.factor,
                    got,
                    expected,
                });
            }
        }
        Ok(ImagePyramid {
            pixel_size_um,
            base_width: bw,
            base_height: bh,
            levels,
        })
    }

    /// Builds the requested levels from a base raster by area averaging.
    pub fn from_base(base: RgbImage, pixel_size_um: f64, factors: &[u32]) -> Result<Self> {
        let mut levels = vec![];
        for &f in factors {
            if f > 1 {
                levels.push(Level {
                    factor: f,
                    raster: box_downsample(&base, f),
                });
            }
        }
        levels.push(Level {
            factor: 1,
            raster: base,
        });
        ImagePyramid::new(pixel_size_um, levels)
    }

    pub fn pixel_size_um(&self) -> f64 {
        self.pixel_size_um
    }

    pub fn base_width(&self) -> u32 {
        self.base_width
    }

    pub fn base_height(&self) -> u32 {
        self.base_height
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn level(&self, factor: u32) -> Option<&Level> {
        self.levels.iter().find(|l| l.factor == factor)
    }

    pub fn base(&self) -> &RgbImage {
        &self.levels[0].raster
    }

    pub fn full_rect(&self) -> Rect {
        Rect::new(0, 0, self.base_width, self.base_height)
    }

    /// Finest available level whose factor does not exceed `max_factor`.
    fn finer_level(&self, max_factor: f64) -> &Level {
        self.levels
            .iter()
            .rev()
            .find(|l| l.factor as f64 <= max_factor + 1e-9)
            .unwrap_or(&self.levels[0])
    }

    fn crop_level(&self, level: &Level, rect: Rect) -> RgbImage {
        let f = level.factor;
        let (lw, lh) = level.raster.dimensions();
        let x0 = rect.x / f;
        let y0 = rect.y / f;
        let w = rect.w.div_ceil(f).min(lw - x0);
        let h = rect.h.div_ceil(f).min(lh - y0);
        image::imageops::crop_imm(&level.raster, x0, y0, w, h).to_image()
    }

    /// Reads `rect` (base coordinates) at `target_downsample`. When that
    /// level is not stored, the next finer level is read and resized down
    /// with Lanczos-3 interpolation.
    pub fn read_region(&self, target_downsample: u32, rect: Rect) -> Result<RgbImage> {
        if target_downsample == 0 {
            return Err(Error::InvalidParam("downsample must be >= 1".into()));
        }
        if !rect.within(self.base_width, self.base_height) {
            return Err(Error::OutOfBounds(rect.to_string()));
        }
        let out_w = rect.w.div_ceil(target_downsample);
        let out_h = rect.h.div_ceil(target_downsample);
        let level = self.finer_level(target_downsample as f64);
        let crop = self.crop_level(level, rect);
        if level.factor == target_downsample || crop.dimensions() == (out_w, out_h) {
            Ok(crop)
        } else {
            Ok(resize_lanczos3(&crop, out_w, out_h))
        }
    }

    /// Reads `rect` resampled to exactly `out_w`×`out_h`, from the finest
    /// level that is not coarser than the requested scale.
    pub fn read_region_resized(&self, rect: Rect, out_w: u32, out_h: u32) -> Result<RgbImage> {
        if !rect.within(self.base_width, self.base_height) {
            return Err(Error::OutOfBounds(rect.to_string()));
        }
        if out_w == 0 || out_h == 0 {
            return Err(Error::InvalidParam("empty output size".into()));
        }
        let scale = (rect.w as f64 / out_w as f64).min(rect.h as f64 / out_h as f64);
        let level = self.finer_level(scale);
        let crop = self.crop_level(level, rect);
        if crop.dimensions() == (out_w, out_h) {
            Ok(crop)
        } else {
            Ok(resize_lanczos3(&crop, out_w, out_h))
        }
    }
}

/// Area-average downsample to `ceil(dim / factor)`; partial edge blocks
/// average only the pixels they cover.
pub fn box_downsample(img: &RgbImage, factor: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let (ow, oh) = (w.div_ceil(factor), h.div_ceil(factor));
    let f = factor as usize;
    let src = img.as_raw();
    let mut out = vec![0u8; (ow * oh * 3) as usize];
    out.par_chunks_mut((ow * 3) as usize)
        .enumerate()
        .for_each(|(oy, row)| {
            let y0 = oy * f;
            let y1 = (y0 + f).min(h as usize);
            let mut acc = vec![0u64; ow as usize * 3];
            let mut cnt = vec![0u64; ow as usize];
            for y in y0..y1 {
                let line = &src[y * w as usize * 3..(y + 1) * w as usize * 3];
                for x in 0..w as usize {
                    let ox = x / f;
                    acc[ox * 3] += line[x * 3] as u64;
                    acc[ox * 3 + 1] += line[x * 3 + 1] as u64;
                    acc[ox * 3 + 2] += line[x * 3 + 2] as u64;
                    cnt[ox] += 1;
                }
            }
            for ox in 0..ow as usize {
                let n = cnt[ox];
                for c in 0..3 {
                    row[ox * 3 + c] = ((2 * acc[ox * 3 + c] + n) / (2 * n)) as u8;
                }
            }
        });
    RgbImage::from_raw(ow, oh, out).expect("buffer sized")
}

fn lanczos3(x: f64) -> f64 {
    const A: f64 = 3.0;
    if x == 0.0 {
        1.0
    } else if x.abs() < A {
        let px = std::f64::consts::PI * x;
        A * px.sin() * (px / A).sin() / (px * px)
    } else {
        0.0
    }
}

struct AxisWeights {
    start: Vec<usize>,
    weights: Vec<Vec<f64>>,
}

// Pixel-centre mapping with the kernel widened by the scale factor when
// shrinking; taps falling outside the source are dropped and the remaining
// weights renormalized.
fn axis_weights(src: usize, dst: usize) -> AxisWeights {
    let ratio = src as f64 / dst as f64;
    let sratio = ratio.max(1.0);
    let support = 3.0 * sratio;
    let mut start = Vec::with_capacity(dst);
    let mut weights = Vec::with_capacity(dst);
    for o in 0..dst {
        let center = (o as f64 + 0.5) * ratio;
        let left = ((center - support).floor().max(0.0)) as usize;
        let right = ((center + support).ceil() as usize).min(src);
        let mut ws: Vec<f64> = (left..right)
            .map(|i| lanczos3((i as f64 - center + 0.5) / sratio))
            .collect();
        let sum: f64 = ws.iter().sum();
        if sum != 0.0 {
            ws.iter_mut().for_each(|w| *w /= sum);
        }
        start.push(left);
        weights.push(ws);
    }
    AxisWeights { start, weights }
}

/// Separable Lanczos-3 resize of an RGB raster.
pub fn resize_lanczos3(img: &RgbImage, out_w: u32, out_h: u32) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (ow, oh) = (out_w as usize, out_h as usize);
    if (w, h) == (ow, oh) {
        return img.clone();
    }
    let hx = axis_weights(w, ow);
    let vy = axis_weights(h, oh);
    let src = img.as_raw();
    // horizontal pass
    let mut tmp = vec![0f64; ow * h * 3];
    tmp.par_chunks_mut(ow * 3).enumerate().for_each(|(y, row)| {
        let line = &src[y * w * 3..(y + 1) * w * 3];
        for ox in 0..ow {
            let (s, ws) = (hx.start[ox], &hx.weights[ox]);
            let mut acc = [0f64; 3];
            for (k, &wt) in ws.iter().enumerate() {
                let p = (s + k) * 3;
                acc[0] += wt * line[p] as f64;
                acc[1] += wt * line[p + 1] as f64;
                acc[2] += wt * line[p + 2] as f64;
            }
            row[ox * 3..ox * 3 + 3].copy_from_slice(&acc);
        }
    });
    // vertical pass
    let mut out = vec![0u8; ow * oh * 3];
    out.par_chunks_mut(ow * 3)
        .enumerate()
        .for_each(|(oy, row)| {
            let (s, ws) = (vy.start[oy], &vy.weights[oy]);
            for i in 0..ow * 3 {
                let mut acc = 0.0;
                for (k, &wt) in ws.iter().enumerate() {
                    acc += wt * tmp[(s + k) * ow * 3 + i];
                }
                row[i] = acc.round().clamp(0.0, 255.0) as u8;
            }
        });
    RgbImage::from_raw(out_w, out_h, out).expect("buffer sized")
}

#[derive(Debug, Serialize, Deserialize)]
struct LevelEntry {
    factor: u32,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SlideMeta {
    schema_version: u32,
    pixel_size_um: f64,
    width: u32,
    height: u32,
    levels: Vec<LevelEntry>,
}

pub(crate) fn write_png(
    path: &Path,
    data: &[u8],
    w: u32,
    h: u32,
    color: ExtendedColorType,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let enc = PngEncoder::new_with_quality(
        BufWriter::new(file),
        CompressionType::Fast,
        FilterType::Adaptive,
    );
    enc.write_image(data, w, h, color)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn save_rgb_png(img: &RgbImage, path: &Path) -> Result<()> {
    write_png(
        path,
        img.as_raw(),
        img.width(),
        img.height(),
        ExtendedColorType::Rgb8,
    )
}

fn read_image(path: &Path) -> Result<image::DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_rgb_png(path: &Path) -> Result<RgbImage> {
    use image::DynamicImage as D;
    match read_image(path)? {
        D::ImageRgb8(img) => Ok(img),
        img @ (D::ImageRgba8(_) | D::ImageLuma8(_) | D::ImageLumaA8(_)) => Ok(img.to_rgb8()),
        _ => Err(Error::UnsupportedBitDepth(path.to_path_buf())),
    }
}

pub fn save_slidepack(pyr: &ImagePyramid, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for l in &pyr.levels {
        let file = format!("level_{}.png", l.factor);
        save_rgb_png(&l.raster, &dir.join(&file))?;
        entries.push(LevelEntry {
            factor: l.factor,
            file,
        });
    }
    let meta = SlideMeta {
        schema_version: SLIDEPACK_SCHEMA_VERSION,
        pixel_size_um: pyr.pixel_size_um,
        width: pyr.base_width,
        height: pyr.base_height,
        levels: entries,
    };
    let path = dir.join("meta.json");
    fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

pub fn load_slidepack(dir: &Path) -> Result<ImagePyramid> {
    let meta_path = dir.join("meta.json");
    let bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SlideMeta = serde_json::from_slice(&bytes).map_err(|source| Error::Descriptor {
        path: meta_path.clone(),
        source,
    })?;
    if meta.schema_version != SLIDEPACK_SCHEMA_VERSION {
        return Err(Error::InvalidParam(format!(
            "unsupported slidepack schema version {}",
            meta.schema_version
        )));
    }
    if !meta.levels.iter().any(|l| l.factor == 1) {
        return Err(Error::BaseLevelRequired);
    }
    let mut levels = Vec::with_capacity(meta.levels.len());
    for entry in &meta.levels {
        if entry.factor == 0 {
            return Err(Error::InvalidParam("level factor 0".into()));
        }
        let raster = load_rgb_png(&dir.join(&entry.file))?;
        levels.push(Level {
            factor: entry.factor,
            raster,
        });
    }
    let pyr = ImagePyramid::new(meta.pixel_size_um, levels)?;
    if (pyr.base_width, pyr.base_height) != (meta.width, meta.height) {
        return Err(Error::LevelDimensionMismatch {
            factor: 1,
            got: (pyr.base_width, pyr.base_height),
            expected: (meta.width, meta.height),
        });
    }
    Ok(pyr)
}

/// A mask file's payload.
#[derive(Clone, Debug, PartialEq)]
pub enum Mask {
    Binary(BinaryMask),
    Label(LabelMask),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum MaskKind {
    Binary,
    Label,
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskMeta {
    kind: MaskKind,
    downsample: u32,
}

/// `dir/name.png` → `dir/name.mask.json`.
pub fn mask_sidecar_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.mask.json"))
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let (kind, ds, w, h, data) = match mask {
        Mask::Binary(m) => (
            MaskKind::Binary,
            m.downsample,
            m.width(),
            m.height(),
            m.bits
                .as_slice()
                .iter()
                .map(|&b| if b { 255 } else { 0 })
                .collect::<Vec<u8>>(),
        ),
        Mask::Label(m) => (
            MaskKind::Label,
            m.downsample,
            m.width(),
            m.height(),
            m.grid().as_slice().to_vec(),
        ),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_png(path, &data, w as u32, h as u32, ExtendedColorType::L8)?;
    let side = mask_sidecar_path(path);
    let meta = MaskMeta {
        kind,
        downsample: ds,
    };
    fs::write(&side, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&side, e))
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let side = mask_sidecar_path(path);
    let bytes = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let meta: MaskMeta = serde_json::from_slice(&bytes).map_err(|source| Error::Descriptor {
        path: side.clone(),
        source,
    })?;
    let img = match read_image(path)? {
        image::DynamicImage::ImageLuma8(g) => g,
        _ => return Err(Error::UnsupportedBitDepth(path.to_path_buf())),
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    match meta.kind {
        MaskKind::Binary => {
            if let Some(&v) = raw.iter().find(|&&v| v != 0 && v != 255) {
                return Err(Error::Degenerate(format!("binary mask value {v}")));
            }
            let bits = raw.iter().map(|&v| v == 255).collect();
            Ok(Mask::Binary(BinaryMask::from_grid(
                Grid::from_vec(w, h, bits)?,
                meta.downsample,
            )))
        }
        MaskKind::Label => Ok(Mask::Label(LabelMask::from_grid(
            Grid::from_vec(w, h, raw)?,
            meta.downsample,
        )?)),
    }
}

pub fn load_binary_mask(path: &Path) -> Result<BinaryMask> {
    match load_mask(path)? {
        Mask::Binary(m) => Ok(m),
        Mask::Label(_) => Err(Error::InvalidParam(format!(
            "{} is a label mask",
            path.display()
        ))),
    }
}

pub fn load_label_mask(path: &Path) -> Result<LabelMask> {
    match load_mask(path)? {
        Mask::Label(m) => Ok(m),
        Mask::Binary(_) => Err(Error::InvalidParam(format!(
            "{} is a binary mask",
            path.display()
        ))),
    }
}

/// Nearest-neighbour lookup of a mask value at a base-level coordinate.
#[inline]
pub fn mask_at_base(mask: &BinaryMask, bx: f64, by: f64) -> bool {
    let ds = mask.downsample as f64;
    let x = ((bx / ds).floor().max(0.0) as usize).min(mask.width().saturating_sub(1));
    let y = ((by / ds).floor().max(0.0) as usize).min(mask.height().saturating_sub(1));
    mask.get(x, y)
}

pub fn rgb(r: u8, g: u8, b: u8) -> Rgb<u8> {
    Rgb([r, g, b])
}
