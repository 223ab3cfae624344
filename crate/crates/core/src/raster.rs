//! Plain raster containers shared by every stage: a generic row-major grid,
//! boolean masks and semantic label masks.
//!
//! RGB rasters use [`image::RgbImage`] directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use image::RgbImage;

/// Row-major 2-D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Grid {
            width,
            height,
            data: vec![fill; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "grid {width}x{height} needs {} cells, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Grid {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Grid {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

impl<T: Copy> Grid<T> {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[self.idx(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        let i = self.idx(x, y);
        self.data[i] = v;
    }
}

/// Boolean mask at a stated downsample factor relative to the slide base level.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub downsample: u32,
    pub bits: Grid<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize, downsample: u32) -> Self {
        BinaryMask {
            downsample,
            bits: Grid::new(width, height, false),
        }
    }

    pub fn from_grid(bits: Grid<bool>, downsample: u32) -> Self {
        BinaryMask { downsample, bits }
    }

    pub fn width(&self) -> usize {
        self.bits.width()
    }

    pub fn height(&self) -> usize {
        self.bits.height()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits.get(x, y)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits.set(x, y, v)
    }

    pub fn count(&self) -> usize {
        self.bits.as_slice().iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.as_slice().iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.downsample == other.downsample && self.bits.same_shape(&other.bits)
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> BinaryMask {
        assert!(self.bits.same_shape(&other.bits), "mask shape mismatch");
        let data = self
            .bits
            .as_slice()
            .iter()
            .zip(other.bits.as_slice())
            .map(|(&a, &b)| f(a, b))
            .collect();
        BinaryMask {
            downsample: self.downsample,
            bits: Grid::from_vec(self.width(), self.height(), data).expect("shape checked"),
        }
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn or(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn and_not(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn not(&self) -> BinaryMask {
        BinaryMask {
            downsample: self.downsample,
            bits: self.bits.map(|&b| !b),
        }
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        assert!(self.bits.same_shape(&other.bits), "mask shape mismatch");
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.as_slice().iter().zip(other.bits.as_slice()) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Semantic pixel labels.
pub mod label {
    pub const UNKNOWN: u8 = 0;
    pub const BENIGN: u8 = 1;
    pub const CANCER: u8 = 2;
    pub const GLEASON3: u8 = 3;
    pub const GLEASON4: u8 = 4;
    pub const GLEASON5: u8 = 5;
    pub const MIXED: u8 = 255;

    pub const ALL: [u8; 7] = [UNKNOWN, BENIGN, CANCER, GLEASON3, GLEASON4, GLEASON5, MIXED];

    pub fn is_valid(v: u8) -> bool {
        ALL.contains(&v)
    }

    /// Any cancer label, graded or not.
    pub fn is_cancer(v: u8) -> bool {
        matches!(v, CANCER | GLEASON3 | GLEASON4 | GLEASON5 | MIXED)
    }
}

/// 8-bit label raster restricted to the values in [`label::ALL`].
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    pub downsample: u32,
    labels: Grid<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, downsample: u32) -> Self {
        LabelMask {
            downsample,
            labels: Grid::new(width, height, label::UNKNOWN),
        }
    }

    pub fn from_grid(labels: Grid<u8>, downsample: u32) -> Result<Self> {
        if let Some(&bad) = labels.as_slice().iter().find(|&&v| !label::is_valid(v)) {
            return Err(Error::InvalidLabel(bad));
        }
        Ok(LabelMask { downsample, labels })
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels.get(x, y)
    }

    /// Panics on a value outside the label set.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        assert!(label::is_valid(v), "invalid label {v}");
        self.labels.set(x, y, v)
    }

    pub fn mask_where(&self, pred: impl Fn(u8) -> bool) -> BinaryMask {
        BinaryMask::from_grid(self.labels.map(|&v| pred(v)), self.downsample)
    }

    /// Checks that no non-tissue pixel carries a non-zero label.
    pub fn consistent_with(&self, tissue: &BinaryMask) -> bool {
        self.labels.same_shape(&tissue.bits)
            && self
                .labels
                .as_slice()
                .iter()
                .zip(tissue.bits.as_slice())
                .all(|(&l, &t)| l == label::UNKNOWN || t)
    }
}

/// Axis-aligned rectangle in base-level pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Rect { x, y, w, h }
    }

    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.w > 0 && self.h > 0 && self.right() <= width as u64 && self.bottom() <= height as u64
    }
}

impl std::fmt::Display for Rect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}+{}+{}", self.w, self.h, self.x, self.y)
    }
}

#[inline]
pub fn div_ceil(a: u32, b: u32) -> u32 {
    a.div_ceil(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_mask_rejects_unknown_values() {
        let g = Grid::from_vec(2, 1, vec![1u8, 7]).unwrap();
        assert!(matches!(
            LabelMask::from_grid(g, 16),
            Err(Error::InvalidLabel(7))
        ));
    }

    #[test]
    fn iou_of_disjoint_and_equal_masks() {
        let mut a = BinaryMask::empty(4, 4, 16);
        let mut b = BinaryMask::empty(4, 4, 16);
        a.set(0, 0, true);
        b.set(3, 3, true);
        assert_eq!(a.iou(&b), 0.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(
            BinaryMask::empty(2, 2, 1).iou(&BinaryMask::empty(2, 2, 1)),
            1.0
        );
    }

    #[test]
    fn rect_bounds() {
        assert!(Rect::new(0, 0, 10, 10).within(10, 10));
        assert!(!Rect::new(1, 0, 10, 10).within(10, 10));
        assert!(!Rect::new(0, 0, 0, 10).within(10, 10));
    }
}
