use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-pixel foreground flags of an `height × width` image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim(format!(
                "mask dims {height}×{width} must be positive"
            )));
        }
        if data.len() != height * width {
            return Err(Error::dim(format!(
                "mask {height}×{width} needs {} flags, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::filled(height, width, false)
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::filled(height, width, true)
    }

    fn filled(height: usize, width: usize, v: bool) -> Self {
        assert!(height > 0 && width > 0, "mask dims must be positive");
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(height, width);
        for r in 0..height {
            for c in 0..width {
                m.data[r * width + c] = f(r, c);
            }
        }
        m
    }

    /// Foreground where `values[i] >= threshold`.
    pub fn from_threshold<T: Copy + PartialOrd>(
        height: usize,
        width: usize,
        values: &[T],
        threshold: T,
    ) -> Result<Self> {
        Self::new(height, width, values.iter().map(|&v| v >= threshold).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn has_foreground(&self) -> bool {
        self.data.iter().any(|&v| v)
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| !v).collect(),
        }
    }

    pub fn intersect(&self, other: &Self) -> Result<Self> {
        if self.dims() != other.dims() {
            return Err(Error::dim(format!(
                "intersect: mask dims {:?} and {:?} differ",
                self.dims(),
                other.dims()
            )));
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }

    /// `true` when every foreground pixel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Foreground pixel coordinates `(row, col)`.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(move |(i, _)| (i / w, i % w))
    }

    /// Inclusive bounding box `(top, left, bottom, right)` of the foreground.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        self.foreground().fold(None, |acc, (r, c)| match acc {
            None => Some((r, c, r, c)),
            Some((t, l, b, rr)) => Some((t.min(r), l.min(c), b.max(r), rr.max(c))),
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    /// Nearest-neighbour resize with pixel-centre alignment.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Self::from_fn(height, width, |r, c| {
            let sr = (((r as f64 + 0.5) * sy) as usize).min(self.height - 1);
            let sc = (((c as f64 + 0.5) * sx) as usize).min(self.width - 1);
            self.get(sr, sc)
        })
    }

    /// Masks as `0.0 / 1.0` values.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }
}
