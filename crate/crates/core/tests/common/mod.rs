//! Synthetic eyes and small helpers shared by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use image::{Rgb, RgbImage};
use iriskit::metrics::BinaryMask;
use rand::Rng;

pub const PUPIL: u8 = 20;
pub const IRIS: u8 = 120;
pub const BACKGROUND: u8 = 220;

/// Concentric pupil and iris disks on a bright background.
#[derive(Debug, Clone, Copy)]
pub struct Eye {
    pub h: usize,
    pub w: usize,
    pub cy: f64,
    pub cx: f64,
    pub pupil_r: f64,
    pub iris_r: f64,
}

impl Eye {
    pub fn random<R: Rng>(rng: &mut R, h: usize, w: usize) -> Self {
        let side = h.min(w) as f64;
        let iris_r = side * rng.gen_range(0.22..0.32);
        let pupil_r = iris_r * rng.gen_range(0.3..0.5);
        let cy = h as f64 / 2.0 + rng.gen_range(-0.12..0.12) * side;
        let cx = w as f64 / 2.0 + rng.gen_range(-0.12..0.12) * side;
        Self { h, w, cy, cx, pupil_r, iris_r }
    }

    fn d2(&self, r: usize, c: usize) -> f64 {
        (r as f64 - self.cy).powi(2) + (c as f64 - self.cx).powi(2)
    }

    pub fn inner(&self) -> BinaryMask {
        BinaryMask::from_fn(self.h, self.w, |r, c| self.d2(r, c) <= self.pupil_r.powi(2))
    }

    pub fn outer(&self) -> BinaryMask {
        BinaryMask::from_fn(self.h, self.w, |r, c| self.d2(r, c) <= self.iris_r.powi(2))
    }

    /// Iris texture region: the ring between pupil and limbus.
    pub fn iris(&self) -> BinaryMask {
        let (i, o) = (self.inner(), self.outer());
        BinaryMask::from_fn(self.h, self.w, |r, c| o.get(r, c) && !i.get(r, c))
    }

    pub fn image<R: Rng>(&self, rng: &mut R, noise: i32) -> RgbImage {
        let (i, o) = (self.inner(), self.outer());
        RgbImage::from_fn(self.w as u32, self.h as u32, |x, y| {
            let (r, c) = (y as usize, x as usize);
            let base = if i.get(r, c) {
                PUPIL
            } else if o.get(r, c) {
                IRIS
            } else {
                BACKGROUND
            } as i32;
            let v = if noise > 0 { base + rng.gen_range(-noise..=noise) } else { base };
            let v = v.clamp(0, 255) as u8;
            Rgb([v, v, v])
        })
    }
}
