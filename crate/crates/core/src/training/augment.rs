use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub flip_probability: f64,
    pub rotation_max_degrees: f64,
    pub zoom_range: (f64, f64),
    /// Maximum additive brightness shift, as a fraction of full scale.
    pub brightness_delta_max: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            rotation_max_degrees: 15.0,
            zoom_range: (0.9, 1.1),
            brightness_delta_max: 0.2,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Every transform disabled.
    pub fn identity() -> Self {
        Self {
            flip_probability: 0.0,
            rotation_max_degrees: 0.0,
            zoom_range: (1.0, 1.0),
            brightness_delta_max: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.zoom_range;
        let ok = (0.0..=1.0).contains(&self.flip_probability)
            && self.rotation_max_degrees >= 0.0
            && self.rotation_max_degrees.is_finite()
            && lo > 0.0
            && lo <= 1.0
            && hi >= 1.0
            && hi.is_finite()
            && (0.0..=1.0).contains(&self.brightness_delta_max);
        if !ok {
            return Err(Error::config(format!("invalid augmentation config {self:?}")));
        }
        Ok(())
    }
}

/// The transform drawn for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub angle_degrees: f64,
    pub zoom: f64,
    pub brightness: f64,
}

impl AugmentParams {
    /// Draws exactly four uniforms, in the order flip, angle, zoom,
    /// brightness, so the stream position never depends on the config.
    pub fn sample<R: Rng>(config: &AugmentationConfig, rng: &mut R) -> Self {
        let u: [f64; 4] = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
        let (lo, hi) = config.zoom_range;
        Self {
            flip: u[0] < config.flip_probability,
            angle_degrees: (2.0 * u[1] - 1.0) * config.rotation_max_degrees,
            zoom: lo + u[2] * (hi - lo),
            brightness: (2.0 * u[3] - 1.0) * config.brightness_delta_max,
        }
    }

    fn is_geometric_identity(&self) -> bool {
        self.angle_degrees == 0.0 && self.zoom == 1.0
    }
}

/// Flips, rotates and zooms `image` (`(C, H, W)`, values in `[0, 1]`) and
/// every mask with one shared transform; brightness touches the image only.
pub fn augment<R: Rng>(
    image: &Tensor<f32>,
    masks: &[BinaryMask],
    config: &AugmentationConfig,
    rng: &mut R,
) -> Result<(Tensor<f32>, Vec<BinaryMask>)> {
    config.validate()?;
    let params = AugmentParams::sample(config, rng);
    apply(image, masks, &params)
}

pub fn apply(
    image: &Tensor<f32>,
    masks: &[BinaryMask],
    p: &AugmentParams,
) -> Result<(Tensor<f32>, Vec<BinaryMask>)> {
    let (c, h, w) = image.dims3()?;
    if let Some(m) = masks.iter().find(|m| m.dims() != (h, w)) {
        return Err(Error::dim(format!(
            "augment: mask dims {:?} differ from image dims {:?}",
            m.dims(),
            (h, w)
        )));
    }
    let mut img = image.clone();
    let mut out_masks = masks.to_vec();
    if p.flip {
        img = flip_image(&img)?;
        out_masks = out_masks.iter().map(BinaryMask::flip_horizontal).collect();
    }
    if !p.is_geometric_identity() {
        let map = InverseMap::new(h, w, p.angle_degrees, p.zoom);
        img = warp_image(&img, c, h, w, &map);
        out_masks = out_masks.iter().map(|m| warp_mask(m, &map)).collect();
    }
    if p.brightness != 0.0 {
        let d = p.brightness as f32;
        img.data_mut().iter_mut().for_each(|v| *v = (*v + d).clamp(0.0, 1.0));
    }
    Ok((img, out_masks))
}

pub fn flip_image(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = image.dims3()?;
    let src = image.data();
    Ok(Tensor::from_fn(vec![c, h, w], |i| {
        let col = i % w;
        src[i - col + (w - 1 - col)]
    }))
}

/// Maps an output pixel to its source location: rotation by `angle` and
/// scaling by `zoom` about the image centre.
struct InverseMap {
    cy: f64,
    cx: f64,
    cos: f64,
    sin: f64,
    inv_zoom: f64,
}

impl InverseMap {
    fn new(h: usize, w: usize, angle_degrees: f64, zoom: f64) -> Self {
        let a = angle_degrees.to_radians();
        Self {
            cy: (h as f64 - 1.0) / 2.0,
            cx: (w as f64 - 1.0) / 2.0,
            cos: a.cos(),
            sin: a.sin(),
            inv_zoom: 1.0 / zoom,
        }
    }

    fn source(&self, r: usize, c: usize) -> (f64, f64) {
        let dy = r as f64 - self.cy;
        let dx = c as f64 - self.cx;
        let sy = (self.cos * dy - self.sin * dx) * self.inv_zoom;
        let sx = (self.sin * dy + self.cos * dx) * self.inv_zoom;
        (sy + self.cy, sx + self.cx)
    }
}

fn warp_image(image: &Tensor<f32>, c: usize, h: usize, w: usize, map: &InverseMap) -> Tensor<f32> {
    let src = image.data();
    let plane = h * w;
    let mut out = vec![0.0f32; c * plane];
    for r in 0..h {
        for col in 0..w {
            let (sy, sx) = map.source(r, col);
            if sy <= -1.0 || sx <= -1.0 || sy >= h as f64 || sx >= w as f64 {
                continue;
            }
            let y0 = sy.floor();
            let x0 = sx.floor();
            let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x0 + 1, (1.0 - fy) * fx),
                (y0 + 1, x0, fy * (1.0 - fx)),
                (y0 + 1, x0 + 1, fy * fx),
            ];
            for ch in 0..c {
                let mut acc = 0.0f32;
                for &(y, x, wt) in &taps {
                    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                        acc += wt * src[ch * plane + y as usize * w + x as usize];
                    }
                }
                out[ch * plane + r * w + col] = acc;
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("shape preserved")
}

fn warp_mask(mask: &BinaryMask, map: &InverseMap) -> BinaryMask {
    let (h, w) = mask.dims();
    BinaryMask::from_fn(h, w, |r, c| {
        let (sy, sx) = map.source(r, c);
        let (y, x) = (sy.round(), sx.round());
        y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w && mask.get(y as usize, x as usize)
    })
}
