//! Inference pipelines: whole-image segmentation, then a square crop around
//! the iris centre for localization, mapped back to original coordinates.

mod overlay;

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use overlay::{render_overlay, INNER_COLOR, OUTER_COLOR, SEGMENTATION_TINT};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::mobile_unet::{Normalization, ProbabilityModel, Task, DEFAULT_INPUT_SIZE};
use crate::nn::Tensor;

pub const MIN_IMAGE_SIDE: usize = 8;
pub const DEFAULT_MARGIN: f64 = 1.5;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_image(image: &RgbImage) -> Result<(usize, usize)> {
    let (h, w) = (image.height() as usize, image.width() as usize);
    if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
        return Err(Error::dim(format!(
            "image {h}×{w} is smaller than the {MIN_IMAGE_SIDE}×{MIN_IMAGE_SIDE} minimum"
        )));
    }
    Ok((h, w))
}

/// Bilinear sample at continuous pixel coordinates, clamped to the image.
fn sample(image: &RgbImage, y: f64, x: f64, out: &mut [f32; 3]) {
    let (h, w) = (image.height() as usize, image.width() as usize);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let px = |yy: usize, xx: usize| image.get_pixel(xx as u32, yy as u32).0;
    let (a, b, c, d) = (px(y0, x0), px(y0, x1), px(y1, x0), px(y1, x1));
    for ch in 0..3 {
        let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
        let bot = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
        out[ch] = ((top * (1.0 - fy) + bot * fy) / 255.0) as f32;
    }
}

/// Resamples the square window `(top, left, side)` to `size × size`
/// (half-pixel centres, bilinear), scales to `[0, 1]` and optionally
/// standardizes. Samples whose centre falls outside the image are 0.
fn resample(
    image: &RgbImage,
    top: f64,
    left: f64,
    side_h: f64,
    side_w: f64,
    size: usize,
    norm: Option<&Normalization>,
) -> Tensor<f32> {
    let (h, w) = (image.height() as f64, image.width() as f64);
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    let mut px = [0.0f32; 3];
    for j in 0..size {
        let y = top + (j as f64 + 0.5) * side_h / size as f64 - 0.5;
        if y < -0.5 || y > h - 0.5 {
            continue;
        }
        for i in 0..size {
            let x = left + (i as f64 + 0.5) * side_w / size as f64 - 0.5;
            if x < -0.5 || x > w - 0.5 {
                continue;
            }
            sample(image, y, x, &mut px);
            for ch in 0..3 {
                data[ch * plane + j * size + i] = px[ch];
            }
        }
    }
    let mut t = Tensor::new(vec![3, size, size], data).expect("shape");
    if let Some(n) = norm {
        n.apply(&mut t);
    }
    t
}

/// Whole image → `(3, 224, 224)` in `[0, 1]`.
pub fn preprocess(image: &RgbImage) -> Result<Tensor<f32>> {
    preprocess_to(image, DEFAULT_INPUT_SIZE, None)
}

pub fn preprocess_to(image: &RgbImage, size: usize, norm: Option<&Normalization>) -> Result<Tensor<f32>> {
    let (h, w) = check_image(image)?;
    Ok(resample(image, 0.0, 0.0, h as f64, w as f64, size, norm))
}

/// Nearest-neighbour resampling of a probability plane, using the same
/// pixel mapping as [`BinaryMask::resize_nearest`].
pub fn resize_probs_nearest(p: &[f32], sh: usize, sw: usize, h: usize, w: usize) -> Vec<f32> {
    let fy = sh as f64 / h as f64;
    let fx = sw as f64 / w as f64;
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let sr = (((r as f64 + 0.5) * fy) as usize).min(sh - 1);
        for c in 0..w {
            let sc = (((c as f64 + 0.5) * fx) as usize).min(sw - 1);
            out.push(p[sr * sw + sc]);
        }
    }
    out
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::config(format!("threshold {t} is outside (0, 1)")));
    }
    Ok(())
}

fn expect_task<M: ProbabilityModel + ?Sized>(model: &M, task: Task) -> Result<()> {
    if model.task() != task {
        return Err(Error::config(format!(
            "expected a {task:?} model, got a {:?} model",
            model.task()
        )));
    }
    Ok(())
}

fn threshold_channel(probs: &Tensor<f32>, c: usize, size: usize, t: f64) -> Result<BinaryMask> {
    let plane = size * size;
    if probs.len() < (c + 1) * plane {
        return Err(Error::dim(format!(
            "model output {:?} lacks channel {c} at {size}×{size}",
            probs.shape()
        )));
    }
    BinaryMask::new(
        size,
        size,
        probs.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64 >= t).collect(),
    )
}

/// Forward, threshold (`p >= threshold`), nearest resize to the image size.
pub fn segment<M: ProbabilityModel + ?Sized>(image: &RgbImage, model: &M, threshold: f64) -> Result<BinaryMask> {
    check_threshold(threshold)?;
    expect_task(model, Task::Segmentation)?;
    let (h, w) = check_image(image)?;
    let s = model.input_size();
    let probs = model.predict(&preprocess_to(image, s, model.normalization())?)?;
    Ok(threshold_channel(&probs, 0, s, threshold)?.resize_nearest(h, w))
}

/// Foreground centroid rounded half up to a pixel.
pub fn iris_center(mask: &BinaryMask) -> Result<(usize, usize)> {
    let (mut sr, mut sc, mut n) = (0u64, 0u64, 0u64);
    for (r, c) in mask.foreground() {
        sr += r as u64;
        sc += c as u64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask("iris centre of an empty mask".into()));
    }
    // floor(sum / n + 1/2) in exact integer arithmetic
    Ok((((2 * sr + n) / (2 * n)) as usize, ((2 * sc + n) / (2 * n)) as usize))
}

/// A square window in original image coordinates, resampled to
/// `target_size × target_size`. The window may extend past the image
/// (only for the full-image fallback on non-square images).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub top: i64,
    pub left: i64,
    pub side: usize,
    pub target_size: usize,
}

impl CropWindow {
    pub fn validate(&self, dims: (usize, usize)) -> Result<()> {
        let (h, w) = (dims.0 as i64, dims.1 as i64);
        let s = self.side as i64;
        if self.side == 0 || self.target_size == 0 {
            return Err(Error::config(format!("{self:?}: side and target size must be positive")));
        }
        if self.top >= h || self.left >= w || self.top + s <= 0 || self.left + s <= 0 {
            return Err(Error::config(format!("{self:?} does not intersect a {h}×{w} image")));
        }
        Ok(())
    }

    /// Square window centred on the image covering all of it.
    pub fn full_image(dims: (usize, usize), target_size: usize) -> Self {
        let side = dims.0.max(dims.1);
        Self {
            top: (dims.0 as i64 - side as i64) / 2,
            left: (dims.1 as i64 - side as i64) / 2,
            side,
            target_size,
        }
    }

    pub fn is_inside(&self, dims: (usize, usize)) -> bool {
        self.top >= 0
            && self.left >= 0
            && self.top as usize + self.side <= dims.0
            && self.left as usize + self.side <= dims.1
    }
}

/// Window of side `round(margin · max(bbox h, bbox w))` centred on the iris
/// centre, translated inside the image, and shrunk only when the image is
/// smaller than the window.
pub fn crop_window(mask: &BinaryMask, image_dims: (usize, usize), margin: f64) -> Result<CropWindow> {
    crop_window_sized(mask, image_dims, margin, DEFAULT_INPUT_SIZE)
}

pub fn crop_window_sized(
    mask: &BinaryMask,
    image_dims: (usize, usize),
    margin: f64,
    target_size: usize,
) -> Result<CropWindow> {
    if !(margin > 0.0 && margin.is_finite()) {
        return Err(Error::config(format!("margin factor {margin} must be positive")));
    }
    let (h, w) = image_dims;
    if mask.dims() != image_dims {
        return Err(Error::dim(format!(
            "mask {:?} does not match image {:?}",
            mask.dims(),
            image_dims
        )));
    }
    let (cy, cx) = iris_center(mask)?;
    let (t, l, b, r) = mask.bbox().expect("non-empty after iris_center");
    let extent = (b - t + 1).max(r - l + 1);
    let side = ((margin * extent as f64).round() as usize).clamp(1, h.min(w));
    let place = |centre: usize, len: usize| -> i64 {
        let start = centre as i64 - (side / 2) as i64;
        start.clamp(0, (len - side) as i64)
    };
    Ok(CropWindow {
        top: place(cy, h),
        left: place(cx, w),
        side,
        target_size,
    })
}

/// The window's pixels as a model input.
pub fn crop_to_tensor(image: &RgbImage, window: &CropWindow, norm: Option<&Normalization>) -> Result<Tensor<f32>> {
    check_image(image)?;
    window.validate((image.height() as usize, image.width() as usize))?;
    let s = window.side as f64;
    Ok(resample(image, window.top as f64, window.left as f64, s, s, window.target_size, norm))
}

/// Nearest-neighbour crop of a mask; rows and columns outside the image are background.
pub fn crop_mask(mask: &BinaryMask, window: &CropWindow) -> Result<BinaryMask> {
    window.validate(mask.dims())?;
    let (h, w) = (mask.height() as i64, mask.width() as i64);
    let n = window.target_size;
    let src = |j: usize, origin: i64| origin + ((j as f64 + 0.5) * window.side as f64 / n as f64).floor() as i64;
    Ok(BinaryMask::from_fn(n, n, |j, i| {
        let (y, x) = (src(j, window.top), src(i, window.left));
        y >= 0 && x >= 0 && y < h && x < w && mask.get(y as usize, x as usize)
    }))
}

/// Inverse of the crop: each original pixel inside the window takes the
/// crop pixel under its centre; pixels outside the window are background.
pub fn map_back(mask: &BinaryMask, window: &CropWindow, original_dims: (usize, usize)) -> Result<BinaryMask> {
    window.validate(original_dims)?;
    let n = window.target_size;
    if mask.dims() != (n, n) {
        return Err(Error::dim(format!(
            "cropped mask {:?} does not match window target size {n}",
            mask.dims()
        )));
    }
    let s = window.side as i64;
    let idx = |p: usize, origin: i64| -> Option<usize> {
        let d = p as i64 - origin;
        (0..s)
            .contains(&d)
            .then(|| (((d as f64 + 0.5) * n as f64 / s as f64) as usize).min(n - 1))
    };
    let (h, w) = original_dims;
    Ok(BinaryMask::from_fn(h, w, |r, c| match (idx(r, window.top), idx(c, window.left)) {
        (Some(j), Some(i)) => mask.get(j, i),
        _ => false,
    }))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalizationFlags {
    pub empty_segmentation_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub inner_mask: BinaryMask,
    pub outer_mask: BinaryMask,
    pub window: CropWindow,
    pub flags: LocalizationFlags,
}

/// Localization given an existing segmentation mask: crop around it (or
/// the whole image when it is empty), run the 2-channel model, threshold,
/// map back and clip the inner region to the outer one.
pub fn localize_with_mask<M: ProbabilityModel + ?Sized>(
    image: &RgbImage,
    seg_mask: &BinaryMask,
    loc_model: &M,
    threshold: f64,
    margin: f64,
) -> Result<LocalizationResult> {
    check_threshold(threshold)?;
    expect_task(loc_model, Task::Localization)?;
    let dims = check_image(image)?;
    let s = loc_model.input_size();
    let (window, fallback) = if seg_mask.has_foreground() {
        (crop_window_sized(seg_mask, dims, margin, s)?, false)
    } else {
        if seg_mask.dims() != dims {
            return Err(Error::dim(format!("mask {:?} does not match image {dims:?}", seg_mask.dims())));
        }
        (CropWindow::full_image(dims, s), true)
    };
    let input = crop_to_tensor(image, &window, loc_model.normalization())?;
    let probs = loc_model.predict(&input)?;
    let inner = map_back(&threshold_channel(&probs, 0, s, threshold)?, &window, dims)?;
    let outer = map_back(&threshold_channel(&probs, 1, s, threshold)?, &window, dims)?;
    Ok(LocalizationResult {
        inner_mask: inner.intersect(&outer)?,
        outer_mask: outer,
        window,
        flags: LocalizationFlags {
            empty_segmentation_fallback: fallback,
        },
    })
}

pub fn localize<S, L>(
    image: &RgbImage,
    seg_model: &S,
    loc_model: &L,
    threshold: f64,
    margin: f64,
) -> Result<LocalizationResult>
where
    S: ProbabilityModel + ?Sized,
    L: ProbabilityModel + ?Sized,
{
    expect_task(loc_model, Task::Localization)?;
    let seg = segment(image, seg_model, threshold)?;
    localize_with_mask(image, &seg, loc_model, threshold, margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mobile_unet::{Model, ModelConfig};
    use image::Rgb;

    #[test]
    fn preprocess_identity_size_only_scales() {
        let img = RgbImage::from_fn(224, 224, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]));
        let t = preprocess(&img).unwrap();
        for (i, &v) in t.data().iter().enumerate() {
            let (c, rest) = (i / (224 * 224), i % (224 * 224));
            let p = img.get_pixel((rest % 224) as u32, (rest / 224) as u32).0[c];
            assert_eq!(v, (p as f64 / 255.0) as f32);
        }
    }

    #[test]
    fn preprocess_shapes_and_constants() {
        let gray = RgbImage::from_pixel(37, 91, Rgb([100, 100, 100]));
        let t = preprocess(&gray).unwrap();
        assert_eq!(t.shape(), &[3, 224, 224]);
        assert!(t.data().iter().all(|&v| v == t.data()[0]));
        assert_eq!(preprocess(&RgbImage::new(448, 448)).unwrap().shape(), &[3, 224, 224]);
        assert!(preprocess(&RgbImage::new(7, 100)).is_err());
    }

    #[test]
    fn iris_center_examples() {
        let mut m = BinaryMask::empty(10, 10);
        m.set(5, 7, true);
        assert_eq!(iris_center(&m).unwrap(), (5, 7));
        let block = BinaryMask::from_fn(8, 8, |r, c| r < 4 && c < 4);
        assert_eq!(iris_center(&block).unwrap(), (2, 2));
        let disk = BinaryMask::from_fn(21, 21, |r, c| (r as i32 - 10).pow(2) + (c as i32 - 10).pow(2) <= 36);
        assert_eq!(iris_center(&disk).unwrap(), (10, 10));
        assert!(matches!(iris_center(&BinaryMask::empty(3, 3)), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn crop_window_examples() {
        let m = BinaryMask::from_fn(400, 400, |r, c| (150..250).contains(&r) && (160..240).contains(&c));
        assert_eq!(crop_window(&m, (400, 400), 1.5).unwrap().side, 150);

        let corner = BinaryMask::from_fn(200, 300, |r, c| r < 10 && c < 20);
        let w = crop_window(&corner, (200, 300), 3.0).unwrap();
        assert!(w.is_inside((200, 300)));
        assert_eq!((w.top, w.left, w.side), (0, 0, 60));

        let sq = BinaryMask::from_fn(40, 40, |r, c| (10..20).contains(&r) && (10..20).contains(&c));
        let w = crop_window(&sq, (40, 40), 1.0).unwrap();
        assert_eq!((w.top, w.left, w.side), (10, 10, 10));

        let big = BinaryMask::full(30, 50);
        let w = crop_window(&big, (30, 50), 1.5).unwrap();
        assert_eq!(w.side, 30);
        assert!(w.is_inside((30, 50)));
    }

    #[test]
    fn map_back_identity_and_empty() {
        let m = BinaryMask::from_fn(224, 224, |r, c| (r * 7 + c * 3) % 5 == 0);
        let win = CropWindow { top: 0, left: 0, side: 224, target_size: 224 };
        assert_eq!(map_back(&m, &win, (224, 224)).unwrap(), m);
        let win = CropWindow { top: 30, left: 40, side: 100, target_size: 224 };
        let back = map_back(&BinaryMask::empty(224, 224), &win, (300, 300)).unwrap();
        assert!(!back.has_foreground());
        assert!(map_back(&m, &CropWindow { top: 500, left: 0, side: 10, target_size: 224 }, (300, 300)).is_err());
    }

    #[test]
    fn crop_map_back_is_exact_when_upsampling() {
        let m = BinaryMask::from_fn(300, 260, |r, c| (r as i32 - 140).pow(2) + (c as i32 - 120).pow(2) < 50 * 50);
        let win = crop_window(&m, (300, 260), 1.5).unwrap();
        assert!(win.side <= 224);
        let back = map_back(&crop_mask(&m, &win).unwrap(), &win, (300, 260)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn zero_model_segmentation() {
        let model = Model::<f32>::zeros(ModelConfig::with_input_size(Task::Segmentation, 32)).unwrap();
        let img = RgbImage::from_pixel(27, 19, Rgb([10, 200, 30]));
        let fg = segment(&img, &model, 0.4).unwrap();
        assert_eq!(fg.dims(), (19, 27));
        assert_eq!(fg.count(), 19 * 27);
        assert!(!segment(&img, &model, 0.6).unwrap().has_foreground());
        assert!(segment(&img, &model, 1.0).is_err());
    }

    #[test]
    fn empty_segmentation_falls_back_to_full_image() {
        let seg = Model::<f32>::zeros(ModelConfig::with_input_size(Task::Segmentation, 32)).unwrap();
        let loc = Model::<f32>::zeros(ModelConfig::with_input_size(Task::Localization, 32)).unwrap();
        let img = RgbImage::from_pixel(30, 20, Rgb([1, 2, 3]));
        let r = localize(&img, &seg, &loc, 0.6, 1.5).unwrap();
        assert!(r.flags.empty_segmentation_fallback);
        assert_eq!(r.window, CropWindow::full_image((20, 30), 32));
        assert_eq!(r.inner_mask.dims(), (20, 30));
        assert!(r.inner_mask.is_subset_of(&r.outer_mask));
        assert!(localize(&img, &loc, &seg, 0.5, 1.5).is_err());
    }
}
