//! Image and mask files.
//!
//! Input images are PNG or 8-bit BMP with 3 channels; grayscale is promoted
//! by channel replication. Masks are 8-bit single-channel PNG, 0 for
//! background and 255 for foreground. Every writer goes through
//! [`write_atomic`], so a failed run never leaves a partial file behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

/// Mask file pixels at or above this value are foreground.
pub const MASK_THRESHOLD: u8 = 128;

fn temp_path(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let tmp = temp_path(path);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// 8-bit RGB or grayscale image as RGB.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    match decode(path)? {
        DynamicImage::ImageRgb8(img) => Ok(img),
        DynamicImage::ImageLuma8(img) => Ok(DynamicImage::ImageLuma8(img).to_rgb8()),
        other => Err(Error::Format(format!(
            "{}: unsupported pixel format {:?} (expected 8-bit RGB or grayscale)",
            path.display(),
            other.color()
        ))),
    }
}

pub fn mask_from_gray(img: &GrayImage) -> Result<BinaryMask> {
    BinaryMask::new(
        img.height() as usize,
        img.width() as usize,
        img.as_raw().iter().map(|&v| v >= MASK_THRESHOLD).collect(),
    )
}

pub fn mask_to_gray(mask: &BinaryMask) -> GrayImage {
    let raw = mask.as_slice().iter().map(|&v| if v { 255 } else { 0 }).collect();
    GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .expect("mask buffer matches its dims")
}

/// Single-channel 8-bit mask file; pixels `>= 128` are foreground.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    match decode(path)? {
        DynamicImage::ImageLuma8(img) => mask_from_gray(&img),
        other => Err(Error::Format(format!(
            "{}: mask must be single-channel 8-bit, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

fn encode_png(img: DynamicImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png encoding failed: {e}")))?;
    Ok(buf.into_inner())
}

pub fn encode_mask_png(mask: &BinaryMask) -> Result<Vec<u8>> {
    encode_png(DynamicImage::ImageLuma8(mask_to_gray(mask)))
}

pub fn write_mask_png(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    write_atomic(path, &encode_mask_png(mask)?)
}

pub fn write_rgb_png(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    write_atomic(path, &encode_png(DynamicImage::ImageRgb8(img.clone()))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_threshold_boundary() {
        let img = GrayImage::from_raw(4, 1, vec![0, 127, 128, 255]).unwrap();
        let m = mask_from_gray(&img).unwrap();
        assert_eq!(m.as_slice(), &[false, false, true, true]);
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = BinaryMask::from_fn(9, 13, |r, c| (r * c) % 3 == 1);
        write_mask_png(&p, &m).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn rgb_mask_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        write_rgb_png(&p, &RgbImage::new(3, 3)).unwrap();
        assert!(matches!(read_mask(&p), Err(Error::Format(_))));
    }

    #[test]
    fn grayscale_images_are_promoted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        write_mask_png(&p, &BinaryMask::full(2, 2)).unwrap();
        let img = load_rgb(&p).unwrap();
        assert!(img.pixels().all(|px| px.0 == [255, 255, 255]));
    }
}
