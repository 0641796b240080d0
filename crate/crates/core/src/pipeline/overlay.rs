use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::metrics::{boundary_points, BinaryMask};

/// Segmentation pixels are averaged with this colour.
pub const SEGMENTATION_TINT: [u8; 3] = [0, 255, 0];
pub const OUTER_COLOR: [u8; 3] = [255, 255, 0];
pub const INNER_COLOR: [u8; 3] = [255, 0, 0];

fn check(image: &RgbImage, mask: &BinaryMask, what: &str) -> Result<()> {
    let dims = (image.height() as usize, image.width() as usize);
    if mask.dims() != dims {
        return Err(Error::dim(format!(
            "overlay: {what} mask {:?} does not match image {dims:?}",
            mask.dims()
        )));
    }
    Ok(())
}

/// Tints the segmentation and traces the outer, then inner, region boundaries.
pub fn render_overlay(
    image: &RgbImage,
    seg_mask: &BinaryMask,
    localization: Option<(&BinaryMask, &BinaryMask)>,
) -> Result<RgbImage> {
    check(image, seg_mask, "segmentation")?;
    if let Some((inner, outer)) = localization {
        check(image, inner, "inner")?;
        check(image, outer, "outer")?;
    }
    let mut out = image.clone();
    for (r, c) in seg_mask.foreground() {
        let p = out.get_pixel_mut(c as u32, r as u32);
        for ch in 0..3 {
            p.0[ch] = ((p.0[ch] as u16 + SEGMENTATION_TINT[ch] as u16) / 2) as u8;
        }
    }
    if let Some((inner, outer)) = localization {
        for (mask, color) in [(outer, OUTER_COLOR), (inner, INNER_COLOR)] {
            for &(r, c) in &boundary_points(mask).points {
                out.put_pixel(c as u32, r as u32, Rgb(color));
            }
        }
    }
    Ok(out)
}
