use super::bbox::BoundingBox;
use super::image::{Channels, PixelImage};
use super::mask::InstanceMask;
use crate::error::{Error, Result};

/// Source-over composite of a mask onto a canvas with the mask's top-left at
/// `(x, y)`. Returns the new canvas and the mask's tight box in canvas
/// coordinates.
pub fn paste(
    canvas: &PixelImage,
    mask: &InstanceMask,
    x: i64,
    y: i64,
) -> Result<(PixelImage, BoundingBox)> {
    let mut out = canvas.clone();
    let b = paste_in_place(&mut out, mask, x, y)?;
    Ok((out, b))
}

pub fn paste_in_place(
    canvas: &mut PixelImage,
    mask: &InstanceMask,
    x: i64,
    y: i64,
) -> Result<BoundingBox> {
    let (mw, mh) = (mask.width() as i64, mask.height() as i64);
    if x < 0 || y < 0 || x + mw > canvas.width() as i64 || y + mh > canvas.height() as i64 {
        return Err(Error::Placement(format!(
            "{mw}x{mh} mask at ({x},{y}) exceeds {}x{} canvas",
            canvas.width(),
            canvas.height()
        )));
    }
    let src = mask.cutout();
    let has_alpha = canvas.channels() == Channels::Rgba;
    for my in 0..mask.height() {
        for mx in 0..mask.width() {
            let s = src.pixel(mx, my);
            let a = s[3] as u32;
            if a == 0 {
                continue;
            }
            let d = canvas.pixel_mut(x as u32 + mx, y as u32 + my);
            for c in 0..3 {
                d[c] = over(s[c], d[c], a);
            }
            if has_alpha {
                // a_out = a_s + a_d * (1 - a_s)
                d[3] = (a + (d[3] as u32 * (255 - a) + 127) / 255).min(255) as u8;
            }
        }
    }
    BoundingBox::new(x as f64, y as f64, (x + mw) as f64, (y + mh) as f64)
}

#[inline]
fn over(src: u8, dst: u8, alpha: u32) -> u8 {
    ((src as u32 * alpha + dst as u32 * (255 - alpha) + 127) / 255) as u8
}
