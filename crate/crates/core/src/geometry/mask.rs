use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::{Channels, PixelImage};
use crate::error::{Error, Result};

/// Alpha at or above this value (out of 255) counts as inside after resampling.
const ALPHA_CUTOFF: f64 = 127.5;

/// An RGBA object cutout; alpha is the segmentation mask. Always tight: the
/// first and last rows and columns contain at least one visible pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMask {
    cutout: PixelImage,
    pub category: String,
    pub source_id: String,
}

/// Sidecar record stored next to each mask PNG.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub category: String,
    pub source_id: String,
}

impl InstanceMask {
    /// Builds a mask from any RGBA image, cropping it to its alpha bounds.
    pub fn new(
        cutout: PixelImage,
        category: impl Into<String>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let cutout = tighten(&cutout.to_rgba())
            .ok_or_else(|| Error::DegenerateMask("mask has no visible pixel".into()))?;
        let category = category.into();
        if category.is_empty() {
            return Err(Error::InvalidInput("mask category is empty".into()));
        }
        Ok(InstanceMask {
            cutout,
            category,
            source_id: source_id.into(),
        })
    }

    pub fn cutout(&self) -> &PixelImage {
        &self.cutout
    }

    pub fn width(&self) -> u32 {
        self.cutout.width()
    }

    pub fn height(&self) -> u32 {
        self.cutout.height()
    }

    /// Loads `<stem>.png` and its `<stem>.json` sidecar.
    pub fn load(png: &Path) -> Result<Self> {
        let sidecar = sidecar_path(png);
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let record: MaskRecord = serde_json::from_str(&text)
            .map_err(|e| Error::json(sidecar.display().to_string(), e))?;
        let img = PixelImage::load(png)?;
        if img.channels() != Channels::Rgba {
            return Err(Error::InvalidImage(format!(
                "{} has no alpha channel",
                png.display()
            )));
        }
        InstanceMask::new(img, record.category, record.source_id)
    }

    pub fn save(&self, png: &Path) -> Result<()> {
        self.cutout.save_png(png)?;
        let record = MaskRecord {
            category: self.category.clone(),
            source_id: self.source_id.clone(),
        };
        let sidecar = sidecar_path(png);
        let text = serde_json::to_string_pretty(&record).expect("record serializes");
        std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
    }
}

pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

/// Crops an RGBA image to the bounds of its non-zero alpha. `None` if fully
/// transparent.
pub fn tighten(img: &PixelImage) -> Option<PixelImage> {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
    for y in 0..img.height() {
        for x in 0..img.width() {
            if img.alpha(x, y) > 0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x0 == u32::MAX {
        return None;
    }
    if x0 == 0 && y0 == 0 && x1 == img.width() && y1 == img.height() {
        return Some(img.clone());
    }
    img.crop(x0, y0, x1, y1).ok()
}

/// Scales and rotates a mask about its center.
///
/// Color is resampled bilinearly on premultiplied values; alpha is binarized
/// at 0.5 afterwards and the result re-tightened. Positive rotation is
/// clockwise on screen (y points down).
pub fn affine_transform(mask: &InstanceMask, scale: f64, rotation_deg: f64) -> Result<InstanceMask> {
    if scale.is_nan() || scale <= 0.0 || !scale.is_finite() {
        return Err(Error::InvalidInput(format!("scale must be positive, got {scale}")));
    }
    if !rotation_deg.is_finite() {
        return Err(Error::InvalidInput("rotation must be finite".into()));
    }
    let (sin, cos) = sin_cos_deg(rotation_deg);
    if scale == 1.0 && sin == 0.0 && cos == 1.0 {
        return Ok(mask.clone());
    }

    let src = &mask.cutout;
    let (w, h) = (src.width() as f64, src.height() as f64);
    let (cx, cy) = (w / 2.0, h / 2.0);

    // forward map: q = R * S * (p - c)
    let forward = |x: f64, y: f64| {
        let (dx, dy) = ((x - cx) * scale, (y - cy) * scale);
        (cos * dx - sin * dy, sin * dx + cos * dy)
    };
    let corners = [forward(0.0, 0.0), forward(w, 0.0), forward(0.0, h), forward(w, h)];
    let min_x = corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let max_x = corners.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let max_y = corners.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let out_w = snap_ceil(max_x - min_x);
    let out_h = snap_ceil(max_y - min_y);
    if out_w < 1.0 || out_h < 1.0 {
        return Err(Error::DegenerateMask(format!(
            "transformed extent {:.3}x{:.3} is below one pixel",
            max_x - min_x,
            max_y - min_y
        )));
    }
    let (out_w, out_h) = (out_w as u32, out_h as u32);
    // centre the output grid on the transformed extent
    let off_x = (min_x + max_x) / 2.0 - out_w as f64 / 2.0;
    let off_y = (min_y + max_y) / 2.0 - out_h as f64 / 2.0;

    let mut out = vec![0u8; out_w as usize * out_h as usize * 4];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let qx = ox as f64 + 0.5 + off_x;
            let qy = oy as f64 + 0.5 + off_y;
            // inverse: p = S^-1 * R^-1 * q + c
            let px = (cos * qx + sin * qy) / scale + cx;
            let py = (-sin * qx + cos * qy) / scale + cy;
            let [r, g, b, a] = sample_premultiplied(src, px - 0.5, py - 0.5);
            if a >= ALPHA_CUTOFF {
                let o = (oy as usize * out_w as usize + ox as usize) * 4;
                out[o] = to_u8(r / a * 255.0);
                out[o + 1] = to_u8(g / a * 255.0);
                out[o + 2] = to_u8(b / a * 255.0);
                out[o + 3] = 255;
            }
        }
    }
    let img = PixelImage::from_raw(out_w, out_h, Channels::Rgba, out)?;
    let cutout = tighten(&img).ok_or_else(|| {
        Error::DegenerateMask(format!(
            "no pixel survives scale {scale} rotation {rotation_deg}"
        ))
    })?;
    Ok(InstanceMask {
        cutout,
        category: mask.category.clone(),
        source_id: mask.source_id.clone(),
    })
}

/// Exact values on multiples of 90 degrees.
fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    if r == 0.0 {
        (0.0, 1.0)
    } else if r == 90.0 {
        (1.0, 0.0)
    } else if r == 180.0 {
        (0.0, -1.0)
    } else if r == 270.0 {
        (-1.0, 0.0)
    } else {
        r.to_radians().sin_cos()
    }
}

fn snap_ceil(v: f64) -> f64 {
    (v - 1e-6).ceil().max(0.0)
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Bilinear sample at continuous index coordinates. Returns
/// `[r*a/255, g*a/255, b*a/255, a]`; pixels outside the image are transparent.
fn sample_premultiplied(img: &PixelImage, u: f64, v: f64) -> [f64; 4] {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let mut acc = [0.0f64; 4];
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let wgt = wx * wy;
            if wgt == 0.0 {
                continue;
            }
            let (x, y) = (x0 + dx, y0 + dy);
            if x < 0.0 || y < 0.0 || x >= img.width() as f64 || y >= img.height() as f64 {
                continue;
            }
            let p = img.pixel(x as u32, y as u32);
            let a = p[3] as f64 / 255.0;
            acc[0] += wgt * p[0] as f64 * a;
            acc[1] += wgt * p[1] as f64 * a;
            acc[2] += wgt * p[2] as f64 * a;
            acc[3] += wgt * p[3] as f64;
        }
    }
    acc
}
