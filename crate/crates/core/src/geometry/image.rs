use std::path::Path;

use image::{DynamicImage, ImageEncoder, RgbImage, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channels {
    Rgb,
    Rgba,
}

impl Channels {
    pub fn count(self) -> usize {
        match self {
            Channels::Rgb => 3,
            Channels::Rgba => 4,
        }
    }
}

/// 8-bit RGB or RGBA raster, row-major, interleaved channels.
#[derive(Clone, PartialEq, Eq)]
pub struct PixelImage {
    width: u32,
    height: u32,
    channels: Channels,
    data: Vec<u8>,
}

impl std::fmt::Debug for PixelImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PixelImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl PixelImage {
    pub fn from_raw(width: u32, height: u32, channels: Channels, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize * channels.count();
        if data.len() != expected {
            return Err(Error::InvalidImage(format!(
                "buffer holds {} bytes, expected {expected}",
                data.len()
            )));
        }
        Ok(PixelImage {
            width,
            height,
            channels,
            data,
        })
    }

    /// Image filled with a single pixel value. `pixel` must have as many
    /// entries as the channel layout.
    pub fn filled(width: u32, height: u32, channels: Channels, pixel: &[u8]) -> Result<Self> {
        if pixel.len() != channels.count() {
            return Err(Error::InvalidImage("fill pixel has wrong channel count".into()));
        }
        let n = width as usize * height as usize;
        let data = pixel.repeat(n);
        Self::from_raw(width, height, channels, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> Channels {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels.count()
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let o = self.offset(x, y);
        &self.data[o..o + self.channels.count()]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: u32, y: u32) -> &mut [u8] {
        let o = self.offset(x, y);
        let c = self.channels.count();
        &mut self.data[o..o + c]
    }

    /// Alpha of a pixel; 255 for RGB images.
    #[inline]
    pub fn alpha(&self, x: u32, y: u32) -> u8 {
        match self.channels {
            Channels::Rgb => 255,
            Channels::Rgba => self.data[self.offset(x, y) + 3],
        }
    }

    pub fn row(&self, y: u32) -> &[u8] {
        let stride = self.width as usize * self.channels.count();
        &self.data[y as usize * stride..(y as usize + 1) * stride]
    }

    pub fn to_rgba(&self) -> PixelImage {
        match self.channels {
            Channels::Rgba => self.clone(),
            Channels::Rgb => {
                let data = self
                    .data
                    .chunks_exact(3)
                    .flat_map(|p| [p[0], p[1], p[2], 255])
                    .collect();
                PixelImage {
                    width: self.width,
                    height: self.height,
                    channels: Channels::Rgba,
                    data,
                }
            }
        }
    }

    /// Drops alpha without blending.
    pub fn to_rgb(&self) -> PixelImage {
        match self.channels {
            Channels::Rgb => self.clone(),
            Channels::Rgba => {
                let data = self
                    .data
                    .chunks_exact(4)
                    .flat_map(|p| [p[0], p[1], p[2]])
                    .collect();
                PixelImage {
                    width: self.width,
                    height: self.height,
                    channels: Channels::Rgb,
                    data,
                }
            }
        }
    }

    /// Copy of the rectangle `[x0, x1) x [y0, y1)`.
    pub fn crop(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> Result<PixelImage> {
        if x1 > self.width || y1 > self.height || x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidImage(format!(
                "crop [{x0},{y0},{x1},{y1}) outside {}x{}",
                self.width, self.height
            )));
        }
        let c = self.channels.count();
        let mut data = Vec::with_capacity((x1 - x0) as usize * (y1 - y0) as usize * c);
        for y in y0..y1 {
            let start = self.offset(x0, y);
            data.extend_from_slice(&self.data[start..start + (x1 - x0) as usize * c]);
        }
        PixelImage::from_raw(x1 - x0, y1 - y0, self.channels, data)
    }

    pub fn flip_horizontal(&self) -> PixelImage {
        let c = self.channels.count();
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let src = self.offset(self.width - 1 - x, y);
                let dst = self.offset(x, y);
                out.data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
            }
        }
        out
    }

    /// Bilinear resize to an exact size.
    pub fn resize(&self, width: u32, height: u32) -> Result<PixelImage> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage("resize target must be non-empty".into()));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let filter = image::imageops::FilterType::Triangle;
        let dynamic = match self.to_dynamic() {
            DynamicImage::ImageRgb8(img) => {
                DynamicImage::ImageRgb8(image::imageops::resize(&img, width, height, filter))
            }
            DynamicImage::ImageRgba8(img) => {
                DynamicImage::ImageRgba8(image::imageops::resize(&img, width, height, filter))
            }
            _ => unreachable!("to_dynamic only yields rgb8/rgba8"),
        };
        Ok(PixelImage::from_dynamic(dynamic))
    }

    /// Aspect-preserving resize into `width x height`, centered, padded with
    /// `fill`.
    pub fn letterbox(&self, width: u32, height: u32, fill: [u8; 3]) -> Result<PixelImage> {
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let scale = (width as f64 / self.width as f64).min(height as f64 / self.height as f64);
        let nw = ((self.width as f64 * scale).round() as u32).clamp(1, width);
        let nh = ((self.height as f64 * scale).round() as u32).clamp(1, height);
        let resized = self.resize(nw, nh)?;
        let pad: Vec<u8> = match self.channels {
            Channels::Rgb => fill.to_vec(),
            Channels::Rgba => vec![fill[0], fill[1], fill[2], 255],
        };
        let mut out = PixelImage::filled(width, height, self.channels, &pad)?;
        let (ox, oy) = ((width - nw) / 2, (height - nh) / 2);
        let c = self.channels.count();
        for y in 0..nh {
            let src = resized.row(y);
            let dst = out.offset(ox, oy + y);
            out.data[dst..dst + nw as usize * c].copy_from_slice(src);
        }
        Ok(out)
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        match self.channels {
            Channels::Rgb => DynamicImage::ImageRgb8(
                RgbImage::from_raw(self.width, self.height, self.data.clone())
                    .expect("buffer length checked at construction"),
            ),
            Channels::Rgba => DynamicImage::ImageRgba8(
                RgbaImage::from_raw(self.width, self.height, self.data.clone())
                    .expect("buffer length checked at construction"),
            ),
        }
    }

    pub fn from_dynamic(img: DynamicImage) -> PixelImage {
        let (width, height) = (img.width(), img.height());
        if img.color().has_alpha() {
            PixelImage {
                width,
                height,
                channels: Channels::Rgba,
                data: img.into_rgba8().into_raw(),
            }
        } else {
            PixelImage {
                width,
                height,
                channels: Channels::Rgb,
                data: img.into_rgb8().into_raw(),
            }
        }
    }

    pub fn load(path: &Path) -> Result<PixelImage> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let out = PixelImage::from_dynamic(img);
        if out.width == 0 || out.height == 0 {
            return Err(Error::InvalidImage(format!("{} is empty", path.display())));
        }
        Ok(out)
    }

    /// PNG bytes with fixed encoder settings, so identical pixels always give
    /// identical bytes.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        use image::codecs::png::{CompressionType, FilterType, PngEncoder};
        let mut buf = Vec::new();
        let encoder =
            PngEncoder::new_with_quality(&mut buf, CompressionType::Fast, FilterType::Sub);
        let color = match self.channels {
            Channels::Rgb => image::ExtendedColorType::Rgb8,
            Channels::Rgba => image::ExtendedColorType::Rgba8,
        };
        encoder
            .write_image(&self.data, self.width, self.height, color)
            .map_err(|source| Error::Image {
                path: "<png encoder>".into(),
                source,
            })?;
        Ok(buf)
    }

    /// Decodes PNG or JPEG bytes.
    pub fn decode(bytes: &[u8]) -> Result<PixelImage> {
        let img = image::load_from_memory(bytes).map_err(|source| Error::Image {
            path: "<memory>".into(),
            source,
        })?;
        Ok(PixelImage::from_dynamic(img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_buffer() {
        assert!(PixelImage::from_raw(2, 2, Channels::Rgb, vec![0; 11]).is_err());
        assert!(PixelImage::from_raw(0, 2, Channels::Rgb, vec![]).is_err());
    }

    #[test]
    fn crop_and_flip() {
        let data: Vec<u8> = (0..12).collect();
        let img = PixelImage::from_raw(4, 1, Channels::Rgb, data).unwrap();
        let c = img.crop(1, 0, 3, 1).unwrap();
        assert_eq!(c.data(), &[3, 4, 5, 6, 7, 8]);
        let f = img.flip_horizontal();
        assert_eq!(f.pixel(0, 0), &[9, 10, 11]);
        assert_eq!(f.flip_horizontal(), img);
    }

    #[test]
    fn png_round_trip() {
        let img = PixelImage::filled(3, 2, Channels::Rgba, &[1, 2, 3, 128]).unwrap();
        let back = PixelImage::decode(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn letterbox_pads_and_centers() {
        let img = PixelImage::filled(20, 10, Channels::Rgb, &[200, 0, 0]).unwrap();
        let out = img.letterbox(20, 20, [114, 114, 114]).unwrap();
        assert_eq!(out.pixel(10, 0), &[114, 114, 114]);
        assert_eq!(out.pixel(10, 10), &[200, 0, 0]);
    }
}
