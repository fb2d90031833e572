//! Procedural masks and backgrounds for demos, tests and benchmarks.

use std::path::Path;

use rand::Rng;

use crate::error::Result;
use crate::fsutil;
use crate::geometry::{Channels, InstanceMask, PixelImage};
use crate::seed::{derive_seed, rng_for};

/// Shapes cycled through by class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
    Triangle,
    Ring,
}

const SHAPES: [Shape; 4] = [Shape::Disc, Shape::Square, Shape::Triangle, Shape::Ring];

fn inside(shape: Shape, u: f64, v: f64) -> bool {
    match shape {
        Shape::Disc => u * u + v * v <= 1.0,
        Shape::Square => u.abs() <= 0.9 && v.abs() <= 0.9,
        Shape::Triangle => (-0.9..=0.9).contains(&v) && u.abs() <= (0.9 - v) * 0.5,
        Shape::Ring => {
            let r = u * u + v * v;
            (0.3..=1.0).contains(&r)
        }
    }
}

/// A `side x side` RGBA cutout of `shape` filled with `color` plus mild texture.
pub fn shape_mask(shape: Shape, side: u32, color: [u8; 3], seed: u64) -> PixelImage {
    let mut rng = rng_for(seed);
    let mut img = PixelImage::filled(side, side, Channels::Rgba, &[0, 0, 0, 0]).expect("side > 0");
    let half = side as f64 / 2.0;
    for y in 0..side {
        for x in 0..side {
            let u = (x as f64 + 0.5 - half) / half;
            let v = (y as f64 + 0.5 - half) / half;
            if inside(shape, u, v) {
                let t: i16 = rng.random_range(-12..=12);
                let px = img.pixel_mut(x, y);
                for c in 0..3 {
                    px[c] = (color[c] as i16 + t).clamp(0, 255) as u8;
                }
                px[3] = 255;
            }
        }
    }
    img
}

/// Distinct saturated color for class `i`.
pub fn class_color(i: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [220, 40, 40],
        [40, 180, 60],
        [40, 80, 220],
        [230, 200, 30],
        [200, 60, 200],
        [30, 200, 210],
        [240, 130, 20],
        [120, 70, 30],
    ];
    PALETTE[i % PALETTE.len()]
}

pub fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("part_{}", (b'a' + i as u8) as char)).collect()
}

/// Builds `per_class` masks of side `side` for each of `classes` classes.
pub fn mask_set(classes: usize, per_class: usize, side: u32, seed: u64) -> Result<Vec<InstanceMask>> {
    let names = class_names(classes);
    let mut out = Vec::with_capacity(classes * per_class);
    for (c, name) in names.iter().enumerate() {
        for j in 0..per_class {
            let s = derive_seed(seed, (c * per_class + j) as u64);
            let img = shape_mask(SHAPES[c % SHAPES.len()], side + 4 * j as u32, class_color(c), s);
            out.push(InstanceMask::new(img, name.clone(), format!("{name}_{j}"))?);
        }
    }
    Ok(out)
}

/// Writes [`mask_set`] as PNG + sidecar pairs under `dir/<class>/`.
pub fn write_masks(dir: &Path, classes: usize, per_class: usize, side: u32, seed: u64) -> Result<()> {
    for m in mask_set(classes, per_class, side, seed)? {
        let class_dir = dir.join(&m.category);
        fsutil::create_dir_all(&class_dir)?;
        m.save(&class_dir.join(format!("{}.png", m.source_id)))?;
    }
    Ok(())
}

/// Smooth two-color gradient with pixel noise.
pub fn background(width: u32, height: u32, seed: u64) -> PixelImage {
    let mut rng = rng_for(seed);
    let a: [u8; 3] = [rng.random(), rng.random(), rng.random()];
    let b: [u8; 3] = [rng.random(), rng.random(), rng.random()];
    let mut img = PixelImage::filled(width, height, Channels::Rgb, &[0, 0, 0]).expect("size > 0");
    for y in 0..height {
        for x in 0..width {
            let t = (x + y) as f64 / (width + height) as f64;
            let n: f64 = rng.random_range(-8.0..=8.0);
            let px = img.pixel_mut(x, y);
            for c in 0..3 {
                px[c] = (a[c] as f64 * (1.0 - t) + b[c] as f64 * t + n).clamp(0.0, 255.0) as u8;
            }
        }
    }
    img
}

/// Writes `count` backgrounds as `bg_XX.png` under `dir`.
pub fn write_backgrounds(dir: &Path, count: usize, width: u32, height: u32, seed: u64) -> Result<()> {
    fsutil::create_dir_all(dir)?;
    for i in 0..count {
        background(width, height, derive_seed(seed, i as u64)).save_png(&dir.join(format!("bg_{i:02}.png")))?;
    }
    Ok(())
}
