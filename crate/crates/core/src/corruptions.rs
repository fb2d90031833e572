//! Photometric corruptions applied at a fixed severity, and the builder for
//! the corrupted evaluation set.
//!
//! All kinds leave geometry untouched, so labels carry over verbatim.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fsutil;
use crate::geometry::PixelImage;
use crate::seed::{derive_seed2, rng_for};

/// Group tag for unmodified copies in a corrupted set.
pub const CLEAN_TAG: &str = "clean";
/// Separator between the source stem and the corruption tag in file names.
pub const TAG_SEPARATOR: &str = "__";

pub const DEFAULT_PROFILE_JSON: &str = include_str!("../../../profiles/default.json");

/// Built-in kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    MotionBlur,
    GaussianBlur,
    GaussianNoise,
    IsoNoise,
    HsvShift,
    ColorShift,
    Brightness,
    Contrast,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::MotionBlur,
        CorruptionKind::GaussianBlur,
        CorruptionKind::GaussianNoise,
        CorruptionKind::IsoNoise,
        CorruptionKind::HsvShift,
        CorruptionKind::ColorShift,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::IsoNoise => "iso_noise",
            CorruptionKind::HsvShift => "hsv_shift",
            CorruptionKind::ColorShift => "color_shift",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
        }
    }
}

/// One entry of a corruption profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    /// Tag written into output file names; unique within a profile.
    pub name: String,
    /// Registry key of the corruption.
    pub kind: String,
    pub severity: f64,
    /// Motion-blur direction in degrees.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle: Option<f64>,
    /// Per-channel color-shift direction, in 8-bit units per unit severity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<[f64; 3]>,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: f64) -> Self {
        CorruptionSpec {
            name: kind.name().to_owned(),
            kind: kind.name().to_owned(),
            severity,
            angle: None,
            shift: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(TAG_SEPARATOR) || self.name == CLEAN_TAG {
            return Err(Error::Config(format!("invalid corruption name `{}`", self.name)));
        }
        if !self
            .name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(Error::Config(format!(
                "corruption name `{}` must be [A-Za-z0-9_-]",
                self.name
            )));
        }
        if !self.severity.is_finite() {
            return Err(Error::Config(format!("severity of `{}` is not finite", self.name)));
        }
        // brightness and contrast accept negative severities
        let signed = matches!(self.kind.as_str(), "brightness" | "contrast" | "hsv_shift");
        if self.severity < 0.0 && !signed {
            return Err(Error::Config(format!("severity of `{}` must be >= 0", self.name)));
        }
        Ok(())
    }
}

/// A named corruption profile as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionProfile {
    pub version: u32,
    #[serde(default)]
    pub description: String,
    pub specs: Vec<CorruptionSpec>,
}

impl CorruptionProfile {
    pub fn default_profile() -> Self {
        serde_json::from_str(DEFAULT_PROFILE_JSON).expect("bundled profile parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fsutil::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Json { source, .. } => Error::json(path.display().to_string(), source),
            other => other,
        })
    }

    /// Accepts either the full profile object or a bare JSON list of specs.
    pub fn parse(text: &str) -> Result<Self> {
        let profile = if text.trim_start().starts_with('[') {
            CorruptionProfile {
                version: 1,
                description: String::new(),
                specs: serde_json::from_str(text).map_err(|e| Error::json("profile", e))?,
            }
        } else {
            serde_json::from_str(text).map_err(|e| Error::json("profile", e))?
        };
        let mut names = std::collections::HashSet::new();
        for s in &profile.specs {
            s.validate()?;
            if !names.insert(&s.name) {
                return Err(Error::Config(format!("duplicate corruption name `{}`", s.name)));
            }
        }
        Ok(profile)
    }
}

/// A corruption implementation. `rng` is seeded per (image, spec) so
/// stochastic kinds are reproducible.
pub trait Corruption: Send + Sync {
    fn apply(&self, image: &PixelImage, spec: &CorruptionSpec, rng: &mut dyn rand::RngCore)
        -> Result<PixelImage>;
}

struct Builtin(CorruptionKind);

impl Corruption for Builtin {
    fn apply(
        &self,
        image: &PixelImage,
        spec: &CorruptionSpec,
        rng: &mut dyn rand::RngCore,
    ) -> Result<PixelImage> {
        let a = spec.severity;
        Ok(match self.0 {
            CorruptionKind::GaussianBlur => gaussian_blur(image, a),
            CorruptionKind::MotionBlur => motion_blur(image, a, spec.angle.unwrap_or(0.0)),
            CorruptionKind::GaussianNoise => gaussian_noise(image, a, rng),
            CorruptionKind::IsoNoise => iso_noise(image, a, rng),
            CorruptionKind::HsvShift => hsv_shift(image, a),
            CorruptionKind::ColorShift => {
                color_shift(image, a, spec.shift.unwrap_or(DEFAULT_SHIFT))
            }
            CorruptionKind::Brightness => brightness(image, a),
            CorruptionKind::Contrast => contrast(image, a),
        })
    }
}

const DEFAULT_SHIFT: [f64; 3] = [20.0, -10.0, 15.0];

/// Name-keyed set of corruptions; starts with the eight built-in kinds.
#[derive(Clone)]
pub struct Registry {
    entries: BTreeMap<String, Arc<dyn Corruption>>,
}

impl Default for Registry {
    fn default() -> Self {
        let mut entries: BTreeMap<String, Arc<dyn Corruption>> = BTreeMap::new();
        for k in CorruptionKind::ALL {
            entries.insert(k.name().to_owned(), Arc::new(Builtin(k)));
        }
        Registry { entries }
    }
}

impl Registry {
    pub fn register(&mut self, name: impl Into<String>, c: Arc<dyn Corruption>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("corruption `{name}` already registered")));
        }
        self.entries.insert(name, c);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, kind: &str) -> Result<&Arc<dyn Corruption>> {
        self.entries
            .get(kind)
            .ok_or_else(|| Error::UnknownCorruption(kind.to_owned()))
    }

    /// Applies `spec` with a generator seeded from `seed`.
    pub fn apply(&self, image: &PixelImage, spec: &CorruptionSpec, seed: u64) -> Result<PixelImage> {
        let c = self.get(&spec.kind)?;
        let mut rng = rng_for(seed);
        let out = c.apply(image, spec, &mut rng)?;
        if out.width() != image.width()
            || out.height() != image.height()
            || out.channels() != image.channels()
        {
            return Err(Error::Config(format!(
                "corruption `{}` changed the image geometry",
                spec.kind
            )));
        }
        Ok(out)
    }
}

/// Applies a spec with the built-in registry.
pub fn apply(image: &PixelImage, spec: &CorruptionSpec, seed: u64) -> Result<PixelImage> {
    Registry::default().apply(image, spec, seed)
}

#[inline]
fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Runs `f` over every color channel value, leaving alpha alone.
fn map_color(image: &PixelImage, mut f: impl FnMut(usize, u8) -> u8) -> PixelImage {
    let mut out = image.clone();
    let c = image.channels().count();
    for px in out.data_mut().chunks_exact_mut(c) {
        for (ch, v) in px.iter_mut().take(3).enumerate() {
            *v = f(ch, *v);
        }
    }
    out
}

fn brightness(image: &PixelImage, a: f64) -> PixelImage {
    if a == 0.0 {
        return image.clone();
    }
    map_color(image, |_, v| clamp_u8(v as f64 * (1.0 + a)))
}

fn contrast(image: &PixelImage, a: f64) -> PixelImage {
    if a == 0.0 {
        return image.clone();
    }
    let c = image.channels().count();
    let n = (image.width() as usize * image.height() as usize) as f64;
    let mut sums = [0.0f64; 3];
    for px in image.data().chunks_exact(c) {
        for ch in 0..3 {
            sums[ch] += px[ch] as f64;
        }
    }
    let means = sums.map(|s| s / n);
    map_color(image, |ch, v| clamp_u8((v as f64 - means[ch]) * (1.0 + a) + means[ch]))
}

fn color_shift(image: &PixelImage, a: f64, shift: [f64; 3]) -> PixelImage {
    if a == 0.0 {
        return image.clone();
    }
    map_color(image, |ch, v| clamp_u8(v as f64 + a * shift[ch]))
}

fn hsv_shift(image: &PixelImage, degrees: f64) -> PixelImage {
    if degrees == 0.0 {
        return image.clone();
    }
    let c = image.channels().count();
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let (r, g, b) = hsv_to_rgb((h + degrees).rem_euclid(360.0), s, v);
        px[0] = r;
        px[1] = g;
        px[2] = b;
    }
    out
}

fn rgb_to_hsv(r: u8, g: u8, b: u8) -> (f64, f64, f64) {
    let (r, g, b) = (r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (u8, u8, u8) {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (
        clamp_u8((r + m) * 255.0),
        clamp_u8((g + m) * 255.0),
        clamp_u8((b + m) * 255.0),
    )
}

fn gaussian_noise(image: &PixelImage, a: f64, rng: &mut dyn rand::RngCore) -> PixelImage {
    if a == 0.0 {
        return image.clone();
    }
    let normal = Normal::new(0.0, a * 255.0).expect("finite std");
    map_color(image, |_, v| clamp_u8(v as f64 + normal.sample(rng)))
}

/// Luminance noise with std `a*255*sqrt(luma/255)` shared by all channels,
/// plus independent chroma noise with std `a/2*255` per channel.
fn iso_noise(image: &PixelImage, a: f64, rng: &mut dyn rand::RngCore) -> PixelImage {
    if a == 0.0 {
        return image.clone();
    }
    let chroma = Normal::new(0.0, a / 2.0 * 255.0).expect("finite std");
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let c = image.channels().count();
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        let luma = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
        let lum_noise = a * 255.0 * (luma / 255.0).sqrt() * unit.sample(rng);
        for v in px.iter_mut().take(3) {
            *v = clamp_u8(*v as f64 + lum_noise + chroma.sample(rng));
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable isotropic blur with edge clamping.
fn gaussian_blur(image: &PixelImage, sigma: f64) -> PixelImage {
    if sigma <= 0.0 {
        return image.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let (w, h) = (image.width() as i64, image.height() as i64);
    let c = image.channels().count();
    let src = image.data();

    let mut tmp = vec![0.0f64; (w * h) as usize * 3];
    let mut padded = vec![0.0f64; (w + 2 * r) as usize * 3];
    for y in 0..h {
        let row = (y * w) as usize;
        for (i, px) in padded.chunks_exact_mut(3).enumerate() {
            let sx = (i as i64 - r).clamp(0, w - 1) as usize;
            let o = (row + sx) * c;
            px[0] = src[o] as f64;
            px[1] = src[o + 1] as f64;
            px[2] = src[o + 2] as f64;
        }
        let out_row = &mut tmp[row * 3..(row + w as usize) * 3];
        for (ki, kv) in kernel.iter().enumerate() {
            let shifted = &padded[ki * 3..ki * 3 + out_row.len()];
            for (a, v) in out_row.iter_mut().zip(shifted) {
                *a += kv * v;
            }
        }
    }

    let mut out = image.clone();
    let dst = out.data_mut();
    let mut acc = vec![0.0f64; w as usize * 3];
    for y in 0..h {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (ki, kv) in kernel.iter().enumerate() {
            let sy = (y + ki as i64 - r).clamp(0, h - 1) as usize;
            let src_row = &tmp[sy * w as usize * 3..(sy + 1) * w as usize * 3];
            for (a, v) in acc.iter_mut().zip(src_row) {
                *a += kv * v;
            }
        }
        let row = (y * w) as usize;
        for x in 0..w as usize {
            let o = (row + x) * c;
            for ch in 0..3 {
                dst[o + ch] = clamp_u8(acc[x * 3 + ch]);
            }
        }
    }
    out
}

/// Integer-offset taps equivalent to averaging bilinear samples at `offsets`.
fn bilinear_taps(offsets: &[(f64, f64)]) -> Vec<(i64, i64, f64)> {
    let inv = 1.0 / offsets.len() as f64;
    let mut merged: BTreeMap<(i64, i64), f64> = BTreeMap::new();
    for &(dx, dy) in offsets {
        let (x0, y0) = (dx.floor(), dy.floor());
        let (fx, fy) = (dx - x0, dy - y0);
        let (ix, iy) = (x0 as i64, y0 as i64);
        for (ox, oy, wt) in [
            (0, 0, (1.0 - fx) * (1.0 - fy)),
            (1, 0, fx * (1.0 - fy)),
            (0, 1, (1.0 - fx) * fy),
            (1, 1, fx * fy),
        ] {
            if wt > 0.0 {
                *merged.entry((ix + ox, iy + oy)).or_insert(0.0) += wt * inv;
            }
        }
    }
    merged.into_iter().map(|((x, y), w)| (x, y, w)).collect()
}

/// `out(x, y) = sum of w * src(x + dx, y + dy)` with edge clamping.
fn convolve_taps(image: &PixelImage, taps: &[(i64, i64, f64)]) -> PixelImage {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let c = image.channels().count();
    let src = image.data();
    let min_dx = taps.iter().map(|t| t.0).min().unwrap_or(0);
    let max_dx = taps.iter().map(|t| t.0).max().unwrap_or(0);
    let min_dy = taps.iter().map(|t| t.1).min().unwrap_or(0);
    let max_dy = taps.iter().map(|t| t.1).max().unwrap_or(0);
    let linear: Vec<(isize, f64)> = taps
        .iter()
        .map(|&(dx, dy, wt)| (((dy * w + dx) * c as i64) as isize, wt))
        .collect();
    let mut out = image.clone();
    let dst = out.data_mut();
    for y in 0..h {
        let rows_inside = y + min_dy >= 0 && y + max_dy < h;
        for x in 0..w {
            let o = ((y * w + x) as usize) * c;
            let mut acc = [0.0f64; 3];
            if rows_inside && x + min_dx >= 0 && x + max_dx < w {
                for &(off, wt) in &linear {
                    let s = (o as isize + off) as usize;
                    acc[0] += wt * src[s] as f64;
                    acc[1] += wt * src[s + 1] as f64;
                    acc[2] += wt * src[s + 2] as f64;
                }
            } else {
                for &(dx, dy, wt) in taps {
                    let sx = (x + dx).clamp(0, w - 1);
                    let sy = (y + dy).clamp(0, h - 1);
                    let s = ((sy * w + sx) as usize) * c;
                    for ch in 0..3 {
                        acc[ch] += wt * src[s + ch] as f64;
                    }
                }
            }
            for ch in 0..3 {
                dst[o + ch] = clamp_u8(acc[ch]);
            }
        }
    }
    out
}

/// Average of `ceil(length)` bilinear samples on a centered line at `angle`
/// degrees.
fn motion_blur(image: &PixelImage, length: f64, angle: f64) -> PixelImage {
    let n = length.ceil() as i64;
    if n <= 1 {
        return image.clone();
    }
    let (sin, cos) = angle.to_radians().sin_cos();
    let offsets: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let t = i as f64 - (n - 1) as f64 / 2.0;
            (t * cos, t * sin)
        })
        .collect();
    convolve_taps(image, &bilinear_taps(&offsets))
}

/// Output of [`build_corrupted_set`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptedSetSummary {
    pub source_images: usize,
    pub spec_count: usize,
    pub total_images: usize,
    pub labels_copied: usize,
    /// Image count per tag, including [`CLEAN_TAG`].
    pub per_tag: BTreeMap<String, usize>,
    pub seed: u64,
}

/// Locates the clean images and their label directory. Accepts either a
/// split root (`images/` + `labels/`) or a flat directory with `<stem>.txt`
/// labels next to the images.
fn clean_layout(clean_dir: &Path) -> (PathBuf, PathBuf) {
    let images = clean_dir.join("images");
    if images.is_dir() {
        (images, clean_dir.join("labels"))
    } else {
        (clean_dir.to_path_buf(), clean_dir.to_path_buf())
    }
}

pub fn tagged_stem(stem: &str, tag: &str) -> String {
    format!("{stem}{TAG_SEPARATOR}{tag}")
}

/// Splits `<stem>__<tag>`; untagged names belong to the clean group.
pub fn split_tag(stem: &str) -> (&str, &str) {
    match stem.rsplit_once(TAG_SEPARATOR) {
        Some((base, tag)) if !tag.is_empty() => (base, tag),
        _ => (stem, CLEAN_TAG),
    }
}

/// Writes a clean copy of every image plus one variant per spec to
/// `out_dir/images`, copying label files unchanged to `out_dir/labels`.
pub fn build_corrupted_set(
    clean_dir: &Path,
    specs: &[CorruptionSpec],
    seed: u64,
    out_dir: &Path,
    registry: &Registry,
    exec: Exec,
) -> Result<CorruptedSetSummary> {
    for s in specs {
        s.validate()?;
        registry.get(&s.kind)?;
    }
    let (images_in, labels_in) = clean_layout(clean_dir);
    let sources = fsutil::list_images(&images_in)?;
    if sources.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no images in {}",
            images_in.display()
        )));
    }
    let images_out = out_dir.join("images");
    let labels_out = out_dir.join("labels");
    fsutil::create_dir_all(&images_out)?;
    fsutil::create_dir_all(&labels_out)?;
    let classes = clean_dir.join("classes.txt");
    if classes.is_file() {
        fsutil::write(&out_dir.join("classes.txt"), fsutil::read(&classes)?)?;
    }

    let variants = specs.len() + 1;
    let labels_copied = exec.try_map_range(sources.len(), |img_idx| {
        let path = &sources[img_idx];
        let stem = fsutil::file_stem(path);
        let image = PixelImage::load(path)?;
        let label = labels_in.join(format!("{stem}.txt"));
        let label = if label.is_file() { Some(fsutil::read(&label)?) } else { None };
        for variant in 0..variants {
            let (tag, out) = if variant == 0 {
                (CLEAN_TAG, None)
            } else {
                let spec = &specs[variant - 1];
                let s = derive_seed2(seed, img_idx as u64, variant as u64);
                (spec.name.as_str(), Some(registry.apply(&image, spec, s)?))
            };
            let name = tagged_stem(&stem, tag);
            out.as_ref()
                .unwrap_or(&image)
                .save_png(&images_out.join(format!("{name}.png")))?;
            if let Some(bytes) = &label {
                fsutil::write(&labels_out.join(format!("{name}.txt")), bytes)?;
            }
        }
        Ok::<_, Error>(if label.is_some() { variants } else { 0 })
    })?;

    let mut per_tag = BTreeMap::new();
    per_tag.insert(CLEAN_TAG.to_owned(), sources.len());
    for s in specs {
        per_tag.insert(s.name.clone(), sources.len());
    }
    let summary = CorruptedSetSummary {
        source_images: sources.len(),
        spec_count: specs.len(),
        total_images: sources.len() * variants,
        labels_copied: labels_copied.iter().sum(),
        per_tag,
        seed,
    };
    fsutil::write_json(&out_dir.join("corruption_summary.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Channels;
    use proptest::prelude::*;

    fn reference_gaussian_blur(image: &PixelImage, sigma: f64) -> PixelImage {
        if sigma <= 0.0 {
            return image.clone();
        }
        let kernel = gaussian_kernel(sigma);
        let r = (kernel.len() / 2) as i64;
        let (w, h) = (image.width() as i64, image.height() as i64);
        let c = image.channels().count();
        let src = image.data();

        let mut tmp = vec![0.0f64; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f64; 3];
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = (x + ki as i64 - r).clamp(0, w - 1);
                    let o = ((y * w + sx) as usize) * c;
                    for ch in 0..3 {
                        acc[ch] += kv * src[o + ch] as f64;
                    }
                }
                let o = ((y * w + x) as usize) * c;
                tmp[o..o + 3].copy_from_slice(&acc);
            }
        }
        let mut out = image.clone();
        let dst = out.data_mut();
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f64; 3];
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = (y + ki as i64 - r).clamp(0, h - 1);
                    let o = ((sy * w + x) as usize) * c;
                    for ch in 0..3 {
                        acc[ch] += kv * tmp[o + ch];
                    }
                }
                let o = ((y * w + x) as usize) * c;
                for ch in 0..3 {
                    dst[o + ch] = clamp_u8(acc[ch]);
                }
            }
        }
        out
    }

    fn reference_motion_blur(image: &PixelImage, length: f64, angle: f64) -> PixelImage {
        let n = length.ceil() as i64;
        if n <= 1 {
            return image.clone();
        }
        let (sin, cos) = angle.to_radians().sin_cos();
        let offsets: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let t = i as f64 - (n - 1) as f64 / 2.0;
                (t * cos, t * sin)
            })
            .collect();
        let (w, h) = (image.width() as i64, image.height() as i64);
        let c = image.channels().count();
        let src = image.data();
        let fetch = |x: i64, y: i64, ch: usize| -> f64 {
            let x = x.clamp(0, w - 1);
            let y = y.clamp(0, h - 1);
            src[((y * w + x) as usize) * c + ch] as f64
        };
        let mut out = image.clone();
        let dst = out.data_mut();
        let inv = 1.0 / n as f64;
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f64; 3];
                for &(dx, dy) in &offsets {
                    let (sx, sy) = (x as f64 + dx, y as f64 + dy);
                    let (x0, y0) = (sx.floor(), sy.floor());
                    let (fx, fy) = (sx - x0, sy - y0);
                    let (x0, y0) = (x0 as i64, y0 as i64);
                    for (ch, a) in acc.iter_mut().enumerate() {
                        let top = fetch(x0, y0, ch) * (1.0 - fx) + fetch(x0 + 1, y0, ch) * fx;
                        let bot = fetch(x0, y0 + 1, ch) * (1.0 - fx) + fetch(x0 + 1, y0 + 1, ch) * fx;
                        *a += top * (1.0 - fy) + bot * fy;
                    }
                }
                let o = ((y * w + x) as usize) * c;
                for ch in 0..3 {
                    dst[o + ch] = clamp_u8(acc[ch] * inv);
                }
            }
        }
        out
    }

    fn gradient(w: u32, h: u32) -> PixelImage {
        let mut img = PixelImage::filled(w, h, Channels::Rgb, &[0, 0, 0]).unwrap();
        for y in 0..h {
            for x in 0..w {
                let v = ((x * 7 + y * 13) % 256) as u8;
                img.pixel_mut(x, y).copy_from_slice(&[v, 255 - v, v / 2]);
            }
        }
        img
    }

    fn spec(kind: CorruptionKind, a: f64) -> CorruptionSpec {
        CorruptionSpec::new(kind, a)
    }

    #[test]
    fn zero_severity_is_identity() {
        let img = gradient(17, 9);
        for k in CorruptionKind::ALL {
            assert_eq!(apply(&img, &spec(k, 0.0), 3).unwrap(), img, "{k:?}");
        }
    }

    #[test]
    fn noise_depends_on_seed_only() {
        let img = gradient(16, 16);
        let s = spec(CorruptionKind::GaussianNoise, 0.1);
        let a = apply(&img, &s, 1).unwrap();
        assert_eq!(a, apply(&img, &s, 1).unwrap());
        assert_ne!(a, apply(&img, &s, 2).unwrap());
    }

    #[test]
    fn contrast_fixes_constant_image() {
        let img = PixelImage::filled(8, 8, Channels::Rgb, &[90, 128, 200]).unwrap();
        assert_eq!(apply(&img, &spec(CorruptionKind::Contrast, 1.0), 0).unwrap(), img);
    }

    #[test]
    fn brightness_scales_and_clamps() {
        let img = PixelImage::filled(2, 2, Channels::Rgb, &[100, 200, 10]).unwrap();
        let out = apply(&img, &spec(CorruptionKind::Brightness, 0.5), 0).unwrap();
        assert_eq!(out.pixel(0, 0), &[150, 255, 15]);
        let dark = apply(&img, &spec(CorruptionKind::Brightness, -0.5), 0).unwrap();
        assert_eq!(dark.pixel(1, 1), &[50, 100, 5]);
    }

    #[test]
    fn hue_rotation_is_periodic() {
        let img = gradient(32, 8);
        let out = apply(&img, &spec(CorruptionKind::HsvShift, 360.0), 0).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
        let red = PixelImage::filled(1, 1, Channels::Rgb, &[255, 0, 0]).unwrap();
        let green = apply(&red, &spec(CorruptionKind::HsvShift, 120.0), 0).unwrap();
        assert_eq!(green.pixel(0, 0), &[0, 255, 0]);
    }

    #[test]
    fn blur_preserves_constant_and_alpha() {
        let img = PixelImage::filled(9, 7, Channels::Rgba, &[40, 80, 120, 77]).unwrap();
        for k in [CorruptionKind::GaussianBlur, CorruptionKind::MotionBlur] {
            let mut s = spec(k, 4.0);
            s.angle = Some(30.0);
            assert_eq!(apply(&img, &s, 0).unwrap(), img);
        }
    }

    #[test]
    fn horizontal_motion_blur_averages_row() {
        let mut img = PixelImage::filled(5, 1, Channels::Rgb, &[0, 0, 0]).unwrap();
        img.pixel_mut(2, 0).copy_from_slice(&[90, 90, 90]);
        let out = apply(&img, &spec(CorruptionKind::MotionBlur, 3.0), 0).unwrap();
        assert_eq!(out.pixel(1, 0), &[30, 30, 30]);
        assert_eq!(out.pixel(2, 0), &[30, 30, 30]);
        assert_eq!(out.pixel(0, 0), &[0, 0, 0]);
    }

    #[test]
    fn unknown_kind() {
        let mut s = spec(CorruptionKind::Brightness, 0.1);
        s.kind = "fog".into();
        assert!(matches!(
            apply(&gradient(2, 2), &s, 0),
            Err(Error::UnknownCorruption(_))
        ));
    }

    #[test]
    fn default_profile_has_ten_unique_specs() {
        let p = CorruptionProfile::default_profile();
        assert_eq!(p.specs.len(), 10);
        let reg = Registry::default();
        for s in &p.specs {
            reg.get(&s.kind).unwrap();
        }
        let kinds: std::collections::HashSet<_> = p.specs.iter().map(|s| &s.kind).collect();
        assert_eq!(kinds.len(), 8);
    }

    #[test]
    fn profile_rejects_duplicates() {
        let text = r#"[{"name":"a","kind":"brightness","severity":0.1},
                       {"name":"a","kind":"contrast","severity":0.1}]"#;
        assert!(CorruptionProfile::parse(text).is_err());
    }

    #[test]
    fn tags_round_trip() {
        assert_eq!(split_tag(&tagged_stem("img_01", "motion_blur")), ("img_01", "motion_blur"));
        assert_eq!(split_tag("img_01"), ("img_01", CLEAN_TAG));
    }

    #[test]
    fn set_with_no_specs_copies_clean() {
        let dir = tempfile::tempdir().unwrap();
        let clean = dir.path().join("clean");
        std::fs::create_dir_all(&clean).unwrap();
        for i in 0..5 {
            gradient(8, 8).save_png(&clean.join(format!("im{i}.png"))).unwrap();
        }
        std::fs::write(clean.join("im0.txt"), "0 0.5 0.5 0.2 0.2\n").unwrap();
        let out = dir.path().join("out");
        let s = build_corrupted_set(&clean, &[], 1, &out, &Registry::default(), Exec::Sequential)
            .unwrap();
        assert_eq!(s.total_images, 5);
        assert_eq!(s.labels_copied, 1);
        assert_eq!(fsutil::list_images(&out.join("images")).unwrap().len(), 5);
    }

    fn arb_image() -> impl Strategy<Value = PixelImage> {
        (1u32..12, 1u32..12, any::<bool>()).prop_flat_map(|(w, h, rgba)| {
            let ch = if rgba { Channels::Rgba } else { Channels::Rgb };
            proptest::collection::vec(any::<u8>(), (w * h) as usize * ch.count())
                .prop_map(move |d| PixelImage::from_raw(w, h, ch, d).unwrap())
        })
    }

    fn noisy(w: u32, h: u32, seed: u64) -> PixelImage {
        use rand::Rng;
        let mut rng = rng_for(seed);
        let mut img = PixelImage::filled(w, h, Channels::Rgba, &[0, 0, 0, 255]).unwrap();
        img.data_mut().iter_mut().for_each(|v| *v = rng.random());
        img
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn fast_gaussian_blur_matches_reference(w in 1u32..40, h in 1u32..40, sigma in 0.2f64..4.0, seed in 0u64..1000) {
            let img = noisy(w, h, seed);
            prop_assert_eq!(gaussian_blur(&img, sigma), reference_gaussian_blur(&img, sigma));
        }

        #[test]
        fn fast_motion_blur_within_one_level(w in 1u32..40, h in 1u32..40, len in 1.0f64..15.0, angle in 0.0f64..360.0, seed in 0u64..1000) {
            let img = noisy(w, h, seed);
            let fast = motion_blur(&img, len, angle);
            let slow = reference_motion_blur(&img, len, angle);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                prop_assert!((*a as i16 - *b as i16).abs() <= 1);
            }
        }

        #[test]
        fn geometry_and_alpha_preserved(
            img in arb_image(),
            k in 0usize..8,
            a in 0.0f64..3.0,
            seed in any::<u64>(),
        ) {
            let mut s = spec(CorruptionKind::ALL[k], a);
            s.angle = Some(a * 50.0);
            let out = apply(&img, &s, seed).unwrap();
            prop_assert_eq!(out.width(), img.width());
            prop_assert_eq!(out.height(), img.height());
            prop_assert_eq!(out.channels(), img.channels());
            if img.channels() == Channels::Rgba {
                for (p, q) in img.data().chunks(4).zip(out.data().chunks(4)) {
                    prop_assert_eq!(p[3], q[3]);
                }
            }
        }
    }
}
