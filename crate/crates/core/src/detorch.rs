//! Detector boundary: the provider contract, a deterministic mock detector,
//! an external-process adapter, and the test-time-augmentation and tiled
//! inference wrappers.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detpost::{dedup, fuse, FusedDetection};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{BoundingBox, PixelImage};
use crate::seed::{derive_seed, hash64, rng_for};

/// A labeled, scored box from one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub bbox: BoundingBox,
    pub confidence: f64,
    #[serde(default)]
    pub frame_index: u64,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::InvalidInput(format!(
                "confidence {} outside [0,1]",
                self.confidence
            )));
        }
        if self.label.is_empty() {
            return Err(Error::InvalidInput("detection label is empty".into()));
        }
        Ok(())
    }
}

impl From<&FusedDetection> for Detection {
    fn from(f: &FusedDetection) -> Self {
        Detection {
            label: f.label.clone(),
            bbox: f.bbox,
            confidence: f.confidence,
            frame_index: f.frames.first().copied().unwrap_or(0),
        }
    }
}

/// One line of a detection JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub label: String,
    pub bbox: BoundingBox,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_index: Option<u64>,
}

impl DetectionRecord {
    pub fn new(image_id: impl Into<String>, d: &Detection) -> Self {
        DetectionRecord {
            image_id: image_id.into(),
            label: d.label.clone(),
            bbox: d.bbox,
            confidence: d.confidence,
            frame_index: None,
        }
    }

    pub fn detection(&self) -> Detection {
        Detection {
            label: self.label.clone(),
            bbox: self.bbox,
            confidence: self.confidence,
            frame_index: self.frame_index.unwrap_or(0),
        }
    }
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[DetectionRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn parse_jsonl(text: &str) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: DetectionRecord =
            serde_json::from_str(line).map_err(|e| Error::json(format!("line {}", n + 1), e))?;
        r.detection().validate()?;
        out.push(r);
    }
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text).map_err(|e| match e {
        Error::Json { context, source } => {
            Error::json(format!("{}: {context}", path.display()), source)
        }
        other => other,
    })
}

/// A geometric test-time transform: optional horizontal flip after scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtaTransform {
    pub flip: bool,
    pub scale: f64,
}

impl TtaTransform {
    pub const IDENTITY: TtaTransform = TtaTransform {
        flip: false,
        scale: 1.0,
    };

    pub fn is_identity(&self) -> bool {
        !self.flip && self.scale == 1.0
    }
}

/// What part of, and how, a source image is shown to a detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum View {
    Transform(TtaTransform),
    /// Crop `[x, y, x + w, y + h)`.
    Tile { x: u32, y: u32, w: u32, h: u32 },
}

impl View {
    pub fn output_size(&self, width: u32, height: u32) -> (u32, u32) {
        match *self {
            View::Transform(t) => scaled_size(width, height, t.scale),
            View::Tile { w, h, .. } => (w, h),
        }
    }

    pub fn render(&self, source: &PixelImage) -> Result<PixelImage> {
        match *self {
            View::Transform(t) => {
                let (w, h) = scaled_size(source.width(), source.height(), t.scale);
                let scaled = source.resize(w, h)?;
                Ok(if t.flip { scaled.flip_horizontal() } else { scaled })
            }
            View::Tile { x, y, w, h } => source.crop(x, y, x + w, y + h),
        }
    }

    /// Source coordinates to view coordinates (unclipped).
    pub fn forward(&self, b: &BoundingBox, width: u32, height: u32) -> BoundingBox {
        match *self {
            View::Transform(t) => {
                let (vw, vh) = scaled_size(width, height, t.scale);
                let (sx, sy) = (vw as f64 / width as f64, vh as f64 / height as f64);
                let s = BoundingBox {
                    x_min: b.x_min * sx,
                    y_min: b.y_min * sy,
                    x_max: b.x_max * sx,
                    y_max: b.y_max * sy,
                };
                if t.flip {
                    flip_box(&s, vw)
                } else {
                    s
                }
            }
            View::Tile { x, y, .. } => b.translate(-(x as f64), -(y as f64)),
        }
    }

    /// View coordinates back to source coordinates.
    pub fn inverse(&self, b: &BoundingBox, width: u32, height: u32) -> BoundingBox {
        match *self {
            View::Transform(t) => {
                let (vw, vh) = scaled_size(width, height, t.scale);
                let u = if t.flip { flip_box(b, vw) } else { *b };
                let (sx, sy) = (vw as f64 / width as f64, vh as f64 / height as f64);
                BoundingBox {
                    x_min: u.x_min / sx,
                    y_min: u.y_min / sy,
                    x_max: u.x_max / sx,
                    y_max: u.y_max / sy,
                }
            }
            View::Tile { x, y, .. } => b.translate(x as f64, y as f64),
        }
    }

    fn key(&self) -> u64 {
        let text = match *self {
            View::Transform(t) => format!("t:{}:{}", t.flip, t.scale.to_bits()),
            View::Tile { x, y, w, h } => format!("c:{x}:{y}:{w}:{h}"),
        };
        hash64(text.as_bytes())
    }
}

fn scaled_size(width: u32, height: u32, scale: f64) -> (u32, u32) {
    if scale == 1.0 {
        return (width, height);
    }
    (
        ((width as f64 * scale).round() as u32).max(1),
        ((height as f64 * scale).round() as u32).max(1),
    )
}

/// Mirror a box across the vertical axis of a `width`-wide image.
pub fn flip_box(b: &BoundingBox, width: u32) -> BoundingBox {
    let w = width as f64;
    BoundingBox {
        x_min: w - b.x_max,
        y_min: b.y_min,
        x_max: w - b.x_min,
        y_max: b.y_max,
    }
}

/// Detector contract. Implementations must be deterministic for a given
/// image and provider configuration, and must return boxes inside the image.
pub trait DetectorProvider: Send + Sync {
    fn detect(&self, image: &PixelImage) -> Result<Vec<Detection>>;

    /// Detect on a view of `source`. The default renders the view and calls
    /// [`detect`](Self::detect); results are in view coordinates.
    fn detect_view(&self, source: &PixelImage, view: &View) -> Result<Vec<Detection>> {
        self.detect(&view.render(source)?)
    }
}

/// Noise model of the mock detector. The default is noise-free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockNoise {
    /// Std-dev, in pixels, added to each box coordinate.
    pub jitter_std: f64,
    /// Probability that an object is missed.
    pub dropout: f64,
    /// Row-stochastic label confusion: `confusion[true][predicted]` over
    /// `labels`. Labels not listed are never confused.
    pub confusion: Option<Confusion>,
    /// Mean and std of the reported confidence, clamped to `[0, 1]`.
    pub confidence_mean: f64,
    pub confidence_std: f64,
}

impl Default for MockNoise {
    fn default() -> Self {
        MockNoise {
            jitter_std: 0.0,
            dropout: 0.0,
            confusion: None,
            confidence_mean: 1.0,
            confidence_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

impl MockNoise {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..).contains(&self.jitter_std) || !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Config("mock jitter must be >= 0 and dropout in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence_mean) || !(0.0..).contains(&self.confidence_std) {
            return Err(Error::Config("mock confidence mean must be in [0,1], std >= 0".into()));
        }
        if let Some(c) = &self.confusion {
            if c.matrix.len() != c.labels.len()
                || c.matrix.iter().any(|r| {
                    r.len() != c.labels.len()
                        || r.iter().any(|v| *v < 0.0)
                        || (r.iter().sum::<f64>() - 1.0).abs() > 1e-6
                })
            {
                return Err(Error::Config("confusion matrix must be square and row-stochastic".into()));
            }
        }
        Ok(())
    }
}

/// Ground-truth driven detector for tests and offline pipelines.
///
/// Truth is registered per image (keyed by pixel fingerprint) or passed
/// directly to [`observe`](Self::observe). Noise is drawn from a generator
/// seeded by the provider seed and the image/view, so output is
/// reproducible. With the default noise model the truth comes back verbatim
/// with confidence 1.
#[derive(Debug, Clone, Default)]
pub struct MockDetector {
    truth: HashMap<u64, Vec<(String, BoundingBox)>>,
    pub noise: MockNoise,
    pub seed: u64,
    /// Minimum visible fraction of an object's area for it to be reported
    /// in a cropped view.
    pub min_visibility: f64,
}

pub fn fingerprint(image: &PixelImage) -> u64 {
    let mut bytes = Vec::with_capacity(image.data().len() + 9);
    bytes.extend_from_slice(&image.width().to_le_bytes());
    bytes.extend_from_slice(&image.height().to_le_bytes());
    bytes.push(image.channels().count() as u8);
    bytes.extend_from_slice(image.data());
    hash64(&bytes)
}

impl MockDetector {
    pub fn new(noise: MockNoise, seed: u64) -> Result<Self> {
        noise.validate()?;
        Ok(MockDetector {
            truth: HashMap::new(),
            noise,
            seed,
            min_visibility: 0.5,
        })
    }

    pub fn perfect() -> Self {
        MockDetector {
            min_visibility: 0.5,
            ..Default::default()
        }
    }

    pub fn register(&mut self, image: &PixelImage, truth: Vec<(String, BoundingBox)>) {
        self.truth.insert(fingerprint(image), truth);
    }

    /// Applies the noise model to `truth` for an image of the given size.
    /// `key` selects the noise stream.
    pub fn observe(
        &self,
        truth: &[(String, BoundingBox)],
        width: u32,
        height: u32,
        key: u64,
    ) -> Vec<Detection> {
        let n = &self.noise;
        let mut rng = rng_for(derive_seed(self.seed, key));
        let jitter = (n.jitter_std > 0.0).then(|| Normal::new(0.0, n.jitter_std).expect("std"));
        let conf = (n.confidence_std > 0.0)
            .then(|| Normal::new(n.confidence_mean, n.confidence_std).expect("std"));
        let mut out = Vec::with_capacity(truth.len());
        for (label, b) in truth {
            if n.dropout > 0.0 && rng.random::<f64>() < n.dropout {
                continue;
            }
            let mut c = b.to_array();
            if let Some(j) = &jitter {
                for v in c.iter_mut() {
                    *v += j.sample(&mut rng);
                }
            }
            let (x0, x1) = (c[0].min(c[2]), c[0].max(c[2]));
            let (y0, y1) = (c[1].min(c[3]), c[1].max(c[3]));
            let bbox = BoundingBox {
                x_min: x0,
                y_min: y0,
                x_max: x1,
                y_max: y1,
            }
            .clip(width as f64, height as f64);
            if bbox.area() <= 0.0 {
                continue;
            }
            let label = self.confuse(label, &mut rng);
            let confidence = match &conf {
                Some(d) => d.sample(&mut rng).clamp(0.0, 1.0),
                None => n.confidence_mean,
            };
            out.push(Detection {
                label,
                bbox,
                confidence,
                frame_index: 0,
            });
        }
        out
    }

    fn confuse<R: Rng>(&self, label: &str, rng: &mut R) -> String {
        let Some(c) = &self.noise.confusion else {
            return label.to_owned();
        };
        let Some(row) = c.labels.iter().position(|l| l == label) else {
            return label.to_owned();
        };
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (j, p) in c.matrix[row].iter().enumerate() {
            acc += p;
            if u < acc {
                return c.labels[j].clone();
            }
        }
        label.to_owned()
    }
}

impl DetectorProvider for MockDetector {
    fn detect(&self, image: &PixelImage) -> Result<Vec<Detection>> {
        let fp = fingerprint(image);
        Ok(match self.truth.get(&fp) {
            Some(t) => self.observe(t, image.width(), image.height(), fp),
            None => Vec::new(),
        })
    }

    fn detect_view(&self, source: &PixelImage, view: &View) -> Result<Vec<Detection>> {
        let fp = fingerprint(source);
        let Some(truth) = self.truth.get(&fp) else {
            return Ok(Vec::new());
        };
        let (w, h) = (source.width(), source.height());
        let (vw, vh) = view.output_size(w, h);
        let mapped: Vec<(String, BoundingBox)> = truth
            .iter()
            .filter_map(|(l, b)| {
                let m = view.forward(b, w, h);
                let clipped = m.clip(vw as f64, vh as f64);
                let visible = if m.area() > 0.0 { clipped.area() / m.area() } else { 0.0 };
                (clipped.area() > 0.0 && visible >= self.min_visibility)
                    .then(|| (l.clone(), clipped))
            })
            .collect();
        Ok(self.observe(&mapped, vw, vh, fp ^ view.key()))
    }
}

/// Runs an external command per image: the command receives the path of a
/// PNG as its last argument and prints detection JSON-lines on stdout.
#[derive(Debug, Clone)]
pub struct ExternalDetector {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl ExternalDetector {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        ExternalDetector {
            program: program.into(),
            args,
        }
    }

    /// Splits a command line on whitespace.
    pub fn from_command_line(cmd: &str) -> Result<Self> {
        let mut parts = cmd.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| Error::Config("empty external detector command".into()))?;
        Ok(Self::new(program, parts.map(str::to_owned).collect()))
    }

    pub fn detect_path(&self, path: &Path) -> Result<Vec<Detection>> {
        let context = || format!("{} {}", self.program.display(), path.display());
        let output = Command::new(&self.program)
            .args(&self.args)
            .arg(path)
            .output()
            .map_err(|e| Error::Provider {
                context: context(),
                message: e.to_string(),
            })?;
        if !output.status.success() {
            return Err(Error::Provider {
                context: context(),
                message: format!(
                    "exited with {}: {}",
                    output.status,
                    String::from_utf8_lossy(&output.stderr).trim()
                ),
            });
        }
        let mut out = Vec::new();
        for line in output.stdout.lines() {
            let line = line.map_err(|e| Error::Provider {
                context: context(),
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            #[derive(Deserialize)]
            struct Line {
                label: String,
                bbox: BoundingBox,
                confidence: f64,
            }
            let l: Line = serde_json::from_str(&line).map_err(|e| Error::Provider {
                context: context(),
                message: format!("bad output line `{line}`: {e}"),
            })?;
            let d = Detection {
                label: l.label,
                bbox: l.bbox,
                confidence: l.confidence,
                frame_index: 0,
            };
            d.validate().map_err(|e| Error::Provider {
                context: context(),
                message: e.to_string(),
            })?;
            out.push(d);
        }
        Ok(out)
    }
}

impl DetectorProvider for ExternalDetector {
    fn detect(&self, image: &PixelImage) -> Result<Vec<Detection>> {
        let file = tempfile::Builder::new()
            .prefix("partsight-frame-")
            .suffix(".png")
            .tempfile()
            .map_err(|e| Error::io(std::env::temp_dir(), e))?;
        image.save_png(file.path())?;
        let dets = self.detect_path(file.path())?;
        Ok(dets
            .into_iter()
            .map(|mut d| {
                d.bbox = d.bbox.clip(image.width() as f64, image.height() as f64);
                d
            })
            .collect())
    }
}

/// Merge parameters shared by the inference wrappers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub iou_threshold: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams { iou_threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtaConfig {
    pub horizontal_flip: bool,
    pub scales: Vec<f64>,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            horizontal_flip: true,
            scales: vec![1.0],
        }
    }
}

impl TtaConfig {
    /// Identity first, then every (scale, flip) combination in order.
    pub fn transforms(&self) -> Result<Vec<TtaTransform>> {
        if self.scales.is_empty() || !self.scales.contains(&1.0) {
            return Err(Error::Config("TTA scales must include 1.0".into()));
        }
        if self.scales.iter().any(|s| s.is_nan() || *s <= 0.0 || !s.is_finite()) {
            return Err(Error::Config("TTA scales must be positive".into()));
        }
        let mut out = vec![TtaTransform::IDENTITY];
        for &scale in &self.scales {
            for flip in [false, true] {
                if flip && !self.horizontal_flip {
                    continue;
                }
                let t = TtaTransform { flip, scale };
                if !out.contains(&t) {
                    out.push(t);
                }
            }
        }
        Ok(out)
    }
}

fn to_source(
    dets: Vec<Detection>,
    view: &View,
    width: u32,
    height: u32,
) -> Vec<Detection> {
    dets.into_iter()
        .map(|mut d| {
            d.bbox = view
                .inverse(&d.bbox, width, height)
                .clip(width as f64, height as f64);
            d
        })
        .collect()
}

fn fused_to_detections(fused: &[FusedDetection], width: u32, height: u32) -> Vec<Detection> {
    fused
        .iter()
        .map(|f| {
            let mut d = Detection::from(f);
            d.frame_index = 0;
            d.bbox = d.bbox.clip(width as f64, height as f64);
            d
        })
        .collect()
}

/// Test-time augmentation: detect on every transform, map boxes back, and
/// merge with [`fuse`] at `min_votes = 1`.
pub fn detect_tta(
    provider: &dyn DetectorProvider,
    image: &PixelImage,
    config: &TtaConfig,
    fusion: FusionParams,
    exec: Exec,
) -> Result<Vec<Detection>> {
    let transforms = config.transforms()?;
    if transforms.len() == 1 {
        return provider.detect(image);
    }
    let (w, h) = (image.width(), image.height());
    let per_view = exec.try_map_range(transforms.len(), |i| {
        let view = View::Transform(transforms[i]);
        let dets = if transforms[i].is_identity() {
            provider.detect(image)
        } else {
            provider.detect_view(image, &view)
        }
        .map_err(|e| Error::Provider {
            context: format!("tta transform {i} ({:?})", transforms[i]),
            message: e.to_string(),
        })?;
        Ok::<_, Error>(to_source(dets, &view, w, h))
    })?;
    let all: Vec<Detection> = per_view.into_iter().flatten().collect();
    Ok(fused_to_detections(&fuse(&all, fusion.iou_threshold, 1), w, h))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SliceConfig {
    pub tile_size: u32,
    pub overlap: f64,
}

impl Default for SliceConfig {
    fn default() -> Self {
        SliceConfig {
            tile_size: 512,
            overlap: 0.2,
        }
    }
}

impl SliceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size < 32 {
            return Err(Error::Config(format!("tile size {} below 32", self.tile_size)));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap {} outside [0,1)", self.overlap)));
        }
        Ok(())
    }

    /// Tile origins along one axis of length `len`; the last tile is
    /// right-aligned so the axis is fully covered.
    fn starts(&self, len: u32) -> Vec<u32> {
        let t = self.tile_size;
        if len <= t {
            return vec![0];
        }
        let stride = ((t as f64 * (1.0 - self.overlap)).floor() as u32).max(1);
        let mut out: Vec<u32> = (0..).map(|i| i * stride).take_while(|s| s + t < len).collect();
        out.push(len - t);
        out.dedup();
        out
    }

    /// Tiles in row-major order.
    pub fn tiles(&self, width: u32, height: u32) -> Vec<View> {
        let (tw, th) = (self.tile_size.min(width), self.tile_size.min(height));
        let mut out = Vec::new();
        for y in self.starts(height) {
            for x in self.starts(width) {
                out.push(View::Tile { x, y, w: tw, h: th });
            }
        }
        out
    }
}

/// Tiled inference: detect per overlapping tile, offset to image
/// coordinates, merge with [`fuse`] at `min_votes = 1`, then [`dedup`].
pub fn detect_sliced(
    provider: &dyn DetectorProvider,
    image: &PixelImage,
    config: &SliceConfig,
    fusion: FusionParams,
    exec: Exec,
) -> Result<Vec<Detection>> {
    config.validate()?;
    let (w, h) = (image.width(), image.height());
    let tiles = config.tiles(w, h);
    if tiles.len() == 1 {
        return provider.detect(image);
    }
    let per_tile = exec.try_map_range(tiles.len(), |i| {
        let dets = provider
            .detect_view(image, &tiles[i])
            .map_err(|e| Error::Provider {
                context: format!("tile {i} ({:?})", tiles[i]),
                message: e.to_string(),
            })?;
        Ok::<_, Error>(to_source(dets, &tiles[i], w, h))
    })?;
    let all: Vec<Detection> = per_tile.into_iter().flatten().collect();
    let fused = fuse(&all, fusion.iou_threshold, 1);
    Ok(fused_to_detections(&dedup(&fused, fusion.iou_threshold), w, h))
}
