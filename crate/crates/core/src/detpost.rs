//! Multi-frame perception post-processing: consecutive-frame gating,
//! confidence-weighted box fusion, duplicate suppression and depth-ranked
//! top-K selection.

use std::cmp::Ordering;
use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detorch::Detection;
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

pub const DEFAULT_FRAMES: usize = 5;
pub const DEFAULT_CONFIDENCE: f64 = 0.4;
pub const DEFAULT_FUSION_IOU: f64 = 0.5;
pub const DEFAULT_MIN_VOTES: usize = 3;
pub const DEFAULT_TOP_K: usize = 3;

/// Ring of the most recent frames' detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameBuffer {
    capacity: usize,
    frames: VecDeque<(u64, Vec<Detection>)>,
}

impl FrameBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("frame buffer capacity must be >= 1".into()));
        }
        Ok(FrameBuffer {
            capacity,
            frames: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Appends a frame, evicting the oldest when full. Frame indices must be
    /// strictly increasing.
    pub fn push(&mut self, frame_index: u64, detections: Vec<Detection>) -> Result<()> {
        if let Some((last, _)) = self.frames.back() {
            if frame_index <= *last {
                return Err(Error::InvalidInput(format!(
                    "frame index {frame_index} does not follow {last}"
                )));
            }
        }
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back((frame_index, detections));
        Ok(())
    }

    pub fn frames(&self) -> impl DoubleEndedIterator<Item = &(u64, Vec<Detection>)> {
        self.frames.iter()
    }

    pub fn last_index(&self) -> Option<u64> {
        self.frames.back().map(|(i, _)| *i)
    }

    /// All buffered detections, oldest frame first.
    pub fn detections(&self) -> Vec<Detection> {
        self.frames
            .iter()
            .flat_map(|(_, d)| d.iter().cloned())
            .collect()
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }
}

/// True iff the newest `n` buffered frames have consecutive indices and each
/// holds a detection with confidence at least `conf_threshold`.
pub fn gate_consecutive(buffer: &FrameBuffer, n: usize, conf_threshold: f64) -> bool {
    if n == 0 || buffer.len() < n {
        return false;
    }
    let recent: Vec<&(u64, Vec<Detection>)> = buffer.frames.iter().skip(buffer.len() - n).collect();
    let consecutive = recent.windows(2).all(|w| w[1].0 == w[0].0 + 1);
    consecutive
        && recent
            .iter()
            .all(|(_, dets)| dets.iter().any(|d| d.confidence >= conf_threshold))
}

/// Cluster of same-label detections merged by confidence-weighted averaging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedDetection {
    pub label: String,
    pub bbox: BoundingBox,
    /// Maximum member confidence.
    pub confidence: f64,
    pub votes: usize,
    pub frames: Vec<u64>,
    /// Member boxes and weights, in join order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<(BoundingBox, f64)>,
}

/// Weighted mean of boxes: `sum(w_i * b_i) / sum(w_i)` per coordinate.
/// Falls back to the plain mean when every weight is zero.
pub fn weighted_box(members: &[(BoundingBox, f64)]) -> BoundingBox {
    let mut sums = [0.0f64; 4];
    let mut total = 0.0f64;
    for (b, w) in members {
        let c = b.to_array();
        for k in 0..4 {
            sums[k] += w * c[k];
        }
        total += w;
    }
    if total <= 0.0 {
        let n = members.len().max(1) as f64;
        let mut plain = [0.0f64; 4];
        for (b, _) in members {
            let c = b.to_array();
            for k in 0..4 {
                plain[k] += c[k];
            }
        }
        return BoundingBox {
            x_min: plain[0] / n,
            y_min: plain[1] / n,
            x_max: plain[2] / n,
            y_max: plain[3] / n,
        };
    }
    BoundingBox {
        x_min: sums[0] / total,
        y_min: sums[1] / total,
        x_max: sums[2] / total,
        y_max: sums[3] / total,
    }
}

/// Detections in descending confidence; equal confidences keep input order.
pub fn confidence_order(detections: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .confidence
            .total_cmp(&detections[a].confidence)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy confidence-ordered clustering with confidence-weighted box
/// averaging.
///
/// Each detection, strongest first, joins the earliest-created cluster with
/// the same label whose current fused box has IoU above `iou_threshold` with
/// it; otherwise it starts a new cluster. Clusters with fewer than
/// `min_votes` members are dropped. Output is in cluster creation order.
pub fn fuse(detections: &[Detection], iou_threshold: f64, min_votes: usize) -> Vec<FusedDetection> {
    struct Cluster {
        label: String,
        members: Vec<(BoundingBox, f64)>,
        frames: Vec<u64>,
        confidence: f64,
        current: BoundingBox,
    }
    let mut clusters: Vec<Cluster> = Vec::new();
    for i in confidence_order(detections) {
        let d = &detections[i];
        let target = clusters
            .iter_mut()
            .find(|c| c.label == d.label && c.current.iou(&d.bbox) > iou_threshold);
        match target {
            Some(c) => {
                c.members.push((d.bbox, d.confidence));
                c.frames.push(d.frame_index);
                c.confidence = c.confidence.max(d.confidence);
                c.current = weighted_box(&c.members);
            }
            None => clusters.push(Cluster {
                label: d.label.clone(),
                members: vec![(d.bbox, d.confidence)],
                frames: vec![d.frame_index],
                confidence: d.confidence,
                current: d.bbox,
            }),
        }
    }
    clusters
        .into_iter()
        .filter(|c| c.members.len() >= min_votes.max(1))
        .map(|c| {
            let mut frames = c.frames;
            frames.sort_unstable();
            frames.dedup();
            FusedDetection {
                label: c.label,
                bbox: c.current,
                confidence: c.confidence,
                votes: c.members.len(),
                frames,
                members: c.members,
            }
        })
        .collect()
}

/// Order used by [`dedup`]: confidence descending, then votes descending,
/// then input position.
pub fn dedup_order(fused: &[FusedDetection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..fused.len()).collect();
    order.sort_by(|&a, &b| {
        fused[b]
            .confidence
            .total_cmp(&fused[a].confidence)
            .then(fused[b].votes.cmp(&fused[a].votes))
            .then(a.cmp(&b))
    });
    order
}

/// Suppresses same-label duplicates: walking in [`dedup_order`], a detection
/// survives unless a kept detection of its label overlaps it with IoU above
/// `iou_threshold`.
pub fn dedup(fused: &[FusedDetection], iou_threshold: f64) -> Vec<FusedDetection> {
    let mut kept: Vec<&FusedDetection> = Vec::new();
    for i in dedup_order(fused) {
        let f = &fused[i];
        if kept
            .iter()
            .all(|k| k.label != f.label || k.bbox.iou(&f.bbox) <= iou_threshold)
        {
            kept.push(f);
        }
    }
    kept.into_iter().cloned().collect()
}

/// Relative depth raster; smaller values are closer to the camera.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: u32,
    height: u32,
    values: Vec<f32>,
}

const DEPTH_MAGIC: &[u8; 4] = b"DPTH";

impl DepthMap {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Depth("dimensions must be positive".into()));
        }
        if values.len() != width as usize * height as usize {
            return Err(Error::Depth(format!(
                "{} values for a {width}x{height} map",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Depth(format!("non-finite value at index {i}")));
        }
        Ok(DepthMap {
            width,
            height,
            values,
        })
    }

    pub fn constant(width: u32, height: u32, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width as usize * height as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    /// Sets every pixel covered by `bbox` to `value`.
    pub fn fill_box(&mut self, bbox: &BoundingBox, value: f32) {
        if let Some((x0, y0, x1, y1)) = bbox.pixel_range(self.width, self.height) {
            for y in y0..y1 {
                let row = y as usize * self.width as usize;
                self.values[row + x0 as usize..row + x1 as usize].fill(value);
            }
        }
    }

    /// `DPTH`, little-endian u32 width and height, then row-major
    /// little-endian f32 values.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.values.len() * 4);
        out.extend_from_slice(DEPTH_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Depth("truncated header".into()))?;
        if &magic != DEPTH_MAGIC {
            return Err(Error::Depth("bad magic, expected DPTH".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)
            .map_err(|_| Error::Depth("truncated header".into()))?;
        let width = u32::from_le_bytes(word);
        r.read_exact(&mut word)
            .map_err(|_| Error::Depth("truncated header".into()))?;
        let height = u32::from_le_bytes(word);
        let n = width as usize * height as usize;
        if r.len() != n * 4 {
            return Err(Error::Depth(format!(
                "payload holds {} bytes, expected {}",
                r.len(),
                n * 4
            )));
        }
        let values = r
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        Self::new(width, height, values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }
}

/// Median depth over the pixels covered by `bbox` after clipping to the map.
/// Even counts average the two middle values.
pub fn box_depth(depth: &DepthMap, bbox: &BoundingBox) -> Result<f64> {
    let (x0, y0, x1, y1) = bbox.pixel_range(depth.width, depth.height).ok_or_else(|| {
        Error::Depth(format!(
            "box {:?} does not intersect the {}x{} depth map",
            bbox.to_array(),
            depth.width,
            depth.height
        ))
    })?;
    let mut vals: Vec<f32> = Vec::with_capacity(((x1 - x0) * (y1 - y0)) as usize);
    for y in y0..y1 {
        let row = y as usize * depth.width as usize;
        vals.extend_from_slice(&depth.values[row + x0 as usize..row + x1 as usize]);
    }
    let n = vals.len();
    let mid = n / 2;
    let (_, upper, _) = vals.select_nth_unstable_by(mid, f32::total_cmp);
    let upper = *upper as f64;
    if n % 2 == 1 {
        return Ok(upper);
    }
    let lower = vals[..mid]
        .iter()
        .copied()
        .max_by(f32::total_cmp)
        .expect("even count >= 2") as f64;
    Ok((lower + upper) / 2.0)
}

/// Selected object: label, box and depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedObject {
    pub label: String,
    pub bbox: BoundingBox,
    pub depth: f64,
    pub confidence: f64,
    pub votes: usize,
}

fn rank_cmp(a: &RankedObject, b: &RankedObject) -> Ordering {
    a.depth
        .total_cmp(&b.depth)
        .then(b.confidence.total_cmp(&a.confidence))
        .then_with(|| a.label.cmp(&b.label))
}

/// Nearest `k` objects: ascending depth, ties by higher confidence then label.
pub fn rank_topk(fused: &[FusedDetection], depth: &DepthMap, k: usize) -> Result<Vec<RankedObject>> {
    let mut ranked = fused
        .iter()
        .map(|f| {
            Ok(RankedObject {
                label: f.label.clone(),
                bbox: f.bbox,
                depth: box_depth(depth, &f.bbox)?,
                confidence: f.confidence,
                votes: f.votes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(rank_cmp);
    ranked.truncate(k);
    Ok(ranked)
}
