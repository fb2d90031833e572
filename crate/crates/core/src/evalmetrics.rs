//! Detection metrics: greedy one-to-one matching, 101-point interpolated AP,
//! mAP at 0.5 and averaged over 0.5:0.05:0.95, and precision/recall at a
//! fixed confidence operating point, optionally grouped by corruption tag.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corruptions::split_tag;
use crate::detorch::{read_jsonl, Detection};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fsutil;
use crate::geometry::BoundingBox;
use crate::labels::{read_class_list, read_labels};

pub const DEFAULT_CONFIDENCE: f64 = 0.4;
pub const OPERATING_IOU: f64 = 0.5;
const RECALL_POINTS: usize = 101;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub label: String,
    pub bbox: BoundingBox,
}

/// Indices of `predictions` in matching order: confidence descending,
/// input order on ties.
pub fn matching_order(predictions: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions[b]
            .confidence
            .total_cmp(&predictions[a].confidence)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy one-to-one matching for one image. Returns, per prediction in
/// input order, the index of the matched ground truth. Each prediction in
/// confidence order takes the unmatched same-label ground truth with the
/// highest IoU at or above `iou_threshold`, lowest index on ties.
pub fn match_detections(
    predictions: &[Detection],
    truths: &[GroundTruth],
    iou_threshold: f64,
) -> Vec<Option<usize>> {
    let mut taken = vec![false; truths.len()];
    let mut out = vec![None; predictions.len()];
    for i in matching_order(predictions) {
        let p = &predictions[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, t) in truths.iter().enumerate() {
            if taken[g] || t.label != p.label {
                continue;
            }
            let v = p.bbox.iou(&t.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[i] = Some(g);
        }
    }
    out
}

/// 101-point interpolated AP over `flags` already sorted by descending
/// confidence. Zero when `total_gt` is zero.
pub fn average_precision(flags: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 || flags.is_empty() {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / total_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < recall.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

/// One image's predictions and ground truth.
#[derive(Debug, Clone, Default)]
pub struct ImageEval {
    pub id: String,
    pub truths: Vec<GroundTruth>,
    pub predictions: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub gt_count: usize,
    pub prediction_count: usize,
    /// AP per IoU threshold, aligned with [`iou_thresholds`].
    pub ap: Vec<f64>,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub images: usize,
    pub mp: f64,
    pub mr: f64,
    pub map50: f64,
    pub map50_95: f64,
    pub classes: Vec<ClassMetrics>,
    /// Classes with predictions but no ground truth; excluded from means.
    pub excluded_classes: Vec<String>,
}

struct ImageMatch {
    /// Per threshold, per prediction: matched or not.
    flags: Vec<Vec<bool>>,
    /// Per prediction: kept at the operating point and matched there.
    operating: Vec<bool>,
}

fn match_image(img: &ImageEval, thresholds: &[f64], conf: f64) -> ImageMatch {
    let flags = thresholds
        .iter()
        .map(|&t| {
            match_detections(&img.predictions, &img.truths, t)
                .into_iter()
                .map(|m| m.is_some())
                .collect()
        })
        .collect();
    let kept: Vec<usize> = (0..img.predictions.len())
        .filter(|&i| img.predictions[i].confidence >= conf)
        .collect();
    let kept_dets: Vec<Detection> = kept.iter().map(|&i| img.predictions[i].clone()).collect();
    let mut operating = vec![false; img.predictions.len()];
    for (k, m) in match_detections(&kept_dets, &img.truths, OPERATING_IOU)
        .into_iter()
        .enumerate()
    {
        operating[kept[k]] = m.is_some();
    }
    ImageMatch { flags, operating }
}

/// Evaluates a set of images. `classes` fixes the report order; labels not
/// listed are appended in sorted order.
pub fn evaluate_images(
    images: &[ImageEval],
    classes: &[String],
    confidence_threshold: f64,
    exec: Exec,
) -> MetricSummary {
    let thresholds = iou_thresholds();
    let matches = exec.map(images, |img| match_image(img, &thresholds, confidence_threshold));

    let mut order: Vec<String> = classes.to_vec();
    let mut extra: Vec<String> = images
        .iter()
        .flat_map(|i| {
            i.truths
                .iter()
                .map(|t| t.label.clone())
                .chain(i.predictions.iter().map(|p| p.label.clone()))
        })
        .filter(|l| !classes.contains(l))
        .collect();
    extra.sort();
    extra.dedup();
    order.extend(extra);

    struct Acc {
        gt: usize,
        scored: Vec<(f64, usize, usize, Vec<bool>)>,
        kept: usize,
        kept_tp: usize,
    }
    let mut acc: HashMap<&str, Acc> = order
        .iter()
        .map(|c| {
            (
                c.as_str(),
                Acc {
                    gt: 0,
                    scored: Vec::new(),
                    kept: 0,
                    kept_tp: 0,
                },
            )
        })
        .collect();
    for (ii, (img, m)) in images.iter().zip(&matches).enumerate() {
        for t in &img.truths {
            acc.get_mut(t.label.as_str()).expect("class").gt += 1;
        }
        for (pi, p) in img.predictions.iter().enumerate() {
            let a = acc.get_mut(p.label.as_str()).expect("class");
            let per_t = m.flags.iter().map(|f| f[pi]).collect();
            a.scored.push((p.confidence, ii, pi, per_t));
            if p.confidence >= confidence_threshold {
                a.kept += 1;
            }
            if m.operating[pi] {
                a.kept_tp += 1;
            }
        }
    }

    let mut class_metrics = Vec::new();
    let mut excluded = Vec::new();
    for label in &order {
        let a = acc.get_mut(label.as_str()).expect("class");
        if a.gt == 0 {
            if !a.scored.is_empty() {
                excluded.push(label.clone());
            }
            continue;
        }
        a.scored.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
        let ap = (0..thresholds.len())
            .map(|t| {
                let flags: Vec<bool> = a.scored.iter().map(|s| s.3[t]).collect();
                average_precision(&flags, a.gt)
            })
            .collect();
        class_metrics.push(ClassMetrics {
            label: label.clone(),
            gt_count: a.gt,
            prediction_count: a.scored.len(),
            ap,
            precision: if a.kept == 0 { 0.0 } else { a.kept_tp as f64 / a.kept as f64 },
            recall: a.kept_tp as f64 / a.gt as f64,
        });
    }
    let n = class_metrics.len();
    let mean = |f: &dyn Fn(&ClassMetrics) -> f64| {
        if n == 0 {
            0.0
        } else {
            class_metrics.iter().map(f).sum::<f64>() / n as f64
        }
    };
    MetricSummary {
        images: images.len(),
        mp: mean(&|c| c.precision),
        mr: mean(&|c| c.recall),
        map50: mean(&|c| c.ap[0]),
        map50_95: mean(&|c| c.ap.iter().sum::<f64>() / c.ap.len() as f64),
        classes: class_metrics,
        excluded_classes: excluded,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub confidence_threshold: f64,
    pub operating_iou: f64,
    pub iou_thresholds: Vec<f64>,
    pub overall: MetricSummary,
    /// Keyed by corruption tag; empty when no image carries a tag.
    pub groups: BTreeMap<String, MetricSummary>,
    /// Prediction records whose image id has no label file.
    pub unknown_prediction_records: usize,
    pub unknown_prediction_images: Vec<String>,
    /// Labeled images that received no prediction record.
    pub images_without_predictions: usize,
}

/// Groups images by corruption tag and evaluates each group plus the whole.
pub fn evaluate_grouped(
    images: &[ImageEval],
    classes: &[String],
    confidence_threshold: f64,
    exec: Exec,
) -> (MetricSummary, BTreeMap<String, MetricSummary>) {
    let overall = evaluate_images(images, classes, confidence_threshold, exec);
    let mut groups = BTreeMap::new();
    if images.iter().any(|i| split_tag(&i.id).0 != i.id) {
        let mut by_tag: BTreeMap<String, Vec<ImageEval>> = BTreeMap::new();
        for img in images {
            by_tag
                .entry(split_tag(&img.id).1.to_owned())
                .or_default()
                .push(img.clone());
        }
        for (tag, imgs) in by_tag {
            groups.insert(tag, evaluate_images(&imgs, classes, confidence_threshold, exec));
        }
    }
    (overall, groups)
}

/// Where a labeled split lives: `root/images`, `root/labels`, and an
/// optional `root/classes.txt`.
#[derive(Debug, Clone)]
pub struct DatasetLayout {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub classes: Option<PathBuf>,
}

impl DatasetLayout {
    /// Accepts a split root or its `labels` directory.
    pub fn locate(dir: &Path) -> Result<Self> {
        let root = if dir.join("labels").is_dir() {
            dir.to_path_buf()
        } else if dir.file_name().is_some_and(|n| n == "labels") {
            dir.parent().unwrap_or(Path::new(".")).to_path_buf()
        } else {
            return Err(Error::InvalidInput(format!(
                "{}: expected a directory containing labels/ and images/",
                dir.display()
            )));
        };
        let images = root.join("images");
        if !images.is_dir() {
            return Err(Error::InvalidInput(format!(
                "{}: missing images/ next to labels/",
                root.display()
            )));
        }
        let classes = [root.join("classes.txt"), root.join("labels").join("classes.txt")]
            .into_iter()
            .find(|p| p.is_file());
        Ok(DatasetLayout {
            images,
            labels: root.join("labels"),
            classes,
        })
    }
}

/// Loads every labeled image of a split with its ground truth in pixels.
pub fn load_ground_truth(layout: &DatasetLayout, classes: &[String]) -> Result<Vec<ImageEval>> {
    let mut out = Vec::new();
    for image in fsutil::list_images(&layout.images)? {
        let id = fsutil::file_stem(&image);
        let label_path = layout.labels.join(format!("{id}.txt"));
        if !label_path.is_file() {
            continue;
        }
        let (w, h) = image::image_dimensions(&image).map_err(|e| Error::Image {
            path: image.clone(),
            source: e,
        })?;
        let truths = read_labels(&label_path)?
            .iter()
            .map(|l| {
                let label = classes.get(l.class_index).cloned().ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "{}: class index {} outside the {}-entry class list",
                        label_path.display(),
                        l.class_index,
                        classes.len()
                    ))
                })?;
                Ok(GroundTruth {
                    label,
                    bbox: l.to_box(w, h)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ImageEval {
            id,
            truths,
            predictions: Vec::new(),
        });
    }
    if out.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no labeled images under {}",
            layout.images.display()
        )));
    }
    Ok(out)
}

/// Full file-level evaluation. Prediction records for unknown images are
/// counted and dropped; labeled images without records count as images
/// with no detections.
pub fn evaluate(
    predictions: &Path,
    labels_dir: &Path,
    classes: Option<&[String]>,
    confidence_threshold: f64,
    exec: Exec,
) -> Result<MetricReport> {
    if !(0.0..=1.0).contains(&confidence_threshold) {
        return Err(Error::Config(format!(
            "confidence threshold {confidence_threshold} outside [0,1]"
        )));
    }
    let layout = DatasetLayout::locate(labels_dir)?;
    let classes: Vec<String> = match (classes, &layout.classes) {
        (Some(c), _) => c.to_vec(),
        (None, Some(p)) => read_class_list(p)?,
        (None, None) => {
            return Err(Error::InvalidInput(format!(
                "{}: no classes.txt; pass the class list explicitly",
                labels_dir.display()
            )))
        }
    };
    let mut images = load_ground_truth(&layout, &classes)?;
    let index: HashMap<String, usize> =
        images.iter().enumerate().map(|(i, e)| (e.id.clone(), i)).collect();
    let mut unknown = BTreeMap::<String, usize>::new();
    for r in read_jsonl(predictions)? {
        match index.get(&r.image_id) {
            Some(&i) => images[i].predictions.push(r.detection()),
            None => *unknown.entry(r.image_id).or_default() += 1,
        }
    }
    let without = images.iter().filter(|i| i.predictions.is_empty()).count();
    let (overall, groups) = evaluate_grouped(&images, &classes, confidence_threshold, exec);
    Ok(MetricReport {
        confidence_threshold,
        operating_iou: OPERATING_IOU,
        iou_thresholds: iou_thresholds(),
        overall,
        groups,
        unknown_prediction_records: unknown.values().sum(),
        unknown_prediction_images: unknown.into_keys().collect(),
        images_without_predictions: without,
    })
}

impl MetricReport {
    /// Plain-text table: one row for the whole set, then one per group.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "confidence threshold {:.2}, operating IoU {:.2}",
            self.confidence_threshold, self.operating_iou
        );
        let _ = writeln!(
            s,
            "{:<20} {:>7} {:>7} {:>7} {:>9} {:>14}",
            "set", "images", "mP", "mR", "mAP@0.5", "mAP@0.5:0.95"
        );
        let mut row = |name: &str, m: &MetricSummary| {
            let _ = writeln!(
                s,
                "{:<20} {:>7} {:>7.3} {:>7.3} {:>9.3} {:>14.3}",
                name, m.images, m.mp, m.mr, m.map50, m.map50_95
            );
        };
        row("all", &self.overall);
        for (k, v) in &self.groups {
            row(k, v);
        }
        s
    }
}
