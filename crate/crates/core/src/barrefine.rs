//! Background-agnostic refinement: turn confident detections into a
//! pseudo-labeled set where each kept box sits on a plain canvas at its
//! original position.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detorch::{write_jsonl, Detection, DetectionRecord};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fsutil;
use crate::geometry::{Channels, PixelImage};
use crate::labels::{format_class_list, format_labels, LabelLine};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinementConfig {
    pub threshold: f64,
    pub canvas: [u8; 3],
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            threshold: 0.5,
            canvas: [255, 255, 255],
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "refinement threshold {} outside [0,1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Refines one image. Returns `None` when no detection qualifies.
/// Boxes are clipped to the image; the canvas is RGB.
pub fn refine_image(
    source: &PixelImage,
    detections: &[Detection],
    config: &RefinementConfig,
) -> Option<(PixelImage, Vec<Detection>)> {
    let (w, h) = (source.width(), source.height());
    let mut kept: Vec<(usize, Detection)> = detections
        .iter()
        .filter(|d| d.confidence >= config.threshold)
        .filter_map(|d| {
            let bbox = d.bbox.clip(w as f64, h as f64);
            (bbox.area() > 0.0).then(|| Detection { bbox, ..d.clone() })
        })
        .enumerate()
        .collect();
    if kept.is_empty() {
        return None;
    }
    let src = source.to_rgb();
    let mut canvas = PixelImage::filled(w, h, Channels::Rgb, &config.canvas).expect("dims");
    let labels: Vec<Detection> = kept.iter().map(|(_, d)| d.clone()).collect();
    kept.sort_by(|a, b| a.1.confidence.total_cmp(&b.1.confidence).then(a.0.cmp(&b.0)));
    for (_, d) in &kept {
        let Some((x0, y0, x1, y1)) = d.bbox.pixel_range(w, h) else {
            continue;
        };
        let (a, b) = (x0 as usize * 3, x1 as usize * 3);
        let stride = w as usize * 3;
        for y in y0..y1 {
            let row = y as usize * stride;
            canvas.data_mut()[row + a..row + b].copy_from_slice(&src.data()[row + a..row + b]);
        }
    }
    Some((canvas, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineManifest {
    pub config: RefinementConfig,
    pub classes: Vec<String>,
    pub images_in: usize,
    pub images_out: usize,
    pub skipped: usize,
    pub skipped_ids: Vec<String>,
    pub detections_in: usize,
    pub pseudo_labels: usize,
}

/// Refines every image in `images_dir` using `records` keyed by file stem.
///
/// Writes `images/<id>.png`, `labels/<id>.txt`, `classes.txt`,
/// `pseudo_labels.jsonl` (exact boxes) and `refine_manifest.json` under
/// `out_dir`. Class indices follow `classes` when given, otherwise the
/// sorted set of detection labels.
pub fn refine_dataset(
    images_dir: &Path,
    records: &[DetectionRecord],
    classes: Option<&[String]>,
    config: &RefinementConfig,
    out_dir: &Path,
    exec: Exec,
) -> Result<RefineManifest> {
    config.validate()?;
    let images = fsutil::list_images(images_dir)?;
    if images.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no images under {}",
            images_dir.display()
        )));
    }
    let ids: Vec<String> = images.iter().map(|p| fsutil::file_stem(p)).collect();
    let known: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let unknown: BTreeSet<&str> = records
        .iter()
        .map(|r| r.image_id.as_str())
        .filter(|id| !known.contains(id))
        .collect();
    if !unknown.is_empty() {
        let sample: Vec<&str> = unknown.iter().take(5).copied().collect();
        return Err(Error::InvalidInput(format!(
            "{} detection image ids have no image in {} (e.g. {})",
            unknown.len(),
            images_dir.display(),
            sample.join(", ")
        )));
    }
    let classes: Vec<String> = match classes {
        Some(c) => c.to_vec(),
        None => records
            .iter()
            .map(|r| r.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    if let Some(r) = records.iter().find(|r| !classes.contains(&r.label)) {
        return Err(Error::InvalidInput(format!(
            "detection label `{}` not in the class list",
            r.label
        )));
    }
    let mut by_image: BTreeMap<&str, Vec<Detection>> = BTreeMap::new();
    for r in records {
        by_image.entry(&r.image_id).or_default().push(r.detection());
    }

    let img_out = out_dir.join("images");
    let lbl_out = out_dir.join("labels");
    fsutil::create_dir_all(&img_out)?;
    fsutil::create_dir_all(&lbl_out)?;

    let empty = Vec::new();
    let results = exec.try_map_range(images.len(), |i| {
        let dets = by_image.get(ids[i].as_str()).unwrap_or(&empty);
        if !dets.iter().any(|d| d.confidence >= config.threshold) {
            return Ok(None);
        }
        let source = PixelImage::load(&images[i])?;
        let Some((canvas, labels)) = refine_image(&source, dets, config) else {
            return Ok(None);
        };
        canvas.save_png(&img_out.join(format!("{}.png", ids[i])))?;
        let lines: Vec<LabelLine> = labels
            .iter()
            .map(|d| {
                let idx = classes.iter().position(|c| *c == d.label).expect("checked");
                LabelLine::from_box(idx, &d.bbox, canvas.width(), canvas.height())
            })
            .collect();
        fsutil::write(&lbl_out.join(format!("{}.txt", ids[i])), format_labels(&lines))?;
        Ok::<_, Error>(Some(labels))
    })?;

    let mut pseudo = Vec::new();
    let mut skipped_ids = Vec::new();
    for (id, r) in ids.iter().zip(&results) {
        match r {
            Some(labels) => pseudo.extend(labels.iter().map(|d| DetectionRecord::new(id, d))),
            None => skipped_ids.push(id.clone()),
        }
    }
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &pseudo).map_err(|e| Error::io(out_dir, e))?;
    fsutil::write(&out_dir.join("pseudo_labels.jsonl"), buf)?;
    fsutil::write(&out_dir.join("classes.txt"), format_class_list(&classes))?;
    let manifest = RefineManifest {
        config: *config,
        classes,
        images_in: images.len(),
        images_out: images.len() - skipped_ids.len(),
        skipped: skipped_ids.len(),
        skipped_ids,
        detections_in: records.len(),
        pseudo_labels: pseudo.len(),
    };
    fsutil::write_json(&out_dir.join("refine_manifest.json"), &manifest)?;
    Ok(manifest)
}
