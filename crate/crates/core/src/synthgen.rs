//! Copy-paste dataset factory: sample constrained layouts of object masks,
//! composite them onto backgrounds and write annotated splits.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fsutil;
use crate::geometry::{affine_transform, paste_in_place, BoundingBox, InstanceMask, PixelImage};
use crate::labels::{format_class_list, format_labels, LabelLine};
use crate::seed::{derive_seed, rng_for};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompositionConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub per_category_cap: usize,
    pub max_pair_iou: f64,
    /// Uniform scale range `[lo, hi]`.
    pub scale_range: [f64; 2],
    /// Uniform rotation range in degrees, `[lo, hi)`.
    pub rotation_range: [f64; 2],
    pub max_placement_attempts: usize,
    pub output_width: u32,
    pub output_height: u32,
    /// Padding color used when letterboxing backgrounds.
    pub letterbox_fill: [u8; 3],
    /// Explicit class order; defaults to the sorted mask categories.
    pub classes: Option<Vec<String>>,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        CompositionConfig {
            k_min: 3,
            k_max: 5,
            per_category_cap: 2,
            max_pair_iou: 0.5,
            scale_range: [0.5, 1.5],
            rotation_range: [0.0, 360.0],
            max_placement_attempts: 50,
            output_width: 1280,
            output_height: 720,
            letterbox_fill: [114, 114, 114],
            classes: None,
        }
    }
}

impl CompositionConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.k_min < 1 || self.k_min > self.k_max {
            return fail(format!("need 1 <= k_min <= k_max, got {}..{}", self.k_min, self.k_max));
        }
        if !(0.0..=1.0).contains(&self.max_pair_iou) {
            return fail(format!("max_pair_iou {} outside [0,1]", self.max_pair_iou));
        }
        if self.per_category_cap < 1 {
            return fail("per_category_cap must be >= 1".into());
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return fail(format!("scale range [{lo}, {hi}] must be positive and ordered"));
        }
        let [rlo, rhi] = self.rotation_range;
        if !(rlo.is_finite() && rhi.is_finite() && rhi >= rlo) {
            return fail(format!("rotation range [{rlo}, {rhi}] must be finite and ordered"));
        }
        if self.max_placement_attempts < 1 {
            return fail("max_placement_attempts must be >= 1".into());
        }
        if self.output_width == 0 || self.output_height == 0 {
            return fail("output size must be positive".into());
        }
        Ok(())
    }
}

/// Masks grouped by class index.
#[derive(Debug, Clone)]
pub struct MaskLibrary {
    classes: Vec<String>,
    masks: Vec<Vec<InstanceMask>>,
}

impl MaskLibrary {
    /// Groups masks under `classes`. Every class needs at least one mask and
    /// every mask's category must be listed.
    pub fn new(classes: Vec<String>, masks: Vec<InstanceMask>) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::Config("mask library is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &classes {
            if !seen.insert(c) {
                return Err(Error::Config(format!("duplicate class `{c}`")));
            }
        }
        let mut grouped = vec![Vec::new(); classes.len()];
        for m in masks {
            let idx = classes
                .iter()
                .position(|c| *c == m.category)
                .ok_or_else(|| {
                    Error::Config(format!("mask category `{}` not in class list", m.category))
                })?;
            grouped[idx].push(m);
        }
        if let Some(i) = grouped.iter().position(Vec::is_empty) {
            return Err(Error::Config(format!("class `{}` has no masks", classes[i])));
        }
        Ok(MaskLibrary {
            classes,
            masks: grouped,
        })
    }

    /// Class list = sorted unique mask categories.
    pub fn from_masks(masks: Vec<InstanceMask>) -> Result<Self> {
        let mut classes: Vec<String> = masks.iter().map(|m| m.category.clone()).collect();
        classes.sort();
        classes.dedup();
        Self::new(classes, masks)
    }

    /// Loads every `*.png` with a JSON sidecar below `dir`.
    pub fn load_dir(dir: &Path, classes: Option<Vec<String>>) -> Result<Self> {
        let mut masks = Vec::new();
        for png in fsutil::list_recursive(dir, "png")? {
            if crate::geometry::sidecar_path(&png).is_file() {
                masks.push(InstanceMask::load(&png)?);
            }
        }
        match classes {
            Some(c) => Self::new(c, masks),
            None => Self::from_masks(masks),
        }
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn masks(&self, class_index: usize) -> &[InstanceMask] {
        &self.masks[class_index]
    }
}

/// One instance of a sampled layout. `mask` is already transformed.
#[derive(Debug, Clone)]
pub struct Placement {
    pub category_index: usize,
    pub mask_index: usize,
    pub scale: f64,
    pub rotation: f64,
    pub x: i64,
    pub y: i64,
    pub mask: InstanceMask,
}

impl Placement {
    pub fn bbox(&self) -> BoundingBox {
        BoundingBox {
            x_min: self.x as f64,
            y_min: self.y as f64,
            x_max: (self.x + self.mask.width() as i64) as f64,
            y_max: (self.y + self.mask.height() as i64) as f64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub requested_k: usize,
    pub placements: Vec<Placement>,
    /// Instances given up after exhausting placement attempts.
    pub dropped: usize,
}

/// Samples a layout for a `width x height` canvas.
///
/// `k` is uniform in `[k_min, k_max]`; each instance's class is uniform over
/// the classes still below the per-category cap. Positions are uniform over
/// the offsets that keep the transformed mask inside the canvas. A position
/// whose box IoU with any placed box reaches `max_pair_iou` is rejected; after
/// `max_placement_attempts` rejections the instance is dropped.
pub fn sample_layout<R: Rng + ?Sized>(
    config: &CompositionConfig,
    library: &MaskLibrary,
    width: u32,
    height: u32,
    rng: &mut R,
) -> Result<Layout> {
    config.validate()?;
    let requested_k = rng.random_range(config.k_min..=config.k_max);
    let mut counts = vec![0usize; library.classes.len()];
    let mut placements: Vec<Placement> = Vec::with_capacity(requested_k);
    let mut dropped = 0;

    for _ in 0..requested_k {
        let available: Vec<usize> = (0..counts.len())
            .filter(|&c| counts[c] < config.per_category_cap)
            .collect();
        if available.is_empty() {
            break;
        }
        let category = available[rng.random_range(0..available.len())];
        let mask_index = rng.random_range(0..library.masks[category].len());
        let source = &library.masks[category][mask_index];

        let mut transformed: Option<(f64, f64, InstanceMask)> = None;
        let mut placed = None;
        for _ in 0..config.max_placement_attempts {
            if transformed.is_none() {
                let scale = sample_in(rng, config.scale_range, true);
                let rotation = sample_in(rng, config.rotation_range, false);
                match affine_transform(source, scale, rotation) {
                    Ok(m) if m.width() <= width && m.height() <= height => {
                        transformed = Some((scale, rotation, m));
                    }
                    Ok(_) | Err(Error::DegenerateMask(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            let (_, _, m) = transformed.as_ref().expect("set above");
            let x = rng.random_range(0..=(width - m.width())) as i64;
            let y = rng.random_range(0..=(height - m.height())) as i64;
            let candidate = BoundingBox {
                x_min: x as f64,
                y_min: y as f64,
                x_max: (x + m.width() as i64) as f64,
                y_max: (y + m.height() as i64) as f64,
            };
            if placements
                .iter()
                .all(|p| p.bbox().iou(&candidate) < config.max_pair_iou)
            {
                placed = Some((x, y));
                break;
            }
        }
        match (placed, transformed) {
            (Some((x, y)), Some((scale, rotation, mask))) => {
                counts[category] += 1;
                placements.push(Placement {
                    category_index: category,
                    mask_index,
                    scale,
                    rotation,
                    x,
                    y,
                    mask,
                });
            }
            _ => dropped += 1,
        }
    }
    if placements.is_empty() {
        return Err(Error::Config(format!(
            "no instance could be placed on a {width}x{height} canvas; masks may be too large"
        )));
    }
    Ok(Layout {
        requested_k,
        placements,
        dropped,
    })
}

fn sample_in<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2], inclusive: bool) -> f64 {
    let [lo, hi] = range;
    if hi <= lo {
        lo
    } else if inclusive {
        rng.random_range(lo..=hi)
    } else {
        rng.random_range(lo..hi)
    }
}

/// Pastes the layout onto a copy of the background in layout order.
pub fn compose_image(
    background: &PixelImage,
    layout: &[Placement],
) -> Result<(PixelImage, Vec<(usize, BoundingBox)>)> {
    let mut canvas = background.clone();
    let mut annotations = Vec::with_capacity(layout.len());
    for p in layout {
        let b = paste_in_place(&mut canvas, &p.mask, p.x, p.y)?;
        annotations.push((p.category_index, b));
    }
    Ok((canvas, annotations))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub category_index: usize,
    pub category: String,
    pub bbox: BoundingBox,
    pub mask_source: String,
    pub scale: f64,
    pub rotation: f64,
}

/// Annotation and provenance of one generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: String,
    pub label: String,
    pub background: String,
    pub seed: u64,
    pub requested_k: usize,
    pub dropped: usize,
    pub instances: Vec<InstanceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub split: String,
    pub classes: Vec<String>,
    pub image_count: usize,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub config: CompositionConfig,
    pub backgrounds: Vec<String>,
    pub dropped_instances: usize,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        if !self.classes.iter().all(|c| seen.insert(c)) {
            return Err(Error::InvalidInput("manifest class list has duplicates".into()));
        }
        if self.records.len() != self.image_count {
            return Err(Error::InvalidInput(format!(
                "manifest lists {} records for {} images",
                self.records.len(),
                self.image_count
            )));
        }
        Ok(())
    }
}

/// Request for [`generate_dataset`].
#[derive(Debug, Clone)]
pub struct GenerateRequest {
    pub background_dir: PathBuf,
    pub mask_dir: PathBuf,
    pub config: CompositionConfig,
    pub count: usize,
    pub split: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub exec: Exec,
}

/// In-memory inputs for [`generate_into`].
pub struct Sources {
    pub backgrounds: Vec<(String, PixelImage)>,
    pub library: MaskLibrary,
}

/// Reads inputs from disk and writes `count` images, label files,
/// `classes.txt` and `manifest.json` below `out_dir`.
pub fn generate_dataset(req: &GenerateRequest) -> Result<DatasetManifest> {
    req.config.validate()?;
    let bg_paths = fsutil::list_images(&req.background_dir)?;
    if bg_paths.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no background images in {}",
            req.background_dir.display()
        )));
    }
    let backgrounds = bg_paths
        .iter()
        .map(|p| Ok((fsutil::file_stem(p), PixelImage::load(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let library = MaskLibrary::load_dir(&req.mask_dir, req.config.classes.clone())?;
    generate_into(
        &Sources {
            backgrounds,
            library,
        },
        &req.config,
        req.count,
        &req.split,
        req.seed,
        &req.out_dir,
        req.exec,
    )
}

pub fn generate_into(
    sources: &Sources,
    config: &CompositionConfig,
    count: usize,
    split: &str,
    seed: u64,
    out_dir: &Path,
    exec: Exec,
) -> Result<DatasetManifest> {
    config.validate()?;
    if sources.backgrounds.is_empty() {
        return Err(Error::InvalidInput("no backgrounds".into()));
    }
    let (w, h) = (config.output_width, config.output_height);
    let sized = exec.try_map_range(sources.backgrounds.len(), |i| {
        let (name, img) = &sources.backgrounds[i];
        Ok::<_, Error>((name.clone(), img.to_rgb().letterbox(w, h, config.letterbox_fill)?))
    })?;

    let images_dir = out_dir.join("images");
    let labels_dir = out_dir.join("labels");
    fsutil::create_dir_all(&images_dir)?;
    fsutil::create_dir_all(&labels_dir)?;

    let library = &sources.library;
    let records = exec.try_map_range(count, |index| {
        let image_seed = derive_seed(seed, index as u64);
        let mut rng = rng_for(image_seed);
        let bg_index = rng.random_range(0..sized.len());
        let (bg_name, background) = &sized[bg_index];
        let layout = sample_layout(config, library, w, h, &mut rng)?;
        let (image, annotations) = compose_image(background, &layout.placements)?;

        let stem = format!("{split}_{index:06}");
        let image_name = format!("images/{stem}.png");
        let label_name = format!("labels/{stem}.txt");
        image.save_png(&out_dir.join(&image_name))?;
        let lines: Vec<LabelLine> = annotations
            .iter()
            .map(|(c, b)| LabelLine::from_box(*c, b, w, h))
            .collect();
        fsutil::write(&out_dir.join(&label_name), format_labels(&lines))?;

        let instances = layout
            .placements
            .iter()
            .zip(&annotations)
            .map(|(p, (c, b))| InstanceRecord {
                category_index: *c,
                category: library.classes[*c].clone(),
                bbox: *b,
                mask_source: p.mask.source_id.clone(),
                scale: p.scale,
                rotation: p.rotation,
            })
            .collect();
        Ok::<_, Error>(SampleRecord {
            image: image_name,
            label: label_name,
            background: bg_name.clone(),
            seed: image_seed,
            requested_k: layout.requested_k,
            dropped: layout.dropped,
            instances,
        })
    })?;

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        split: split.to_owned(),
        classes: library.classes.clone(),
        image_count: records.len(),
        seed,
        width: w,
        height: h,
        config: config.clone(),
        backgrounds: sized.iter().map(|(n, _)| n.clone()).collect(),
        dropped_instances: records.iter().map(|r| r.dropped).sum(),
        records,
    };
    manifest.validate()?;
    fsutil::write(&out_dir.join("classes.txt"), format_class_list(&manifest.classes))?;
    fsutil::write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
