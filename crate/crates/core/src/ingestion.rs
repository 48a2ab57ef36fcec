//! COCO annotation files: parsing, normalization and canonical export, plus
//! detection dumps in the COCO results format.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataset::{Annotation, CategoryInfo, Dataset, Image};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::metrics::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawImage {
    pub id: u64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]` in pixels, top-left origin.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCategory {
    pub id: u64,
    pub name: String,
}

/// The COCO fields this toolkit reads; everything else in the file is ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDataset {
    pub images: Vec<RawImage>,
    pub annotations: Vec<RawAnnotation>,
    pub categories: Vec<RawCategory>,
}

pub fn parse_coco(path: &Path) -> Result<RawDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_coco_str(&text)
}

/// Structural validation: unique ids and no dangling references.
pub fn parse_coco_str(text: &str) -> Result<RawDataset> {
    let raw: RawDataset = serde_json::from_str(text)?;
    let mut image_ids = BTreeSet::new();
    for img in &raw.images {
        if !image_ids.insert(img.id) {
            return Err(Error::Malformed(format!("duplicate image id {}", img.id)));
        }
    }
    let mut category_ids = BTreeSet::new();
    for c in &raw.categories {
        if !category_ids.insert(c.id) {
            return Err(Error::Malformed(format!("duplicate category id {}", c.id)));
        }
    }
    let mut annotation_ids = BTreeSet::new();
    for a in &raw.annotations {
        if !annotation_ids.insert(a.id) {
            return Err(Error::Malformed(format!("duplicate annotation id {}", a.id)));
        }
        if !image_ids.contains(&a.image_id) {
            return Err(Error::DanglingImage {
                annotation_id: a.id,
                image_id: a.image_id,
            });
        }
        if !category_ids.contains(&a.category_id) {
            return Err(Error::DanglingCategory {
                annotation_id: a.id,
                category_id: a.category_id,
            });
        }
        if a.bbox.iter().any(|v| !v.is_finite()) {
            return Err(Error::Malformed(format!("non-finite bbox on annotation {}", a.id)));
        }
    }
    Ok(raw)
}

/// Clamps a pixel box to the image; `None` if nothing of positive area remains.
fn clamp_box(bbox: [f64; 4], width: f64, height: f64) -> Option<[f64; 4]> {
    let x0 = bbox[0].clamp(0.0, width);
    let y0 = bbox[1].clamp(0.0, height);
    let x1 = (bbox[0] + bbox[2]).clamp(0.0, width);
    let y1 = (bbox[1] + bbox[3]).clamp(0.0, height);
    if x1 > x0 && y1 > y0 {
        Some([x0, y0, x1 - x0, y1 - y0])
    } else {
        None
    }
}

/// Pixel `[x, y, w, h]` to normalized center format.
pub fn normalize_box(bbox: [f64; 4], width: f64, height: f64) -> Result<BoundingBox> {
    let [x, y, w, h] = bbox;
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    BoundingBox::new(
        clamp((x + w / 2.0) / width),
        clamp((y + h / 2.0) / height),
        clamp(w / width),
        clamp(h / height),
    )
}

/// Normalized center format back to pixel `[x, y, w, h]`.
pub fn denormalize_box(b: &BoundingBox, width: f64, height: f64) -> [f64; 4] {
    let w = b.w * width;
    let h = b.h * height;
    [b.cx * width - w / 2.0, b.cy * height - h / 2.0, w, h]
}

/// Dense category indices (ascending source id), normalized boxes and pixel areas.
///
/// Boxes reaching outside the image are clamped with a warning; boxes with
/// no area left are dropped, as are exact duplicates within an image.
pub fn normalize(raw: &RawDataset) -> Result<Dataset> {
    let mut cats: Vec<&RawCategory> = raw.categories.iter().collect();
    cats.sort_by_key(|c| c.id);
    let dense: HashMap<u64, usize> = cats.iter().enumerate().map(|(k, c)| (c.id, k)).collect();
    let mut images: Vec<Image> = Vec::with_capacity(raw.images.len());
    let mut slot: HashMap<u64, usize> = HashMap::new();
    for img in &raw.images {
        if img.width == 0 || img.height == 0 {
            return Err(Error::ZeroImageSize { image_id: img.id });
        }
        slot.insert(img.id, images.len());
        images.push(Image {
            id: img.id,
            width: img.width,
            height: img.height,
            annotations: Vec::new(),
        });
    }
    for a in &raw.annotations {
        let k = *slot.get(&a.image_id).ok_or(Error::DanglingImage {
            annotation_id: a.id,
            image_id: a.image_id,
        })?;
        let category = *dense.get(&a.category_id).ok_or(Error::DanglingCategory {
            annotation_id: a.id,
            category_id: a.category_id,
        })?;
        let img = &mut images[k];
        let (w, h) = (img.width as f64, img.height as f64);
        let Some(px) = clamp_box(a.bbox, w, h) else {
            warn!("annotation {} has no area inside image {}; dropped", a.id, a.image_id);
            continue;
        };
        if px != a.bbox {
            warn!("annotation {} clamped to the bounds of image {}", a.id, a.image_id);
        }
        let bbox = normalize_box(px, w, h)?;
        if img
            .annotations
            .iter()
            .any(|other| other.category == category && other.bbox == bbox)
        {
            warn!("annotation {} duplicates another box in image {}; dropped", a.id, a.image_id);
            continue;
        }
        img.annotations.push(Annotation {
            id: a.id,
            category,
            bbox,
            area: px[2] * px[3],
        });
    }
    Ok(Dataset {
        categories: cats
            .iter()
            .map(|c| CategoryInfo {
                source_id: c.id,
                name: c.name.clone(),
            })
            .collect(),
        images,
    })
}

pub fn load_coco(path: &Path) -> Result<Dataset> {
    normalize(&parse_coco(path)?)
}

fn round6(v: f64) -> f64 {
    let r = (v * 1e6).round() / 1e6;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Canonical COCO JSON: sorted keys, images and annotations in id order, floats rounded to 6 decimals.
pub fn to_coco_json(dataset: &Dataset) -> String {
    let mut images: Vec<&Image> = dataset.images.iter().collect();
    images.sort_by_key(|i| i.id);
    let mut annotations: Vec<(u64, Value)> = Vec::new();
    for img in &images {
        let (w, h) = (img.width as f64, img.height as f64);
        for a in &img.annotations {
            let px = denormalize_box(&a.bbox, w, h).map(round6);
            annotations.push((
                a.id,
                json!({
                    "id": a.id,
                    "image_id": img.id,
                    "category_id": dataset.categories[a.category].source_id,
                    "bbox": px,
                    "area": round6(px[2] * px[3]),
                }),
            ));
        }
    }
    annotations.sort_by_key(|(id, _)| *id);
    let mut categories: Vec<&CategoryInfo> = dataset.categories.iter().collect();
    categories.sort_by_key(|c| c.source_id);
    let doc = json!({
        "images": images
            .iter()
            .map(|i| json!({"id": i.id, "width": i.width, "height": i.height}))
            .collect::<Vec<_>>(),
        "annotations": annotations.into_iter().map(|(_, v)| v).collect::<Vec<_>>(),
        "categories": categories
            .iter()
            .map(|c| json!({"id": c.source_id, "name": c.name}))
            .collect::<Vec<_>>(),
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("values always serialize");
    text.push('\n');
    text
}

pub fn export_coco(dataset: &Dataset, path: &Path) -> Result<()> {
    crate::fsutil::write_atomic(path, to_coco_json(dataset).as_bytes())
}

/// One detection in the COCO results format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDetection {
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub score: f64,
}

pub fn detections_to_coco(detections: &[Detection], dataset: &Dataset) -> Result<Vec<CocoDetection>> {
    let sizes: BTreeMap<u64, (f64, f64)> = dataset
        .images
        .iter()
        .map(|i| (i.id, (i.width as f64, i.height as f64)))
        .collect();
    detections
        .iter()
        .map(|d| {
            let &(w, h) = sizes
                .get(&d.image_id)
                .ok_or_else(|| Error::Malformed(format!("detection on unknown image {}", d.image_id)))?;
            let cat = dataset.categories.get(d.category).ok_or(Error::CategoryOutOfRange {
                index: d.category,
                num_classes: dataset.num_classes(),
            })?;
            Ok(CocoDetection {
                image_id: d.image_id,
                category_id: cat.source_id,
                bbox: denormalize_box(&d.bbox, w, h).map(round6),
                score: round6(d.score),
            })
        })
        .collect()
}

pub fn detections_from_coco(records: &[CocoDetection], dataset: &Dataset) -> Result<Vec<Detection>> {
    let sizes: BTreeMap<u64, (f64, f64)> = dataset
        .images
        .iter()
        .map(|i| (i.id, (i.width as f64, i.height as f64)))
        .collect();
    records
        .iter()
        .filter_map(|r| {
            let Some(&(w, h)) = sizes.get(&r.image_id) else {
                return Some(Err(Error::Malformed(format!(
                    "detection on unknown image {}",
                    r.image_id
                ))));
            };
            let Some(category) = dataset.category_index(r.category_id) else {
                return Some(Err(Error::Malformed(format!(
                    "detection with unknown category {}",
                    r.category_id
                ))));
            };
            let px = clamp_box(r.bbox, w, h)?;
            Some(normalize_box(px, w, h).map(|bbox| Detection {
                image_id: r.image_id,
                category,
                score: r.score,
                bbox,
            }))
        })
        .collect()
}

/// Detection dump text: a JSON array, or one JSON object per line.
pub fn parse_detection_dump(text: &str) -> Result<Vec<CocoDetection>> {
    if text.trim_start().starts_with('[') {
        return Ok(serde_json::from_str(text)?);
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Detection dump as a pretty JSON array.
pub fn detection_dump_json(records: &[CocoDetection]) -> String {
    let mut text = serde_json::to_string_pretty(records).expect("records always serialize");
    text.push('\n');
    text
}
