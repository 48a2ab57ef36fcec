//! In-memory detection dataset with dense category indices and
//! normalized center-format boxes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::labels::{one_hot, pad_to_n, Category, LabeledSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryInfo {
    /// Identifier in the source annotation file.
    pub source_id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    /// Dense category index in `0..num_classes`.
    pub category: usize,
    pub bbox: BoundingBox,
    /// Box area in pixels.
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<Annotation>,
}

impl Image {
    /// A copy keeping only annotations whose category is in `keep`.
    pub fn restricted_to(&self, keep: &[usize]) -> Image {
        Image {
            annotations: self
                .annotations
                .iter()
                .filter(|a| keep.contains(&a.category))
                .cloned()
                .collect(),
            ..self.clone()
        }
    }

    pub fn has_category_in(&self, cats: &[usize]) -> bool {
        self.annotations.iter().any(|a| cats.contains(&a.category))
    }

    /// Ground truth padded with background to `n` entries.
    pub fn targets(&self, n: usize, num_classes: usize) -> Result<LabeledSet> {
        let items = self
            .annotations
            .iter()
            .map(|a| one_hot(Category::Object(a.category), a.bbox, num_classes))
            .collect::<Result<Vec<_>>>()?;
        pad_to_n(items, n, num_classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub categories: Vec<CategoryInfo>,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn num_annotations(&self) -> usize {
        self.images.iter().map(|i| i.annotations.len()).sum()
    }

    pub fn image(&self, id: u64) -> Option<&Image> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn index_by_id(&self) -> BTreeMap<u64, usize> {
        self.images.iter().enumerate().map(|(k, i)| (i.id, k)).collect()
    }

    /// Dense index of a source category id.
    pub fn category_index(&self, source_id: u64) -> Option<usize> {
        self.categories.iter().position(|c| c.source_id == source_id)
    }

    pub fn check(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let c = self.num_classes();
        for img in &self.images {
            for a in &img.annotations {
                if a.category >= c {
                    return Err(Error::CategoryOutOfRange {
                        index: a.category,
                        num_classes: c,
                    });
                }
                a.bbox.validate()?;
            }
        }
        Ok(())
    }
}

/// Per-image feature vectors consumed by the toy detector.
pub type FeatureStore = BTreeMap<u64, Vec<f64>>;
