use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::bbox::BBox;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub category_id: usize,
    pub bbox: BBox,
}

impl Annotation {
    pub fn new(category_id: usize, bbox: BBox) -> Self {
        Self { category_id, bbox }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidDataset(format!("unknown split `{other}`"))),
        }
    }
}

/// An RGB image with its box annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub name: String,
    pub pixels: RgbImage,
    pub annotations: Vec<Annotation>,
}

impl LabeledImage {
    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }
}

/// Anything that carries a box layout on an image of known size.
pub trait Layout {
    fn annotations(&self) -> &[Annotation];
    /// `(height, width)` in pixels.
    fn image_size(&self) -> (usize, usize);
}

impl Layout for LabeledImage {
    fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    fn image_size(&self) -> (usize, usize) {
        (self.pixels.height() as usize, self.pixels.width() as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionDataset {
    pub categories: Vec<String>,
    pub scene_name: String,
    pub split: Split,
    pub items: Vec<LabeledImage>,
}

impl DetectionDataset {
    pub fn new(categories: Vec<String>, scene_name: impl Into<String>, split: Split) -> Result<Self> {
        let ds = Self {
            categories,
            scene_name: scene_name.into(),
            split,
            items: Vec::new(),
        };
        ds.validate_header()?;
        Ok(ds)
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn num_annotations(&self) -> usize {
        self.items.iter().map(|i| i.annotations.len()).sum()
    }

    /// Largest number of objects found in a single image.
    pub fn max_objects_per_image(&self) -> usize {
        self.items.iter().map(|i| i.annotations.len()).max().unwrap_or(0)
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    fn validate_header(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::InvalidDataset("at least one category is required".into()));
        }
        let mut seen = HashSet::new();
        for c in &self.categories {
            if c.trim().is_empty() {
                return Err(Error::InvalidDataset("empty category name".into()));
            }
            if !seen.insert(c.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate category `{c}`")));
            }
        }
        if self.scene_name.trim().is_empty() {
            return Err(Error::InvalidDataset("scene name must be non-empty".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_header()?;
        let k = self.categories.len();
        for item in &self.items {
            let (w, h) = (item.width() as f64, item.height() as f64);
            for a in &item.annotations {
                if a.category_id >= k {
                    return Err(Error::InvalidDataset(format!(
                        "{}: category id {} out of range for {k} categories",
                        item.name, a.category_id
                    )));
                }
                if !a.bbox.contained_in(w, h) {
                    return Err(Error::InvalidDataset(format!(
                        "{}: box {:?} exceeds the {w}x{h} image",
                        item.name, a.bbox
                    )));
                }
            }
        }
        Ok(())
    }
}
