use image::imageops::FilterType;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::data::{crop_box, image_to_chw};
use crate::types::{BBox, DetectionDataset, Split};

pub const BACKGROUND_MAX_IOU: f64 = 0.1;
pub const BACKGROUND_TRIES: usize = 50;
pub const SPLIT_FRACTIONS: [f64; 3] = [0.7, 0.1, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchLabel {
    Foreground,
    Background,
}

impl PatchLabel {
    pub fn target(&self) -> f32 {
        match self {
            Self::Foreground => 1.0,
            Self::Background => 0.0,
        }
    }
}

/// A resized crop in `[-1, 1]`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub pixels: Vec<f32>,
    pub label: PatchLabel,
    pub split: Split,
    /// Index of the source image in the dataset.
    pub source: usize,
}

/// Crop of `bbox` resized to `size x size`, or `None` when the rounded box
/// is empty.
pub fn box_patch(img: &RgbImage, bbox: &BBox, size: usize) -> Option<Vec<f32>> {
    let crop = crop_box(img, bbox)?;
    let resized = image::imageops::resize(&crop, size as u32, size as u32, FilterType::Triangle);
    Some(image_to_chw(&resized, size))
}

/// Assigns each image to a split, shuffling image order first.
pub fn split_images<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_train = (SPLIT_FRACTIONS[0] * n as f64).round() as usize;
    let n_val = ((SPLIT_FRACTIONS[1] * n as f64).round() as usize).min(n - n_train);
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

/// Background box with IoU below the cap against every annotation, sized
/// like a random foreground box.
fn background_box<R: Rng + ?Sized>(
    boxes: &[BBox],
    sizes: &[(f64, f64)],
    width: f64,
    height: f64,
    rng: &mut R,
) -> Option<BBox> {
    for _ in 0..BACKGROUND_TRIES {
        let &(w, h) = sizes.get(rng.random_range(0..sizes.len()))?;
        if w > width || h > height {
            continue;
        }
        let x = rng.random_range(0.0..=width - w);
        let y = rng.random_range(0.0..=height - h);
        let candidate = BBox::new(x, y, w, h).ok()?;
        if boxes.iter().all(|b| b.iou(&candidate) < BACKGROUND_MAX_IOU) {
            return Some(candidate);
        }
    }
    None
}

/// One foreground patch per annotation and up to `per_image_bg` background
/// patches per image. Splits are assigned per image.
pub fn crop_patches<R: Rng + ?Sized>(
    dataset: &DetectionDataset,
    per_image_bg: usize,
    patch_size: usize,
    rng: &mut R,
) -> Vec<PatchSample> {
    let splits = split_images(dataset.items.len(), rng);
    let sizes: Vec<(f64, f64)> = dataset
        .items
        .iter()
        .flat_map(|it| it.annotations.iter().map(|a| (a.bbox.w, a.bbox.h)))
        .collect();
    let mut out = Vec::new();
    let mut short = 0usize;
    for (i, item) in dataset.items.iter().enumerate() {
        let split = splits[i];
        for a in &item.annotations {
            if let Some(pixels) = box_patch(&item.pixels, &a.bbox, patch_size) {
                out.push(PatchSample {
                    pixels,
                    label: PatchLabel::Foreground,
                    split,
                    source: i,
                });
            }
        }
        let boxes: Vec<BBox> = item.annotations.iter().map(|a| a.bbox).collect();
        let (w, h) = (item.width() as f64, item.height() as f64);
        for _ in 0..per_image_bg {
            let patch = background_box(&boxes, &sizes, w, h, rng).and_then(|b| box_patch(&item.pixels, &b, patch_size));
            match patch {
                Some(pixels) => out.push(PatchSample {
                    pixels,
                    label: PatchLabel::Background,
                    split,
                    source: i,
                }),
                None => short += 1,
            }
        }
    }
    if short > 0 {
        log::warn!("{short} background patches could not be placed after {BACKGROUND_TRIES} tries");
    }
    out
}
