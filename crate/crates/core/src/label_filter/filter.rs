use std::io::Write;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::stats::PseudoLabel;
use crate::types::BBox;

use super::discriminator::Discriminator;
use super::patches::box_patch;

/// One logged keep/remove decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub label: PseudoLabel,
    /// Set when a non-empty pseudo-label lost every box.
    pub drop_image: bool,
    pub decisions: Vec<FilterDecision>,
}

impl FilterOutcome {
    pub fn removed(&self) -> usize {
        self.decisions.iter().filter(|d| !d.kept).count()
    }

    pub fn write_jsonl(&self, out: &mut dyn Write) -> Result<()> {
        for d in &self.decisions {
            serde_json::to_writer(&mut *out, d)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Keeps the boxes whose score is at least `tau`.
pub fn apply_threshold(pseudo: &PseudoLabel, scores: &[f64], tau: f64) -> FilterOutcome {
    assert_eq!(pseudo.len(), scores.len(), "one score per box");
    let mut label = PseudoLabel::empty(pseudo.image_size);
    let mut decisions = Vec::with_capacity(scores.len());
    for (a, &score) in pseudo.annotations.iter().zip(scores) {
        let kept = score >= tau;
        if kept {
            label.annotations.push(a.clone());
        }
        decisions.push(FilterDecision {
            bbox: a.bbox,
            category: a.category_id,
            score,
            kept,
        });
    }
    FilterOutcome {
        drop_image: !pseudo.is_empty() && label.is_empty(),
        label,
        decisions,
    }
}

/// Discriminator score of each box crop. Boxes that round to nothing score 0.
pub fn score_boxes(image: &RgbImage, boxes: &[BBox], disc: &Discriminator) -> Result<Vec<f64>> {
    let patches: Vec<Option<Vec<f32>>> = boxes.iter().map(|b| box_patch(image, b, disc.patch_size)).collect();
    let present: Vec<&[f32]> = patches.iter().flatten().map(Vec::as_slice).collect();
    let mut scored = disc.score_patches(&present)?.into_iter();
    Ok(patches
        .iter()
        .map(|p| if p.is_some() { scored.next().unwrap_or(0.0) } else { 0.0 })
        .collect())
}

/// Removes the boxes of `pseudo` whose region in `image` the discriminator
/// scores below its threshold.
pub fn filter_pseudo_labels(image: &RgbImage, pseudo: &PseudoLabel, disc: &Discriminator) -> Result<FilterOutcome> {
    let boxes: Vec<BBox> = pseudo.annotations.iter().map(|a| a.bbox).collect();
    let scores = score_boxes(image, &boxes, disc)?;
    Ok(apply_threshold(pseudo, &scores, disc.threshold))
}
