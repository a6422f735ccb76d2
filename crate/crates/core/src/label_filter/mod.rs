//! Foreground/background patch discriminator and pseudo-label filtering.

pub mod discriminator;
pub mod filter;
pub mod patches;

pub use discriminator::{
    accuracy, balanced_accuracy, choose_threshold, train_discriminator, Discriminator, DiscriminatorConfig,
    DiscriminatorReport,
};
pub use filter::{apply_threshold, filter_pseudo_labels, score_boxes, FilterDecision, FilterOutcome};
pub use patches::{box_patch, crop_patches, split_images, PatchLabel, PatchSample, BACKGROUND_MAX_IOU};
