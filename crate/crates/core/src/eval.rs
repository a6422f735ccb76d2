//! Fidelity and layout-realization metrics.

use image::RgbImage;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_filter::{score_boxes, Discriminator};
use crate::types::{BBox, DetectionDataset};

/// Added to covariance diagonals that are numerically singular.
pub const FID_EPSILON: f64 = 1e-6;

/// Maps images to fixed-length feature vectors for FID.
pub trait FeatureExtractor {
    fn name(&self) -> String;
    fn extract(&self, images: &[RgbImage]) -> Result<Vec<Vec<f64>>>;
}

impl FeatureExtractor for Discriminator {
    fn name(&self) -> String {
        format!("discriminator-penultimate-{}d@{}px", self.feature_dim(), self.patch_size)
    }

    fn extract(&self, images: &[RgbImage]) -> Result<Vec<Vec<f64>>> {
        self.image_features(images)
    }
}

/// Mean and covariance (divisor `n - 1`) of row features.
pub fn gaussian_fit(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    let d = features.first().map(Vec::len).ok_or(Error::InsufficientData { needed: 1, got: 0 })?;
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::ShapeMismatch("ragged feature vectors".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    Ok((mean, cov))
}

fn regularize(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(cov.clone());
    let scale = eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.min() > 1e-12 * scale {
        return cov.clone();
    }
    log::warn!("singular covariance; adding {FID_EPSILON}·I");
    cov + DMatrix::identity(cov.nrows(), cov.ncols()) * FID_EPSILON
}

/// Square root of a symmetric positive semi-definite matrix.
fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians. `tr((Σa Σb)^½)` is computed as
/// `tr((Σa^½ Σb Σa^½)^½)`, which has the same eigenvalues and stays symmetric.
pub fn frechet_distance(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    let cov_a = regularize(cov_a);
    let cov_b = regularize(cov_b);
    let ra = sym_sqrt(&cov_a);
    let inner = &ra * &cov_b * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt
}

pub fn fid_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = gaussian_fit(a)?;
    let (mu_b, cov_b) = gaussian_fit(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::ShapeMismatch(format!("feature dims {} vs {}", mu_a.len(), mu_b.len())));
    }
    Ok(frechet_distance(&mu_a, &cov_a, &mu_b, &cov_b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub fid: f64,
    pub extractor: String,
    pub count_a: usize,
    pub count_b: usize,
}

pub fn compute_fid(a: &[RgbImage], b: &[RgbImage], extractor: &dyn FeatureExtractor) -> Result<FidReport> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    Ok(FidReport {
        fid: fid_from_features(&extractor.extract(a)?, &extractor.extract(b)?)?,
        extractor: extractor.name(),
        count_a: a.len(),
        count_b: b.len(),
    })
}

/// Fraction of annotation boxes that the discriminator scores at or above its
/// threshold. NaN when the dataset has no boxes.
pub fn layout_consistency(dataset: &DetectionDataset, disc: &Discriminator) -> Result<f64> {
    let mut kept = 0usize;
    let mut total = 0usize;
    for item in &dataset.items {
        let boxes: Vec<BBox> = item.annotations.iter().map(|a| a.bbox).collect();
        let scores = score_boxes(&item.pixels, &boxes, disc)?;
        kept += scores.iter().filter(|&&s| s >= disc.threshold).count();
        total += scores.len();
    }
    if total == 0 {
        log::warn!("realization rate of a dataset without boxes is undefined");
        return Ok(f64::NAN);
    }
    Ok(kept as f64 / total as f64)
}
