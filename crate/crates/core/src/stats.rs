//! Gaussian layout model: fitting per-image class counts and per-class box
//! attributes on a detection dataset, and sampling pseudo-labels from it.
//!
//! Counts follow a joint normal over the `K` classes. Each class has four
//! independent normals over the normalized top-left corner `(x, y)`, the
//! normalized area and the aspect ratio. Ratios are measured in normalized
//! units, `(w / W) / (h / H)`, which equals the pixel ratio `w / h` on square
//! images.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Annotation, BBox, DetectionDataset, Layout};

/// Diagonal jitter added to the count covariance.
pub const COVARIANCE_JITTER: f64 = 1e-6;
/// Redraws allowed before [`sample_bbox`] falls back to the mean box.
pub const MAX_BOX_RETRIES: usize = 20;
/// Sampled boxes narrower or shorter than this (in pixels) are redrawn.
pub const MIN_BOX_SIDE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCountStats {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

impl ClassCountStats {
    pub fn num_categories(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let k = self.mean.len();
        DMatrix::from_fn(k, k, |i, j| self.covariance[i][j])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian1 {
    pub mean: f64,
    pub variance: f64,
}

impl Gaussian1 {
    fn fit(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = if values.len() < 2 {
            0.0
        } else {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        };
        Self { mean, variance }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.mean + self.variance.sqrt() * z
    }
}

/// Box attribute normals for one class, in normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryBoxStats {
    pub x: Gaussian1,
    pub y: Gaussian1,
    pub area: Gaussian1,
    pub ratio: Gaussian1,
}

/// Per-class box statistics. `None` marks a class with no boxes in the
/// fitting data; the sampler emits no objects of such a class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxAttrStats {
    pub categories: Vec<Option<CategoryBoxStats>>,
}

impl BoxAttrStats {
    pub fn get(&self, category: usize) -> Option<&CategoryBoxStats> {
        self.categories.get(category).and_then(Option::as_ref)
    }

    pub fn missing_categories(&self) -> Vec<usize> {
        self.categories
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.is_none().then_some(i))
            .collect()
    }
}

/// A sampled layout for one image to be synthesized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub annotations: Vec<Annotation>,
    /// `(height, width)`
    pub image_size: (usize, usize),
}

impl PseudoLabel {
    pub fn empty(image_size: (usize, usize)) -> Self {
        Self {
            annotations: Vec::new(),
            image_size,
        }
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }
}

impl Layout for PseudoLabel {
    fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    fn image_size(&self) -> (usize, usize) {
        self.image_size
    }
}

pub fn fit_count_stats<L: Layout>(layouts: &[L], num_categories: usize) -> Result<ClassCountStats> {
    let n = layouts.len();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let k = num_categories;
    let counts: Vec<Vec<f64>> = layouts
        .iter()
        .map(|l| {
            let mut c = vec![0.0; k];
            for a in l.annotations() {
                c[a.category_id] += 1.0;
            }
            c
        })
        .collect();
    let mean: Vec<f64> = (0..k)
        .map(|j| counts.iter().map(|c| c[j]).sum::<f64>() / n as f64)
        .collect();
    let mut covariance = vec![vec![0.0; k]; k];
    for c in &counts {
        for i in 0..k {
            for j in 0..k {
                covariance[i][j] += (c[i] - mean[i]) * (c[j] - mean[j]);
            }
        }
    }
    for (i, row) in covariance.iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v /= (n - 1) as f64;
        }
        row[i] += COVARIANCE_JITTER;
    }
    Ok(ClassCountStats { mean, covariance })
}

pub fn estimate_count_stats(dataset: &DetectionDataset) -> Result<ClassCountStats> {
    fit_count_stats(&dataset.items, dataset.num_categories())
}

pub fn fit_box_stats<L: Layout>(layouts: &[L], num_categories: usize) -> BoxAttrStats {
    let mut per_class: Vec<[Vec<f64>; 4]> = (0..num_categories).map(|_| Default::default()).collect();
    for l in layouts {
        let (h, w) = l.image_size();
        let (h, w) = (h as f64, w as f64);
        for a in l.annotations() {
            let b = &a.bbox;
            let attrs = &mut per_class[a.category_id];
            attrs[0].push(b.x / w);
            attrs[1].push(b.y / h);
            attrs[2].push(b.area() / (w * h));
            attrs[3].push((b.w / w) / (b.h / h));
        }
    }
    let categories = per_class
        .iter()
        .map(|[x, y, area, ratio]| {
            (!x.is_empty()).then(|| CategoryBoxStats {
                x: Gaussian1::fit(x),
                y: Gaussian1::fit(y),
                area: Gaussian1::fit(area),
                ratio: Gaussian1::fit(ratio),
            })
        })
        .collect();
    BoxAttrStats { categories }
}

/// Fit per-class box normals. Classes without boxes are left as `None`
/// and reported with a warning.
pub fn estimate_box_stats(dataset: &DetectionDataset) -> BoxAttrStats {
    let stats = fit_box_stats(&dataset.items, dataset.num_categories());
    for k in stats.missing_categories() {
        log::warn!("category `{}` has no boxes; it will never be sampled", dataset.categories[k]);
    }
    stats
}

/// Draws count vectors from the joint normal with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct CountSampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl CountSampler {
    pub fn new(stats: &ClassCountStats) -> Self {
        let k = stats.num_categories();
        let mut cov = stats.cov_matrix();
        cov = (&cov + cov.transpose()) * 0.5;
        let mut jitter = COVARIANCE_JITTER;
        let factor = loop {
            if let Some(ch) = cov.clone().cholesky() {
                break ch.l();
            }
            cov += DMatrix::identity(k, k) * jitter;
            jitter *= 10.0;
        };
        Self {
            mean: DVector::from_column_slice(&stats.mean),
            factor,
        }
    }

    /// One draw: round to nearest, clamp at zero, then cap the total at
    /// `max_total` by dropping uniformly chosen objects.
    pub fn sample<R: Rng + ?Sized>(&self, max_total: usize, rng: &mut R) -> Vec<usize> {
        let k = self.mean.len();
        let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let draw = &self.mean + &self.factor * z;
        let counts: Vec<usize> = draw.iter().map(|v| v.round().max(0.0) as usize).collect();
        cap_total(counts, max_total, rng)
    }
}

fn cap_total<R: Rng + ?Sized>(counts: Vec<usize>, max_total: usize, rng: &mut R) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    if total <= max_total {
        return counts;
    }
    let owners: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &c)| std::iter::repeat_n(k, c))
        .collect();
    let mut kept = vec![0; counts.len()];
    for i in index::sample(rng, total, max_total) {
        kept[owners[i]] += 1;
    }
    kept
}

pub fn sample_object_counts<R: Rng + ?Sized>(
    stats: &ClassCountStats,
    max_total: usize,
    rng: &mut R,
) -> Vec<usize> {
    CountSampler::new(stats).sample(max_total, rng)
}

fn box_from_attrs(x: f64, y: f64, area: f64, ratio: f64, (h, w): (usize, usize)) -> Option<BBox> {
    if !(area > 0.0 && ratio > 0.0) {
        return None;
    }
    let (img_w, img_h) = (w as f64, h as f64);
    let bw = (area * ratio).sqrt() * img_w;
    let bh = (area / ratio).sqrt() * img_h;
    let b = BBox::new(x * img_w, y * img_h, bw, bh).ok()?.clip(img_w, img_h).ok()?;
    (b.w >= MIN_BOX_SIDE && b.h >= MIN_BOX_SIDE).then_some(b)
}

/// Draw one box for a class. Never fails: after [`MAX_BOX_RETRIES`] bad
/// draws the mean box is used.
pub fn sample_bbox<R: Rng + ?Sized>(
    stats: &CategoryBoxStats,
    image_size: (usize, usize),
    rng: &mut R,
) -> BBox {
    for _ in 0..MAX_BOX_RETRIES {
        let x = stats.x.sample(rng);
        let y = stats.y.sample(rng);
        let area = stats.area.sample(rng);
        let ratio = stats.ratio.sample(rng);
        if let Some(b) = box_from_attrs(x, y, area, ratio, image_size) {
            return b;
        }
    }
    mean_box(stats, image_size)
}

fn mean_box(stats: &CategoryBoxStats, image_size: (usize, usize)) -> BBox {
    let (x, y, area, ratio) = (stats.x.mean, stats.y.mean, stats.area.mean, stats.ratio.mean);
    if let Some(b) = box_from_attrs(x, y, area, ratio, image_size) {
        return b;
    }
    // mean box falls outside the image: center a box of the mean size
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    let (bw, bh) = if area > 0.0 && ratio > 0.0 {
        ((area * ratio).sqrt() * w, (area / ratio).sqrt() * h)
    } else {
        (MIN_BOX_SIDE, MIN_BOX_SIDE)
    };
    let bw = bw.clamp(MIN_BOX_SIDE, w);
    let bh = bh.clamp(MIN_BOX_SIDE, h);
    BBox {
        x: (w - bw) / 2.0,
        y: (h - bh) / 2.0,
        w: bw,
        h: bh,
    }
}

/// Joint layout model: count normal, per-class box normals and the list
/// capacity `N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutStats {
    pub categories: Vec<String>,
    pub max_objects: usize,
    pub counts: ClassCountStats,
    pub boxes: BoxAttrStats,
}

impl LayoutStats {
    /// Fit on a dataset. `max_objects` defaults to the largest object count
    /// found in a single training image.
    pub fn fit(dataset: &DetectionDataset, max_objects: Option<usize>) -> Result<Self> {
        Ok(Self {
            categories: dataset.categories.clone(),
            max_objects: max_objects.unwrap_or_else(|| dataset.max_objects_per_image()),
            counts: estimate_count_stats(dataset)?,
            boxes: estimate_box_stats(dataset),
        })
    }

    pub fn sampler(&self) -> LayoutSampler<'_> {
        LayoutSampler {
            counts: CountSampler::new(&self.counts),
            stats: self,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub struct LayoutSampler<'a> {
    counts: CountSampler,
    stats: &'a LayoutStats,
}

impl LayoutSampler<'_> {
    pub fn sample<R: Rng + ?Sized>(&self, image_size: (usize, usize), rng: &mut R) -> PseudoLabel {
        let mut counts = self.counts.sample(usize::MAX, rng);
        for k in self.stats.boxes.missing_categories() {
            counts[k] = 0;
        }
        let counts = cap_total(counts, self.stats.max_objects, rng);
        let mut annotations = Vec::with_capacity(counts.iter().sum());
        for (k, &c) in counts.iter().enumerate() {
            let Some(bs) = self.stats.boxes.get(k) else { continue };
            for _ in 0..c {
                annotations.push(Annotation::new(k, sample_bbox(bs, image_size, rng)));
            }
        }
        annotations.sort_by(|a, b| b.bbox.area().total_cmp(&a.bbox.area()));
        PseudoLabel {
            annotations,
            image_size,
        }
    }
}

pub fn sample_pseudo_label<R: Rng + ?Sized>(
    stats: &LayoutStats,
    image_size: (usize, usize),
    rng: &mut R,
) -> PseudoLabel {
    stats.sampler().sample(image_size, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout(counts: &[usize]) -> PseudoLabel {
        let mut annotations = Vec::new();
        for (k, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                annotations.push(Annotation::new(k, BBox::new(1.0, 1.0, 4.0, 4.0).unwrap()));
            }
        }
        PseudoLabel {
            annotations,
            image_size: (32, 32),
        }
    }

    fn g(mean: f64, variance: f64) -> Gaussian1 {
        Gaussian1 { mean, variance }
    }

    #[test]
    fn textbook_covariance() {
        let s = fit_count_stats(&[layout(&[2, 0]), layout(&[0, 2])], 2).unwrap();
        assert_eq!(s.mean, vec![1.0, 1.0]);
        // hand-computed: deviations (+1,-1) and (-1,+1), n-1 = 1
        let expected = [[2.0 + COVARIANCE_JITTER, -2.0], [-2.0, 2.0 + COVARIANCE_JITTER]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((s.covariance[i][j] - expected[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constant_counts_have_jitter_only() {
        let s = fit_count_stats(&[layout(&[3, 1]), layout(&[3, 1]), layout(&[3, 1])], 2).unwrap();
        assert_eq!(s.mean, vec![3.0, 1.0]);
        assert_eq!(s.covariance, vec![vec![COVARIANCE_JITTER, 0.0], vec![0.0, COVARIANCE_JITTER]]);
    }

    #[test]
    fn single_image_is_insufficient() {
        assert!(matches!(
            fit_count_stats(&[layout(&[1])], 1),
            Err(Error::InsufficientData { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn box_stats_single_and_pair() {
        let one = PseudoLabel {
            annotations: vec![Annotation::new(0, BBox::new(25.0, 25.0, 50.0, 50.0).unwrap())],
            image_size: (100, 100),
        };
        let s = fit_box_stats(&[one], 2);
        let c = s.get(0).unwrap();
        assert_eq!(c.x, g(0.25, 0.0));
        assert_eq!(c.y, g(0.25, 0.0));
        assert_eq!(c.area, g(0.25, 0.0));
        assert_eq!(c.ratio, g(1.0, 0.0));
        assert_eq!(s.missing_categories(), vec![1]);

        let two = PseudoLabel {
            annotations: vec![
                Annotation::new(0, BBox::new(20.0, 10.0, 10.0, 10.0).unwrap()),
                Annotation::new(0, BBox::new(40.0, 10.0, 10.0, 10.0).unwrap()),
            ],
            image_size: (100, 100),
        };
        let c = *fit_box_stats(&[two], 1).get(0).unwrap();
        assert!((c.x.mean - 0.3).abs() < 1e-12);
        // (0.1^2 + 0.1^2) / (2 - 1)
        assert!((c.x.variance - 0.02).abs() < 1e-12);
    }

    #[test]
    fn degenerate_counts_are_exact() {
        let stats = ClassCountStats {
            mean: vec![2.0, 1.0],
            covariance: vec![vec![COVARIANCE_JITTER, 0.0], vec![0.0, COVARIANCE_JITTER]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sampler = CountSampler::new(&stats);
        for _ in 0..1000 {
            assert_eq!(sampler.sample(10, &mut rng), vec![2, 1]);
        }
    }

    #[test]
    fn cap_drops_to_limit() {
        let stats = ClassCountStats {
            mean: vec![5.0, 5.0],
            covariance: vec![vec![1e-6, 0.0], vec![0.0, 1e-6]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut first = 0usize;
        for _ in 0..2000 {
            let c = sample_object_counts(&stats, 4, &mut rng);
            assert_eq!(c.iter().sum::<usize>(), 4);
            first += c[0];
        }
        // drops are uniform over objects, so both classes keep ~2 on average
        let avg = first as f64 / 2000.0;
        assert!((avg - 2.0).abs() < 0.1, "avg {avg}");
    }

    #[test]
    fn mean_box_example() {
        let s = CategoryBoxStats {
            x: g(0.25, 0.0),
            y: g(0.25, 0.0),
            area: g(0.25, 0.0),
            ratio: g(4.0, 0.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_bbox(&s, (64, 64), &mut rng);
        assert_eq!(b, BBox::new(16.0, 16.0, 48.0, 16.0).unwrap());

        let s = CategoryBoxStats {
            x: g(0.1, 0.0),
            y: g(0.1, 0.0),
            area: g(0.01, 0.0),
            ratio: g(1.0, 0.0),
        };
        let b = sample_bbox(&s, (50, 80), &mut rng);
        assert!((b.w - 8.0).abs() < 1e-9 && (b.h - 5.0).abs() < 1e-9);
    }

    #[test]
    fn falls_back_to_mean_box() {
        // corner draws land inside the image with negligible probability
        let s = CategoryBoxStats {
            x: g(0.2, 1e6),
            y: g(0.2, 1e6),
            area: g(0.04, 0.0),
            ratio: g(1.0, 0.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mean = BBox::new(12.8, 12.8, 12.8, 12.8).unwrap();
        for _ in 0..20 {
            let b = sample_bbox(&s, (64, 64), &mut rng);
            assert!((b.x - mean.x).abs() < 1e-9 && (b.w - mean.w).abs() < 1e-9);
        }
        let outside = CategoryBoxStats {
            x: g(3.0, 0.0),
            y: g(3.0, 0.0),
            area: g(0.04, 0.0),
            ratio: g(1.0, 0.0),
        };
        let b = sample_bbox(&outside, (64, 64), &mut rng);
        assert!(b.contained_in(64.0, 64.0));
        assert!((b.w - 12.8).abs() < 1e-9);
    }
}
