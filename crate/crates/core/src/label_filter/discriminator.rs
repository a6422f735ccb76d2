use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{AdamW, Linear, Optimizer, ParamsAdamW};
use image::imageops::FilterType;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::data::image_to_chw;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::types::Split;

use super::patches::{PatchLabel, PatchSample};

const WIDTHS: [usize; 4] = [16, 32, 64, 64];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub patch_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub per_image_bg: usize,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            epochs: 8,
            batch_size: 32,
            learning_rate: 1e-3,
            per_image_bg: 3,
            seed: 0,
        }
    }
}

/// Small CNN that scores whether a patch contains an object.
#[derive(Debug, Clone)]
pub struct Discriminator {
    store: ParamStore,
    convs: Vec<Conv2d>,
    head: Linear,
    pub threshold: f64,
    pub patch_size: usize,
}

impl Discriminator {
    pub fn new(patch_size: usize, seed: u64) -> Result<Self> {
        let store = ParamStore::new(seed, DType::F32);
        let vb = store.var_builder();
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (i, &c) in WIDTHS.iter().enumerate() {
            convs.push(Conv2d::new(c_in, c, 3, 2, vb.pp(format!("conv{i}")))?);
            c_in = c;
        }
        let head = candle_nn::linear(c_in, 1, vb.pp("head"))?;
        Ok(Self {
            store,
            convs,
            head,
            threshold: 0.5,
            patch_size,
        })
    }

    pub fn feature_dim(&self) -> usize {
        WIDTHS[WIDTHS.len() - 1]
    }

    /// Globally pooled penultimate features, `(B, 64)`.
    pub fn features(&self, xs: &Tensor) -> Result<Tensor> {
        let mut h = xs.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.silu()?;
        }
        Ok(h.mean(D::Minus1)?.mean(D::Minus1)?)
    }

    /// Logits, `(B,)`.
    pub fn logits(&self, xs: &Tensor) -> Result<Tensor> {
        Ok(self.head.forward(&self.features(xs)?)?.squeeze(1)?)
    }

    fn stack(&self, patches: &[&[f32]]) -> Result<Tensor> {
        let s = self.patch_size;
        let data: Vec<f32> = patches.iter().flat_map(|p| p.iter().copied()).collect();
        Ok(Tensor::from_vec(data, (patches.len(), 3, s, s), &Device::Cpu)?)
    }

    /// Foreground probabilities for prepared patches.
    pub fn score_patches(&self, patches: &[&[f32]]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(64) {
            let p = candle_nn::ops::sigmoid(&self.logits(&self.stack(chunk)?)?.detach())?;
            out.extend(p.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
        Ok(out)
    }

    /// Penultimate features of whole images resized to the patch size.
    pub fn image_features(&self, images: &[RgbImage]) -> Result<Vec<Vec<f64>>> {
        let s = self.patch_size as u32;
        let prepared: Vec<Vec<f32>> = images
            .iter()
            .map(|img| image_to_chw(&image::imageops::resize(img, s, s, FilterType::Triangle), self.patch_size))
            .collect();
        let mut out = Vec::with_capacity(images.len());
        for chunk in prepared.chunks(64) {
            let refs: Vec<&[f32]> = chunk.iter().map(Vec::as_slice).collect();
            let f = self.features(&self.stack(&refs)?)?.detach();
            out.extend(f.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("threshold".into(), self.threshold.to_string());
        meta.insert("patch_size".into(), self.patch_size.to_string());
        self.store.save(path, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let meta = header.metadata().clone().unwrap_or_default();
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("{} lacks `{k}`", path.display())))
        };
        let patch_size: usize = get("patch_size")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad patch_size".into()))?;
        let mut disc = Self::new(patch_size, 0)?;
        disc.store.load(path)?;
        disc.threshold = get("threshold")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad threshold".into()))?;
        Ok(disc)
    }
}

/// Accuracy numbers of a trained discriminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorReport {
    pub threshold: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub val_balanced_accuracy: f64,
    pub test_accuracy: f64,
    pub test_recall: f64,
    pub train_patches: usize,
    pub val_patches: usize,
    pub test_patches: usize,
}

pub fn accuracy(scores: &[f64], labels: &[PatchLabel], tau: f64) -> f64 {
    if scores.is_empty() {
        return f64::NAN;
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= tau) == (l == PatchLabel::Foreground))
        .count();
    hits as f64 / scores.len() as f64
}

/// Mean of foreground recall and background specificity.
pub fn balanced_accuracy(scores: &[f64], labels: &[PatchLabel], tau: f64) -> f64 {
    let rate = |want: PatchLabel| {
        let (hit, n) = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == want)
            .fold((0usize, 0usize), |(h, n), (&s, _)| (h + ((s >= tau) == (want == PatchLabel::Foreground)) as usize, n + 1));
        hit as f64 / n.max(1) as f64
    };
    0.5 * (rate(PatchLabel::Foreground) + rate(PatchLabel::Background))
}

/// Threshold maximizing balanced accuracy. Candidates are midpoints between
/// consecutive distinct scores; 0.5 is kept unless a candidate beats it.
pub fn choose_threshold(scores: &[f64], labels: &[PatchLabel]) -> f64 {
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut best = (balanced_accuracy(scores, labels, 0.5), 0.5);
    for w in sorted.windows(2) {
        let tau = 0.5 * (w[0] + w[1]);
        let ba = balanced_accuracy(scores, labels, tau);
        if ba > best.0 + 1e-12 {
            best = (ba, tau);
        }
    }
    best.1
}

fn split_of<'a>(patches: &'a [PatchSample], split: Split) -> Result<Vec<&'a PatchSample>> {
    let subset: Vec<&PatchSample> = patches.iter().filter(|p| p.split == split).collect();
    for (label, name) in [(PatchLabel::Foreground, "foreground"), (PatchLabel::Background, "background")] {
        if !subset.iter().any(|p| p.label == label) {
            return Err(Error::ClassMissing {
                split: split.to_string(),
                class: name.into(),
            });
        }
    }
    Ok(subset)
}

fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    // max(z, 0) - z * y + log(1 + exp(-|z|))
    let soft = ((logits.abs()?.neg()?.exp()? + 1.0)?.log()? + logits.relu()?)?;
    Ok((soft - (logits * targets)?)?.mean_all()?)
}

pub fn train_discriminator(patches: &[PatchSample], cfg: &DiscriminatorConfig) -> Result<(Discriminator, DiscriminatorReport)> {
    let train = split_of(patches, Split::Train)?;
    let val = split_of(patches, Split::Val)?;
    let test = split_of(patches, Split::Test)?;
    let mut disc = Discriminator::new(cfg.patch_size, cfg.seed)?;
    if cfg.epochs == 0 {
        log::warn!("discriminator is untrained (epochs = 0); expect chance-level accuracy");
    } else {
        let mut opt = AdamW::new(
            disc.store.all_vars(),
            ParamsAdamW {
                lr: cfg.learning_rate,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let refs: Vec<&[f32]> = chunk.iter().map(|&i| train[i].pixels.as_slice()).collect();
                let y: Vec<f32> = chunk.iter().map(|&i| train[i].label.target()).collect();
                let y = Tensor::from_vec(y, chunk.len(), &Device::Cpu)?;
                let loss = bce_with_logits(&disc.logits(&disc.stack(&refs)?)?, &y)?;
                let value = loss.to_scalar::<f32>()? as f64;
                if !value.is_finite() {
                    return Err(Error::Divergence { step: epoch, loss: value });
                }
                total += value * chunk.len() as f64;
                opt.backward_step(&loss)?;
            }
            log::info!("discriminator epoch {epoch}: loss {:.4}", total / train.len() as f64);
        }
    }
    let eval = |disc: &Discriminator, set: &[&PatchSample]| -> Result<(Vec<f64>, Vec<PatchLabel>)> {
        let refs: Vec<&[f32]> = set.iter().map(|p| p.pixels.as_slice()).collect();
        Ok((disc.score_patches(&refs)?, set.iter().map(|p| p.label).collect()))
    };
    let (val_scores, val_labels) = eval(&disc, &val)?;
    disc.threshold = choose_threshold(&val_scores, &val_labels);
    let tau = disc.threshold;
    let (train_scores, train_labels) = eval(&disc, &train)?;
    let (test_scores, test_labels) = eval(&disc, &test)?;
    let fg: Vec<f64> = test_scores
        .iter()
        .zip(&test_labels)
        .filter(|(_, &l)| l == PatchLabel::Foreground)
        .map(|(&s, _)| s)
        .collect();
    let report = DiscriminatorReport {
        threshold: tau,
        train_accuracy: accuracy(&train_scores, &train_labels, tau),
        val_accuracy: accuracy(&val_scores, &val_labels, tau),
        val_balanced_accuracy: balanced_accuracy(&val_scores, &val_labels, tau),
        test_accuracy: accuracy(&test_scores, &test_labels, tau),
        test_recall: fg.iter().filter(|&&s| s >= tau).count() as f64 / fg.len().max(1) as f64,
        train_patches: train.len(),
        val_patches: val.len(),
        test_patches: test.len(),
    };
    Ok((disc, report))
}
