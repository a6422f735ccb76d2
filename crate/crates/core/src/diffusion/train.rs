use std::io::Write;
use std::path::PathBuf;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    build_condition_triplet, rasterize_foreground_mask, stack_image_lists, ConditionTriplet, ForegroundPool,
};
use crate::error::{Error, Result};
use crate::stats::PseudoLabel;
use crate::types::DetectionDataset;

use super::data::{gaussian, object_crops, scene_samples, stack_chw, SceneSample};
use super::loss::{control_loss, dual_finetune_loss, LossBatch};
use super::model::{ControlInput, DenoiserModel, ModelCond};
use super::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl OptimizerConfig {
    fn build(&self, vars: Vec<Var>) -> Result<AdamW> {
        Ok(AdamW::new(
            vars,
            ParamsAdamW {
                lr: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: 1e-8,
                weight_decay: self.weight_decay,
            },
        )?)
    }
}

/// Options shared by both training loops.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Items per branch of the held-out probe batch.
    pub probe_size: usize,
    pub log_every: usize,
    /// Where to write the parameters if training diverges.
    pub divergence_checkpoint: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            probe_size: 8,
            log_every: 50,
            divergence_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub probe_loss_start: f64,
    pub probe_loss_end: f64,
    pub last_loss: Option<f64>,
}

#[derive(Serialize)]
struct StepRecord<'a> {
    stage: &'a str,
    step: usize,
    loss: f64,
}

#[derive(Serialize)]
struct ProbeRecord<'a> {
    stage: &'a str,
    step: usize,
    probe_loss: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

fn check_finite(model: &DenoiserModel, opts: &TrainOptions, step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    if let Some(path) = &opts.divergence_checkpoint {
        model.save(path, "diverged")?;
    }
    Err(Error::Divergence { step, loss })
}

fn log_line<T: Serialize>(log: &mut Option<&mut dyn Write>, record: &T) -> Result<()> {
    if let Some(w) = log {
        serde_json::to_writer(&mut **w, record)?;
        writeln!(w)?;
        // keeps the log followable while a long run is in progress
        w.flush()?;
    }
    Ok(())
}

struct FinetuneData {
    objects: Vec<(Vec<f32>, String)>,
    scenes: Vec<(Vec<f32>, String)>,
}

impl FinetuneData {
    fn new(dataset: &DetectionDataset, size: usize) -> Result<Self> {
        let objects: Vec<(Vec<f32>, String)> = object_crops(dataset, size)
            .into_iter()
            .map(|(px, k)| (px, format!("a {}", dataset.categories[k])))
            .collect();
        let scene_prompt = format!("a {}", dataset.scene_name);
        let scenes: Vec<(Vec<f32>, String)> = scene_samples(dataset, size)
            .into_iter()
            .map(|s| (s.pixels, scene_prompt.clone()))
            .collect();
        if objects.is_empty() || scenes.is_empty() {
            return Err(Error::InsufficientData {
                needed: 1,
                got: objects.len().min(scenes.len()),
            });
        }
        Ok(Self { objects, scenes })
    }
}

fn make_batch<R: Rng + ?Sized>(
    model: &DenoiserModel,
    pool: &[(Vec<f32>, String)],
    picks: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossBatch<ModelCond>> {
    let size = model.config.image_size;
    let dtype = model.params().dtype();
    let px: Vec<&[f32]> = picks.iter().map(|&i| pool[i].0.as_slice()).collect();
    let t: Vec<usize> = picks.iter().map(|_| rng.random_range(0..schedule.len())).collect();
    let eps = gaussian(&[picks.len(), 3, size, size], dtype, rng)?;
    Ok(LossBatch {
        x0: stack_chw(&px, size, dtype)?,
        t,
        eps,
        cond: ModelCond::prompts_only(picks.iter().map(|&i| pool[i].1.clone()).collect()),
    })
}

fn draw<R: Rng + ?Sized>(len: usize, k: usize, rng: &mut R) -> Vec<usize> {
    (0..k).map(|_| rng.random_range(0..len)).collect()
}

/// Dual fine-tuning on object crops ("a <class>") and whole scenes
/// ("a <scene>"). Each step draws half a batch from each.
pub fn train_finetune(
    model: &DenoiserModel,
    dataset: &DetectionDataset,
    lambda: f64,
    schedule: &NoiseSchedule,
    opts: &TrainOptions,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    model.check_schedule(schedule)?;
    let data = FinetuneData::new(dataset, model.config.image_size)?;
    let mut probe_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let probe_obj = draw(data.objects.len(), opts.probe_size, &mut probe_rng);
    let probe_scene = draw(data.scenes.len(), opts.probe_size, &mut probe_rng);
    let probe = (
        make_batch(model, &data.objects, &probe_obj, schedule, &mut probe_rng)?,
        make_batch(model, &data.scenes, &probe_scene, schedule, &mut probe_rng)?,
    );
    let probe_loss = || -> Result<f64> { scalar(&dual_finetune_loss(model, &probe.0, &probe.1, lambda, schedule)?) };

    let probe_loss_start = probe_loss()?;
    log_line(&mut log, &ProbeRecord { stage: "finetune", step: 0, probe_loss: probe_loss_start })?;
    if opts.steps == 0 {
        return Ok(TrainReport {
            steps: 0,
            probe_loss_start,
            probe_loss_end: probe_loss_start,
            last_loss: None,
        });
    }

    let mut opt = opts.optimizer.build(model.base_vars())?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let half = opts.optimizer.batch_size.div_ceil(2).max(1);
    let mut last = None;
    for step in 1..=opts.steps {
        let obj = draw(data.objects.len(), half, &mut rng);
        let scene = draw(data.scenes.len(), half, &mut rng);
        let ob = make_batch(model, &data.objects, &obj, schedule, &mut rng)?;
        let sb = make_batch(model, &data.scenes, &scene, schedule, &mut rng)?;
        let loss = dual_finetune_loss(model, &ob, &sb, lambda, schedule)?;
        let value = scalar(&loss)?;
        check_finite(model, opts, step, value)?;
        opt.backward_step(&loss)?;
        last = Some(value);
        if step % opts.log_every.max(1) == 0 || step == opts.steps {
            log_line(&mut log, &StepRecord { stage: "finetune", step, loss: value })?;
        }
    }
    let probe_loss_end = probe_loss()?;
    log_line(&mut log, &ProbeRecord { stage: "finetune", step: opts.steps, probe_loss: probe_loss_end })?;
    Ok(TrainReport {
        steps: opts.steps,
        probe_loss_start,
        probe_loss_end,
        last_loss: last,
    })
}

/// Settings specific to control training.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTraining {
    pub gamma: f64,
    pub freeze_base: bool,
}

struct ControlData<'a> {
    scenes: Vec<SceneSample>,
    dataset: &'a DetectionDataset,
    pool: &'a ForegroundPool,
}

impl ControlData<'_> {
    /// Triplet built from the ground-truth boxes of scene `i`, in a random
    /// object order.
    fn triplet<R: Rng + ?Sized>(&self, model: &DenoiserModel, i: usize, rng: &mut R) -> Result<(ConditionTriplet, Tensor)> {
        let size = model.config.image_size;
        let mut annotations = self.scenes[i].annotations.clone();
        annotations.shuffle(rng);
        let pseudo = PseudoLabel {
            annotations,
            image_size: (size, size),
        };
        let triplet = build_condition_triplet(
            &pseudo,
            &self.dataset.categories,
            &self.dataset.scene_name,
            self.pool,
            model.config.list_len,
            rng,
        )?;
        let mask = rasterize_foreground_mask(&pseudo.annotations, (size, size), (size, size)).to_tensor()?;
        Ok((triplet, mask))
    }

    fn batch<R: Rng + ?Sized>(
        &self,
        model: &DenoiserModel,
        picks: &[usize],
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<(LossBatch<ModelCond>, Tensor)> {
        let size = model.config.image_size;
        let dtype = model.params().dtype();
        let mut triplets = Vec::with_capacity(picks.len());
        let mut masks = Vec::with_capacity(picks.len());
        for &i in picks {
            let (tr, m) = self.triplet(model, i, rng)?;
            triplets.push(tr);
            masks.push(m);
        }
        let px: Vec<&[f32]> = picks.iter().map(|&i| self.scenes[i].pixels.as_slice()).collect();
        let t: Vec<usize> = picks.iter().map(|_| rng.random_range(0..schedule.len())).collect();
        let eps = gaussian(&[picks.len(), 3, size, size], dtype, rng)?;
        let batch = LossBatch {
            x0: stack_chw(&px, size, dtype)?,
            t,
            eps,
            cond: triplets_to_cond(&triplets)?,
        };
        Ok((batch, Tensor::stack(&masks, 0)?.to_dtype(dtype)?))
    }
}

/// Model conditioning for a batch of triplets.
pub fn triplets_to_cond(triplets: &[ConditionTriplet]) -> Result<ModelCond> {
    let lists: Vec<_> = triplets.iter().map(|t| t.image_list.clone()).collect();
    Ok(ModelCond {
        prompts: triplets.iter().map(|t| t.global_prompt.clone()).collect(),
        control: Some(ControlInput {
            canvases: stack_image_lists(&lists)?,
            text_lists: triplets.iter().map(|t| t.text_list.clone()).collect(),
        }),
    })
}

/// Trains the control branch (and, unless frozen, the base network) with the
/// foreground-reweighted reconstruction loss.
pub fn train_control(
    model: &DenoiserModel,
    dataset: &DetectionDataset,
    pool: &ForegroundPool,
    settings: &ControlTraining,
    schedule: &NoiseSchedule,
    opts: &TrainOptions,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    model.check_schedule(schedule)?;
    if let Some(missing) = pool.uncovered().first() {
        return Err(Error::PoolMiss(missing.to_string()));
    }
    let data = ControlData {
        scenes: scene_samples(dataset, model.config.image_size),
        dataset,
        pool,
    };
    if data.scenes.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut probe_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let picks = draw(data.scenes.len(), opts.probe_size, &mut probe_rng);
    let (probe, probe_mask) = data.batch(model, &picks, schedule, &mut probe_rng)?;
    let probe_loss = || -> Result<f64> { scalar(&control_loss(model, &probe, &probe_mask, settings.gamma, schedule)?) };

    let probe_loss_start = probe_loss()?;
    log_line(&mut log, &ProbeRecord { stage: "train-control", step: 0, probe_loss: probe_loss_start })?;
    if opts.steps == 0 {
        return Ok(TrainReport {
            steps: 0,
            probe_loss_start,
            probe_loss_end: probe_loss_start,
            last_loss: None,
        });
    }

    let mut opt = opts.optimizer.build(model.control_vars(settings.freeze_base))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut last = None;
    for step in 1..=opts.steps {
        let picks = draw(data.scenes.len(), opts.optimizer.batch_size.max(1), &mut rng);
        let (batch, mask) = data.batch(model, &picks, schedule, &mut rng)?;
        let loss = control_loss(model, &batch, &mask, settings.gamma, schedule)?;
        let value = scalar(&loss)?;
        check_finite(model, opts, step, value)?;
        opt.backward_step(&loss)?;
        last = Some(value);
        if step % opts.log_every.max(1) == 0 || step == opts.steps {
            log_line(&mut log, &StepRecord { stage: "train-control", step, loss: value })?;
        }
    }
    let probe_loss_end = probe_loss()?;
    log_line(&mut log, &ProbeRecord { stage: "train-control", step: opts.steps, probe_loss: probe_loss_end })?;
    Ok(TrainReport {
        steps: opts.steps,
        probe_loss_start,
        probe_loss_end,
        last_loss: last,
    })
}
