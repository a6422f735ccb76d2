use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use candle_core::DType;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{build_condition_triplet, ConditionTriplet, ForegroundPool};
use crate::diffusion::{
    generate_foreground_pool, make_noise_schedule, sample_batch, train_control, train_finetune, triplets_to_cond,
    ControlTraining, DenoiserModel, ModelCond, NoiseSchedule, OptimizerConfig, TrainOptions,
};
use crate::error::{Error, Result};
use crate::eval::{compute_fid, layout_consistency};
use crate::label_filter::{
    crop_patches, filter_pseudo_labels, score_boxes, train_discriminator, Discriminator, DiscriminatorConfig, DiscriminatorReport,
    FilterDecision,
};
use crate::seed::{derive_rng, derive_seed};
use crate::stats::{sample_bbox, LayoutStats, PseudoLabel};
use crate::toy::{shapes_corpus, ShapesConfig};
use crate::types::{export_yolo_dataset, parse_yolo_dataset, Annotation, DetectionDataset, LabeledImage, Split};

use super::config::{DataSource, PipelineConfig};
use super::manifest::{hash_bytes, hash_dir, Manifest, StageRecord};

const MODEL_FILE: &str = "model.safetensors";
const DISC_FILE: &str = "discriminator.safetensors";
const STATS_FILE: &str = "layout_stats.json";
const LABELS_FILE: &str = "labels.jsonl";
const REPORT_FILE: &str = "report.json";
const IMAGES_DIR: &str = "images";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Finetune,
    Pool,
    TrainControl,
    FitStats,
    Synthesize,
    Filter,
    Export,
    Eval,
}

impl Stage {
    /// Execution order of a full run.
    pub const ALL: [Stage; 8] = [
        Stage::Finetune,
        Stage::Pool,
        Stage::TrainControl,
        Stage::FitStats,
        Stage::Synthesize,
        Stage::Filter,
        Stage::Export,
        Stage::Eval,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Finetune => "finetune",
            Stage::Pool => "pool",
            Stage::TrainControl => "train-control",
            Stage::FitStats => "fit-stats",
            Stage::Synthesize => "synthesize",
            Stage::Filter => "filter",
            Stage::Export => "export",
            Stage::Eval => "eval",
        }
    }

    pub fn upstream(&self) -> &'static [Stage] {
        match self {
            Stage::Finetune | Stage::FitStats => &[],
            Stage::Pool => &[Stage::Finetune],
            Stage::TrainControl => &[Stage::Finetune, Stage::Pool],
            Stage::Synthesize => &[Stage::TrainControl, Stage::FitStats, Stage::Pool],
            Stage::Filter => &[Stage::Synthesize],
            Stage::Export => &[Stage::Synthesize, Stage::Filter],
            Stage::Eval => &[Stage::TrainControl, Stage::FitStats, Stage::Pool, Stage::Filter, Stage::Export],
        }
    }

    /// Whether the stage reads the training corpus.
    pub fn reads_dataset(&self) -> bool {
        matches!(self, Stage::Finetune | Stage::TrainControl | Stage::FitStats | Stage::Filter | Stage::Eval)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StageOutcome {
    Ran { seconds: f64 },
    UpToDate,
}

/// Counts and metrics of one synthesis run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub requested: usize,
    pub generated: usize,
    /// Images that kept every box.
    pub intact: usize,
    /// Images that lost some but not all boxes.
    pub partially_filtered: usize,
    /// Images that lost every box.
    pub dropped: usize,
    pub boxes_requested: usize,
    pub boxes_kept: usize,
    /// Fraction of requested boxes judged present; unset without boxes.
    pub realization_rate: Option<f64>,
    pub discriminator: Option<DiscriminatorReport>,
    pub fid: Option<f64>,
    pub fid_extractor: Option<String>,
    pub single_object_rate: Option<f64>,
    pub baseline_single_object_rate: Option<f64>,
    /// Fraction of exported boxes the discriminator scores at or above `τ`.
    pub exported_positive_rate: Option<f64>,
    pub stage_seconds: BTreeMap<String, f64>,
}

impl SynthesisReport {
    pub fn accounting_holds(&self) -> bool {
        self.generated == self.intact + self.partially_filtered + self.dropped
    }
}

/// One line of the synthesized label file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub name: String,
    pub label: PseudoLabel,
    #[serde(default)]
    pub dropped: bool,
}

#[derive(Serialize)]
struct DecisionLine<'a> {
    image: &'a str,
    #[serde(flatten)]
    decision: &'a FilterDecision,
}

fn read_records(path: &Path) -> Result<Vec<LabelRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn write_records(path: &Path, records: &[LabelRecord]) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn dataset_hash(ds: &DetectionDataset) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&(&ds.categories, &ds.scene_name)).expect("plain strings serialize"));
    for item in &ds.items {
        h.update(item.name.as_bytes());
        h.update(item.pixels.width().to_le_bytes());
        h.update(item.pixels.height().to_le_bytes());
        h.update(item.pixels.as_raw());
        for a in &item.annotations {
            h.update((a.category_id as u64).to_le_bytes());
            for v in [a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h] {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

/// Staged pipeline over one work directory.
pub struct Pipeline {
    pub config: PipelineConfig,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Self {
        Self { config }
    }

    pub fn work_dir(&self) -> &Path {
        &self.config.work_dir
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.config.work_dir.join(stage.name())
    }

    pub fn load_dataset(&self) -> Result<DetectionDataset> {
        let d = &self.config.data;
        let mut ds = match d.source {
            DataSource::Shapes => shapes_corpus(
                &ShapesConfig {
                    images: d.images,
                    size: self.config.model.image_size,
                    ..ShapesConfig::default()
                },
                derive_seed(self.config.seed, "data", 0),
            )?,
            DataSource::Yolo => {
                let path = d.path.as_ref().ok_or_else(|| Error::Config("data.path is unset".into()))?;
                if !path.is_dir() {
                    return Err(Error::MissingArtifact {
                        stage: "data".into(),
                        artifact: path.display().to_string(),
                    });
                }
                parse_yolo_dataset(path)?
            }
        };
        if let Some(scene) = &d.scene {
            ds.scene_name = scene.clone();
        }
        if ds.num_annotations() == 0 {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        Ok(ds)
    }

    /// List length `N`.
    pub fn list_len(&self, dataset: &DetectionDataset) -> usize {
        self.config
            .layout
            .max_objects
            .unwrap_or_else(|| dataset.max_objects_per_image())
            .max(1)
    }

    fn schedule(&self) -> Result<NoiseSchedule> {
        make_noise_schedule(self.config.diffusion.timesteps, self.config.diffusion.schedule)
    }

    fn config_hash(&self, stage: Stage) -> String {
        let c = &self.config;
        let slice = match stage {
            Stage::Finetune => serde_json::json!([c.seed, c.model, c.diffusion.timesteps, c.diffusion.schedule, c.finetune, c.layout]),
            Stage::Pool => serde_json::json!([c.seed, c.diffusion, c.pool]),
            Stage::TrainControl => serde_json::json!([c.seed, c.diffusion.timesteps, c.diffusion.schedule, c.control]),
            Stage::FitStats => serde_json::json!([c.layout]),
            Stage::Synthesize => serde_json::json!([c.seed, c.diffusion, c.synthesize]),
            Stage::Filter => serde_json::json!([c.seed, c.filter]),
            Stage::Export => serde_json::json!([]),
            Stage::Eval => serde_json::json!([c.seed, c.diffusion, c.eval]),
        };
        hash_bytes(slice.to_string().as_bytes())
    }

    /// Hashes of the upstream artifacts, checked against the manifest.
    fn check_upstream(&self, stage: Stage, manifest: &Manifest) -> Result<BTreeMap<String, String>> {
        let mut inputs = BTreeMap::new();
        for up in stage.upstream() {
            let dir = self.stage_dir(*up);
            let missing = || Error::MissingArtifact {
                stage: stage.name().into(),
                artifact: dir.display().to_string(),
            };
            let record = manifest.stages.get(up.name()).ok_or_else(missing)?;
            if !dir.is_dir() {
                return Err(missing());
            }
            let hash = hash_dir(&dir)?;
            if hash != record.output_hash {
                return Err(Error::StaleUpstream {
                    stage: stage.name().into(),
                    artifact: dir.display().to_string(),
                });
            }
            inputs.insert(up.name().to_string(), hash);
        }
        Ok(inputs)
    }

    /// Runs one stage unless its outputs are already current.
    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome> {
        let mut manifest = Manifest::load(self.work_dir())?;
        let mut inputs = self.check_upstream(stage, &manifest)?;
        let dataset = if stage.reads_dataset() {
            let ds = self.load_dataset()?;
            inputs.insert("dataset".into(), dataset_hash(&ds));
            Some(ds)
        } else {
            None
        };
        let config_hash = self.config_hash(stage);
        let out_dir = self.stage_dir(stage);
        if let Some(rec) = manifest.stages.get(stage.name()) {
            if rec.config_hash == config_hash && rec.inputs == inputs && out_dir.is_dir() && hash_dir(&out_dir)? == rec.output_hash {
                log::info!("{stage}: up to date");
                return Ok(StageOutcome::UpToDate);
            }
        }

        log::info!("{stage}: running");
        let start = Instant::now();
        let tmp = self.work_dir().join(format!(".{}.tmp", stage.name()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        let dataset = dataset.as_ref();
        let ds = || dataset.expect("stage reads the dataset");
        match stage {
            Stage::Finetune => self.finetune(ds(), &tmp)?,
            Stage::Pool => self.pool(&tmp)?,
            Stage::TrainControl => self.train_control(ds(), &tmp)?,
            Stage::FitStats => self.fit_stats(ds(), &tmp)?,
            Stage::Synthesize => self.synthesize(&tmp)?,
            Stage::Filter => self.filter(ds(), &tmp)?,
            Stage::Export => self.export(&tmp)?,
            Stage::Eval => self.eval(ds(), &tmp)?,
        }
        if out_dir.exists() {
            fs::remove_dir_all(&out_dir)?;
        }
        fs::rename(&tmp, &out_dir)?;
        let seconds = start.elapsed().as_secs_f64();
        manifest.stages.insert(
            stage.name().into(),
            StageRecord {
                config_hash,
                inputs,
                output_hash: hash_dir(&out_dir)?,
                seconds,
            },
        );
        manifest.save(self.work_dir())?;
        log::info!("{stage}: done in {seconds:.1}s");
        Ok(StageOutcome::Ran { seconds })
    }

    pub fn run_all(&self) -> Result<Vec<(Stage, StageOutcome)>> {
        Stage::ALL.iter().map(|&s| Ok((s, self.run_stage(s)?))).collect()
    }

    fn train_options(&self, stage: Stage, steps: usize, optimizer: &OptimizerConfig) -> TrainOptions {
        TrainOptions {
            steps,
            optimizer: optimizer.clone(),
            seed: derive_seed(self.config.seed, stage.name(), 0),
            divergence_checkpoint: Some(self.work_dir().join(format!("{}-diverged.safetensors", stage.name()))),
            ..TrainOptions::default()
        }
    }

    fn load_model(&self, stage: Stage) -> Result<DenoiserModel> {
        Ok(DenoiserModel::from_checkpoint(&self.stage_dir(stage).join(MODEL_FILE), DType::F32)?.0)
    }

    fn load_pool(&self, categories: Vec<String>) -> Result<ForegroundPool> {
        ForegroundPool::load(&self.stage_dir(Stage::Pool), categories)
    }

    fn load_stats(&self) -> Result<LayoutStats> {
        LayoutStats::load(&self.stage_dir(Stage::FitStats).join(STATS_FILE))
    }

    fn finetune(&self, dataset: &DetectionDataset, out: &Path) -> Result<()> {
        let c = &self.config;
        let mut model_cfg = c.model.clone();
        model_cfg.list_len = self.list_len(dataset);
        model_cfg.timesteps = c.diffusion.timesteps;
        model_cfg.schedule = c.diffusion.schedule;
        let model = DenoiserModel::new(model_cfg, derive_seed(c.seed, "model", 0), DType::F32)?;
        let mut log = BufWriter::new(fs::File::create(out.join("train_log.jsonl"))?);
        let opts = self.train_options(Stage::Finetune, c.finetune.steps, &c.finetune.optimizer);
        let report = train_finetune(&model, dataset, c.finetune.lambda, &self.schedule()?, &opts, Some(&mut log))?;
        log.flush()?;
        fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
        model.save(&out.join(MODEL_FILE), &self.config_hash(Stage::Finetune))
    }

    fn pool(&self, out: &Path) -> Result<()> {
        let c = &self.config;
        let model = self.load_model(Stage::Finetune)?;
        let categories = self.categories()?;
        let pool = generate_foreground_pool(
            &model,
            &categories,
            c.pool.per_class,
            &self.schedule()?,
            c.diffusion.sampling_steps,
            derive_seed(c.seed, "pool", 0),
            c.pool.batch_size,
        )?;
        pool.save(out)
    }

    fn categories(&self) -> Result<Vec<String>> {
        Ok(self.load_dataset()?.categories)
    }

    fn train_control(&self, dataset: &DetectionDataset, out: &Path) -> Result<()> {
        let c = &self.config;
        let model = self.load_model(Stage::Finetune)?;
        model.reset_control_from_base()?;
        let pool = self.load_pool(dataset.categories.clone())?;
        let settings = ControlTraining {
            gamma: c.control.gamma,
            freeze_base: c.control.freeze_base,
        };
        let mut log = BufWriter::new(fs::File::create(out.join("train_log.jsonl"))?);
        let opts = self.train_options(Stage::TrainControl, c.control.steps, &c.control.optimizer);
        let report = train_control(&model, dataset, &pool, &settings, &self.schedule()?, &opts, Some(&mut log))?;
        log.flush()?;
        fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
        model.save(&out.join(MODEL_FILE), &self.config_hash(Stage::TrainControl))
    }

    fn fit_stats(&self, dataset: &DetectionDataset, out: &Path) -> Result<()> {
        LayoutStats::fit(dataset, Some(self.list_len(dataset)))?.save(&out.join(STATS_FILE))
    }

    fn synthesize(&self, out: &Path) -> Result<()> {
        let c = &self.config;
        let model = self.load_model(Stage::TrainControl)?;
        let stats = self.load_stats()?;
        let pool = self.load_pool(stats.categories.clone())?;
        let scene = self.scene_name()?;
        let size = model.config.image_size;
        let n = model.config.list_len;
        let images_dir = out.join(IMAGES_DIR);
        fs::create_dir_all(&images_dir)?;
        let sampler = stats.sampler();
        let schedule = self.schedule()?;
        let mut records = Vec::with_capacity(c.synthesize.count);
        let batch = c.synthesize.batch_size.max(1);
        for start in (0..c.synthesize.count).step_by(batch) {
            let end = (start + batch).min(c.synthesize.count);
            let mut triplets = Vec::new();
            let mut rngs = Vec::new();
            for i in start..end {
                let mut rng = derive_rng(c.seed, "synthesize", i as u64);
                let pseudo = sampler.sample((size, size), &mut rng);
                triplets.push(build_condition_triplet(&pseudo, &stats.categories, &scene, &pool, n, &mut rng)?);
                rngs.push(rng);
                records.push(LabelRecord {
                    name: format!("synth_{i:05}"),
                    label: pseudo,
                    dropped: false,
                });
            }
            let images = sample_batch(&model, &triplets_to_cond(&triplets)?, &schedule, c.diffusion.sampling_steps, &mut rngs)?;
            for (img, rec) in images.iter().zip(&records[start..end]) {
                img.save(images_dir.join(format!("{}.png", rec.name)))?;
            }
            log::info!("synthesize: {end}/{}", c.synthesize.count);
        }
        write_records(&out.join(LABELS_FILE), &records)
    }

    fn scene_name(&self) -> Result<String> {
        Ok(self.load_dataset()?.scene_name)
    }

    fn synthesized(&self) -> Result<Vec<(LabelRecord, RgbImage)>> {
        let dir = self.stage_dir(Stage::Synthesize);
        read_records(&dir.join(LABELS_FILE))?
            .into_iter()
            .map(|r| {
                let img = image::open(dir.join(IMAGES_DIR).join(format!("{}.png", r.name)))?.to_rgb8();
                Ok((r, img))
            })
            .collect()
    }

    fn filter(&self, dataset: &DetectionDataset, out: &Path) -> Result<()> {
        let c = &self.config;
        let dcfg = &c.filter.discriminator;
        let mut rng = derive_rng(c.seed, "patches", 0);
        let patches = crop_patches(dataset, dcfg.per_image_bg, dcfg.patch_size, &mut rng);
        let (mut disc, mut disc_report) = train_discriminator(
            &patches,
            &DiscriminatorConfig {
                seed: derive_seed(c.seed, "discriminator", dcfg.seed),
                ..dcfg.clone()
            },
        )?;
        if let Some(tau) = c.filter.tau {
            disc.threshold = tau;
            disc_report.threshold = tau;
        }
        log::info!(
            "discriminator: test accuracy {:.3}, val accuracy {:.3}, tau {:.3}",
            disc_report.test_accuracy,
            disc_report.val_accuracy,
            disc.threshold
        );
        disc.save(&out.join(DISC_FILE))?;

        let mut report = SynthesisReport {
            requested: c.synthesize.count,
            discriminator: Some(disc_report),
            ..SynthesisReport::default()
        };
        let mut decisions = BufWriter::new(fs::File::create(out.join("decisions.jsonl"))?);
        let mut kept = Vec::new();
        for (rec, img) in self.synthesized()? {
            report.generated += 1;
            report.boxes_requested += rec.label.len();
            let outcome = filter_pseudo_labels(&img, &rec.label, &disc)?;
            for d in &outcome.decisions {
                serde_json::to_writer(&mut decisions, &DecisionLine { image: &rec.name, decision: d })?;
                decisions.write_all(b"\n")?;
            }
            let (label, dropped) = if c.filter.enabled {
                (outcome.label.clone(), outcome.drop_image)
            } else {
                (rec.label.clone(), false)
            };
            report.boxes_kept += outcome.label.len();
            if outcome.drop_image {
                report.dropped += 1;
            } else if outcome.removed() > 0 {
                report.partially_filtered += 1;
            } else {
                report.intact += 1;
            }
            kept.push(LabelRecord {
                name: rec.name,
                label,
                dropped,
            });
        }
        decisions.flush()?;
        report.realization_rate = (report.boxes_requested > 0).then(|| report.boxes_kept as f64 / report.boxes_requested as f64);
        debug_assert!(report.accounting_holds());
        write_records(&out.join(LABELS_FILE), &kept)?;
        fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
        Ok(())
    }

    /// The filtered synthetic dataset, dropped images excluded.
    pub fn filtered_dataset(&self) -> Result<DetectionDataset> {
        let stats = self.load_stats()?;
        let mut ds = DetectionDataset::new(stats.categories.clone(), self.scene_name()?, Split::Train)?;
        let records = read_records(&self.stage_dir(Stage::Filter).join(LABELS_FILE))?;
        let images = self.stage_dir(Stage::Synthesize).join(IMAGES_DIR);
        for r in records.into_iter().filter(|r| !r.dropped) {
            let pixels = image::open(images.join(format!("{}.png", r.name)))?.to_rgb8();
            ds.items.push(LabeledImage {
                name: r.name,
                pixels,
                annotations: r.label.annotations,
            });
        }
        Ok(ds)
    }

    fn export(&self, out: &Path) -> Result<()> {
        export_yolo_dataset(&self.filtered_dataset()?, out)
    }

    pub fn load_report(&self, stage: Stage) -> Result<SynthesisReport> {
        Ok(serde_json::from_str(&fs::read_to_string(self.stage_dir(stage).join(REPORT_FILE))?)?)
    }

    pub fn load_discriminator(&self) -> Result<Discriminator> {
        Discriminator::load(&self.stage_dir(Stage::Filter).join(DISC_FILE))
    }

    /// Realization rate of single-object layouts sampled with and without
    /// layout control.
    fn single_object_rates(&self, disc: &Discriminator, out: &Path) -> Result<(Option<f64>, Option<f64>)> {
        let c = &self.config;
        let count = c.eval.single_object_layouts;
        let model = self.load_model(Stage::TrainControl)?;
        let stats = self.load_stats()?;
        let pool = self.load_pool(stats.categories.clone())?;
        let scene = self.scene_name()?;
        let covered: Vec<usize> = (0..stats.categories.len()).filter(|&k| stats.boxes.get(k).is_some()).collect();
        if count == 0 || covered.is_empty() {
            return Ok((None, None));
        }
        let size = model.config.image_size;
        let schedule = self.schedule()?;
        let batch = c.synthesize.batch_size.max(1);
        let (mut controlled, mut baseline) = (Vec::new(), Vec::new());
        let mut labels: Vec<PseudoLabel> = Vec::new();
        for start in (0..count).step_by(batch) {
            let end = (start + batch).min(count);
            let mut triplets: Vec<ConditionTriplet> = Vec::new();
            let (mut rngs, mut base_rngs) = (Vec::new(), Vec::new());
            for j in start..end {
                let mut rng = derive_rng(c.seed, "eval/single", j as u64);
                let k = covered[j % covered.len()];
                let bbox = sample_bbox(stats.boxes.get(k).expect("covered"), (size, size), &mut rng);
                let pseudo = PseudoLabel {
                    annotations: vec![Annotation::new(k, bbox)],
                    image_size: (size, size),
                };
                triplets.push(build_condition_triplet(&pseudo, &stats.categories, &scene, &pool, model.config.list_len, &mut rng)?);
                rngs.push(rng);
                base_rngs.push(derive_rng(c.seed, "eval/baseline", j as u64));
                labels.push(pseudo);
            }
            let prompts = triplets.iter().map(|t| t.global_prompt.clone()).collect();
            controlled.extend(sample_batch(&model, &triplets_to_cond(&triplets)?, &schedule, c.diffusion.sampling_steps, &mut rngs)?);
            baseline.extend(sample_batch(&model, &ModelCond::prompts_only(prompts), &schedule, c.diffusion.sampling_steps, &mut base_rngs)?);
        }
        let rate = |images: &[RgbImage], tag: &str| -> Result<f64> {
            let dir = out.join(tag);
            fs::create_dir_all(&dir)?;
            let mut hits = 0usize;
            for (j, (img, pseudo)) in images.iter().zip(&labels).enumerate() {
                img.save(dir.join(format!("{j:04}.png")))?;
                let scores = score_boxes(img, &[pseudo.annotations[0].bbox], disc)?;
                hits += (scores[0] >= disc.threshold) as usize;
            }
            Ok(hits as f64 / images.len() as f64)
        };
        Ok((Some(rate(&controlled, "single_controlled")?), Some(rate(&baseline, "single_baseline")?)))
    }

    fn eval(&self, dataset: &DetectionDataset, out: &Path) -> Result<()> {
        let disc = self.load_discriminator()?;
        let mut report = self.load_report(Stage::Filter)?;
        let exported = parse_yolo_dataset(&self.stage_dir(Stage::Export))?;
        if exported.num_annotations() > 0 {
            report.exported_positive_rate = Some(layout_consistency(&exported, &disc)?);
        }
        if self.config.eval.fid {
            if exported.items.is_empty() {
                log::warn!("no synthesized images survived filtering; skipping FID");
            } else {
                let real: Vec<RgbImage> = dataset.items.iter().map(|i| i.pixels.clone()).collect();
                let synth: Vec<RgbImage> = exported.items.iter().map(|i| i.pixels.clone()).collect();
                let fid = compute_fid(&real, &synth, &disc)?;
                report.fid = Some(fid.fid);
                report.fid_extractor = Some(fid.extractor);
            }
        }
        let (single, base) = self.single_object_rates(&disc, out)?;
        report.single_object_rate = single;
        report.baseline_single_object_rate = base;
        fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
        Ok(())
    }

    /// Report of the eval stage with per-stage wall-clock from the manifest.
    /// Timings stay out of the stage outputs so their hashes are reproducible.
    pub fn final_report(&self) -> Result<SynthesisReport> {
        let mut report = self.load_report(Stage::Eval)?;
        let manifest = Manifest::load(self.work_dir())?;
        report.stage_seconds = manifest.stages.iter().map(|(k, r)| (k.clone(), r.seconds)).collect();
        Ok(report)
    }
}

/// Runs synthesize, filter and export (their upstream stages must be
/// complete) and returns the exported dataset with its report.
pub fn synthesize_dataset(pipeline: &Pipeline) -> Result<(DetectionDataset, SynthesisReport)> {
    for stage in [Stage::Synthesize, Stage::Filter, Stage::Export] {
        pipeline.run_stage(stage)?;
    }
    let ds = parse_yolo_dataset(&pipeline.stage_dir(Stage::Export))?;
    Ok((ds, pipeline.load_report(Stage::Filter)?))
}
