use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{DenoiserConfig, OptimizerConfig, ScheduleKind};
use crate::error::{Error, Result};
use crate::label_filter::DiscriminatorConfig;

/// Where the training corpus comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Procedural shapes corpus.
    Shapes,
    /// YOLO-layout directory at `data.path`.
    Yolo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    /// Number of shapes images.
    pub images: usize,
    /// Replaces the scene name of the corpus when set.
    pub scene: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Shapes,
            path: None,
            images: 200,
            scene: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    /// `T`.
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    pub sampling_steps: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            schedule: ScheduleKind::Linear,
            sampling_steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub steps: usize,
    /// Weight of the scene branch.
    pub lambda: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            lambda: 1.0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    /// `P`, images per category.
    pub per_class: usize,
    pub batch_size: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            per_class: 500,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    pub steps: usize,
    /// Foreground weight.
    pub gamma: f64,
    pub freeze_base: bool,
    pub optimizer: OptimizerConfig,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            gamma: 25.0,
            freeze_base: false,
            optimizer: OptimizerConfig {
                batch_size: 4,
                ..OptimizerConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct LayoutConfig {
    /// `N`; the largest object count of a training image when unset.
    pub max_objects: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesizeConfig {
    /// `M`, images to synthesize.
    pub count: usize,
    pub batch_size: usize,
}

impl Default for SynthesizeConfig {
    fn default() -> Self {
        Self {
            count: 5000,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// When false every box is kept; the discriminator is still trained for
    /// evaluation.
    pub enabled: bool,
    /// `τ`; chosen on the validation patches when unset.
    pub tau: Option<f64>,
    pub discriminator: DiscriminatorConfig,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            tau: None,
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub fid: bool,
    /// Single-object layouts generated with and without layout control.
    pub single_object_layouts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fid: true,
            single_object_layouts: 96,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub work_dir: PathBuf,
    pub data: DataConfig,
    pub model: DenoiserConfig,
    pub diffusion: DiffusionConfig,
    pub finetune: FinetuneConfig,
    pub pool: PoolConfig,
    pub control: ControlConfig,
    pub layout: LayoutConfig,
    pub synthesize: SynthesizeConfig,
    pub filter: FilterConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            work_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: DenoiserConfig::default(),
            diffusion: DiffusionConfig::default(),
            finetune: FinetuneConfig::default(),
            pool: PoolConfig::default(),
            control: ControlConfig::default(),
            layout: LayoutConfig::default(),
            synthesize: SynthesizeConfig::default(),
            filter: FilterConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

pub const PRESETS: [&str; 3] = ["specific-domain", "general-domain", "toy"];

impl PipelineConfig {
    /// Domain-specific datasets: λ = 1, γ = 25, P = 500.
    pub fn specific_domain() -> Self {
        Self::default()
    }

    /// Broad-coverage datasets: no separate fine-tuning, γ = 10.
    pub fn general_domain() -> Self {
        let mut c = Self::default();
        c.finetune.steps = 0;
        c.control.gamma = 10.0;
        c
    }

    /// Shapes corpus sized for one CPU core.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.work_dir = PathBuf::from("runs/toy");
        c.finetune.steps = 2000;
        c.finetune.optimizer = OptimizerConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            ..OptimizerConfig::default()
        };
        c.control.steps = 4000;
        c.control.optimizer = c.finetune.optimizer.clone();
        c.pool.per_class = 16;
        c.pool.batch_size = 8;
        c.synthesize.count = 200;
        c.synthesize.batch_size = 8;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "specific-domain" => Ok(Self::specific_domain()),
            "general-domain" => Ok(Self::general_domain()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Parses a config. A top-level `preset` key selects the base values that
    /// the rest of the file overrides; `overrides` are dotted `key=value`
    /// pairs applied last.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let base = match user.remove("preset") {
            Some(toml::Value::String(name)) => Self::preset(&name)?,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => Self::default(),
        };
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.work_dir.is_relative() {
            cfg.work_dir = base.join(&cfg.work_dir);
        }
        if let Some(p) = &cfg.data.path {
            if p.is_relative() {
                cfg.data.path = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.data.source == DataSource::Yolo && self.data.path.is_none() {
            return Err(Error::Config("data.source = \"yolo\" needs data.path".into()));
        }
        if self.diffusion.timesteps < 2 {
            return Err(Error::Config("diffusion.timesteps must be at least 2".into()));
        }
        if self.diffusion.sampling_steps == 0 {
            return Err(Error::Config("diffusion.sampling_steps must be positive".into()));
        }
        if let Some(tau) = self.filter.tau {
            if !(0.0..=1.0).contains(&tau) {
                return Err(Error::Config(format!("filter.tau = {tau} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets a dotted key. The value is read as a TOML literal and falls back to
/// a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for p in path {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_carry_loss_weights() {
        let s = PipelineConfig::preset("specific-domain").unwrap();
        assert_eq!((s.finetune.lambda, s.control.gamma, s.pool.per_class), (1.0, 25.0, 500));
        assert_eq!(PipelineConfig::preset("general-domain").unwrap().control.gamma, 10.0);
        let t = PipelineConfig::preset("toy").unwrap();
        assert_eq!((t.pool.per_class, t.synthesize.count), (16, 200));
        assert!(PipelineConfig::preset("nope").is_err());
    }

    #[test]
    fn file_values_and_overrides_stack() {
        let text = "preset = \"toy\"\nseed = 3\n[control]\ngamma = 5.0\n";
        let c = PipelineConfig::from_toml_str(text, &["control.steps=7".into(), "data.scene=kitchen".into()]).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.control.gamma, 5.0);
        assert_eq!(c.control.steps, 7);
        assert_eq!(c.control.optimizer.learning_rate, 1e-3);
        assert_eq!(c.data.scene.as_deref(), Some("kitchen"));
    }

    #[test]
    fn bad_values_are_config_errors() {
        assert!(matches!(
            PipelineConfig::from_toml_str("", &["filter.tau=2.0".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(PipelineConfig::from_toml_str("seed = \"x\"", &[]), Err(Error::Config(_))));
        assert!(matches!(
            PipelineConfig::from_toml_str("[data]\nsource = \"yolo\"", &[]),
            Err(Error::Config(_))
        ));
    }
}
