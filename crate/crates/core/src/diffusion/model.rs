use candle_core::{DType, Module, Tensor};
use candle_nn::{GroupNorm, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    stack_text_lists, ImageEncoderChannels, ImageListEncoder, TextEmbedder, TextList, TextListEncoder,
    TokenHashEmbedder,
};
use crate::diffusion::schedule::{make_noise_schedule, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::nn::layers::{group_norm, linear};
use crate::nn::{pixel_shuffle, pixel_unshuffle, timestep_embedding, Conv2d, CrossAttention, ParamStore, ResBlock};

/// Size of the toy denoiser and its condition encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub image_size: usize,
    /// Channels at the 1/2, 1/4 and 1/8 resolution levels.
    pub channels: [usize; 3],
    pub time_dim: usize,
    pub attn_dim: usize,
    pub vocab: usize,
    pub text_len: usize,
    pub text_dim: usize,
    /// Object list length `N`.
    pub list_len: usize,
    /// Overrides the preset image-encoder channels. Only meant for tiny test
    /// models.
    pub image_encoder_layers: Option<[usize; 4]>,
    /// Noise schedule the model is trained and sampled with.
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    /// Assumed standard deviation of the training pixels (in [-1, 1]).
    pub sigma_data: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: [24, 48, 64],
            time_dim: 64,
            attn_dim: 64,
            vocab: 512,
            text_len: 8,
            text_dim: 64,
            list_len: 3,
            image_encoder_layers: None,
            timesteps: 1000,
            schedule: ScheduleKind::Linear,
            sigma_data: 0.5,
        }
    }
}

impl DenoiserConfig {
    pub fn image_encoder_channels(&self) -> ImageEncoderChannels {
        match self.image_encoder_layers {
            Some(layers) => ImageEncoderChannels {
                n: self.list_len,
                layers,
            },
            None => ImageEncoderChannels::for_n(self.list_len),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return Err(Error::Config(format!("image_size {} must be a positive multiple of 8", self.image_size)));
        }
        if !(self.sigma_data > 0.0) {
            return Err(Error::Config(format!("sigma_data must be positive, got {}", self.sigma_data)));
        }
        if self.list_len == 0 {
            return Err(Error::Config("list_len must be at least 1".into()));
        }
        if self.vocab < 2 || self.text_len == 0 || self.text_dim == 0 {
            return Err(Error::Config("text embedder needs vocab >= 2 and non-empty L x D".into()));
        }
        Ok(())
    }
}

/// Down path shared by the base network and the control branch.
#[derive(Debug, Clone)]
struct Encoder {
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    res0: ResBlock,
    down0: Conv2d,
    res1: ResBlock,
    down1: Conv2d,
    res2: ResBlock,
    attn2: CrossAttention,
    mid: ResBlock,
    mid_attn: CrossAttention,
    time_dim: usize,
}

struct Features {
    temb: Tensor,
    skips: [Tensor; 3],
    mid: Tensor,
}

impl Encoder {
    fn new(cfg: &DenoiserConfig, vb: VarBuilder) -> Result<Self> {
        let [c0, c1, c2] = cfg.channels;
        let td = cfg.time_dim;
        Ok(Self {
            time1: linear(td, td, vb.pp("time1"))?,
            time2: linear(td, td, vb.pp("time2"))?,
            conv_in: Conv2d::new(12, c0, 3, 1, vb.pp("conv_in"))?,
            res0: ResBlock::new(c0, c0, td, vb.pp("res0"))?,
            down0: Conv2d::new(c0, c0, 3, 2, vb.pp("down0"))?,
            res1: ResBlock::new(c0, c1, td, vb.pp("res1"))?,
            down1: Conv2d::new(c1, c1, 3, 2, vb.pp("down1"))?,
            res2: ResBlock::new(c1, c2, td, vb.pp("res2"))?,
            attn2: CrossAttention::new(c2, cfg.text_dim, cfg.attn_dim, vb.pp("attn2"))?,
            mid: ResBlock::new(c2, c2, td, vb.pp("mid"))?,
            mid_attn: CrossAttention::new(c2, cfg.text_dim, cfg.attn_dim, vb.pp("mid_attn"))?,
            time_dim: td,
        })
    }

    fn forward(&self, x_t: &Tensor, t: &[usize], ctx: &Tensor, inject: Option<&Tensor>) -> Result<Features> {
        let ts: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        let temb = timestep_embedding(&ts, self.time_dim, x_t.dtype())?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?;

        let h = self.conv_in.forward(&pixel_unshuffle(x_t, 2)?)?;
        let s0 = self.res0.forward(&h, &temb)?;
        let h = self.down0.forward(&s0)?;
        let s1 = self.res1.forward(&h, &temb)?;
        let mut h = self.down1.forward(&s1)?;
        if let Some(extra) = inject {
            h = (h + extra)?;
        }
        let h = self.res2.forward(&h, &temb)?;
        let s2 = self.attn2.forward(&h, ctx)?;
        let h = self.mid.forward(&s2, &temb)?;
        let mid = self.mid_attn.forward(&h, ctx)?;
        Ok(Features {
            temb,
            skips: [s0, s1, s2],
            mid,
        })
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    up2: ResBlock,
    up2_attn: CrossAttention,
    up1: ResBlock,
    up0: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    input_skip: Conv2d,
    skip_gain: Linear,
}

fn upsample2(xs: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = xs.dims4()?;
    Ok(xs
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, h * 2, w * 2))?)
}

impl Decoder {
    fn new(cfg: &DenoiserConfig, vb: VarBuilder) -> Result<Self> {
        let [c0, c1, c2] = cfg.channels;
        let td = cfg.time_dim;
        Ok(Self {
            up2: ResBlock::new(2 * c2, c2, td, vb.pp("up2"))?,
            up2_attn: CrossAttention::new(c2, cfg.text_dim, cfg.attn_dim, vb.pp("up2_attn"))?,
            up1: ResBlock::new(c2 + c1, c1, td, vb.pp("up1"))?,
            up0: ResBlock::new(c1 + c0, c0, td, vb.pp("up0"))?,
            norm_out: group_norm(c0, vb.pp("norm_out"))?,
            conv_out: Conv2d::zeroed(c0, 12, 3, vb.pp("conv_out"))?,
            input_skip: Conv2d::zeroed(12, 12, 3, vb.pp("input_skip"))?,
            skip_gain: linear(td, 12, vb.pp("skip_gain"))?,
        })
    }

    fn forward(&self, f: &Features, ctx: &Tensor, x_in: &Tensor) -> Result<Tensor> {
        let [s0, s1, s2] = &f.skips;
        let h = self.up2.forward(&Tensor::cat(&[&f.mid, s2], 1)?, &f.temb)?;
        let h = upsample2(&self.up2_attn.forward(&h, ctx)?)?;
        let h = upsample2(&self.up1.forward(&Tensor::cat(&[&h, s1], 1)?, &f.temb)?)?;
        let h = self.up0.forward(&Tensor::cat(&[&h, s0], 1)?, &f.temb)?;
        let h = self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?;
        // linear path around the normalization layers, gated by t
        let gain = (self.skip_gain.forward(&f.temb.silu()?)? + 1.0)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = (h + self.input_skip.forward(&pixel_unshuffle(x_in, 2)?)?.broadcast_mul(&gain)?)?;
        Ok(pixel_shuffle(&h, 2)?)
    }
}

/// Trainable encoder copy plus zero-initialized projections into the base
/// decoder skips.
#[derive(Debug, Clone)]
struct ControlBranch {
    encoder: Encoder,
    cond_in: Conv2d,
    zero_skips: [Conv2d; 3],
    zero_mid: Conv2d,
}

impl ControlBranch {
    fn new(cfg: &DenoiserConfig, cond_channels: usize, vb: VarBuilder) -> Result<Self> {
        let [c0, c1, c2] = cfg.channels;
        Ok(Self {
            encoder: Encoder::new(cfg, vb.pp("enc"))?,
            cond_in: Conv2d::new(cond_channels, c1, 1, 1, vb.pp("cond_in"))?,
            zero_skips: [
                Conv2d::zeroed(c0, c0, 1, vb.pp("zero_s0"))?,
                Conv2d::zeroed(c1, c1, 1, vb.pp("zero_s1"))?,
                Conv2d::zeroed(c2, c2, 1, vb.pp("zero_s2"))?,
            ],
            zero_mid: Conv2d::zeroed(c2, c2, 1, vb.pp("zero_mid"))?,
        })
    }
}

/// Control inputs for a batch: canvases `(B, 3N, H, W)` and one text list
/// per item.
#[derive(Debug, Clone)]
pub struct ControlInput {
    pub canvases: Tensor,
    pub text_lists: Vec<TextList>,
}

/// Per-batch conditioning for [`DenoiserModel`].
#[derive(Debug, Clone)]
pub struct ModelCond {
    pub prompts: Vec<String>,
    pub control: Option<ControlInput>,
}

impl ModelCond {
    pub fn prompts_only(prompts: Vec<String>) -> Self {
        Self { prompts, control: None }
    }
}

/// Anything that predicts the noise added to `x_t`.
pub trait NoisePredictor {
    type Cond;
    fn predict_noise(&self, x_t: &Tensor, t: &[usize], cond: &Self::Cond) -> Result<Tensor>;
}

/// Pixel-space U-Net noise predictor with a control branch.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    store: ParamStore,
    embedder: TokenHashEmbedder,
    base_encoder: Encoder,
    decoder: Decoder,
    control: ControlBranch,
    text_list_encoder: TextListEncoder,
    image_list_encoder: ImageListEncoder,
    schedule: NoiseSchedule,
}

pub const BASE_PREFIX: &str = "unet.";
pub const CONTROL_PREFIX: &str = "control.";
pub const TEXT_PREFIX: &str = "text.";

impl DenoiserModel {
    pub fn new(config: DenoiserConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed, dtype);
        let vb = store.var_builder();
        let image_channels = config.image_encoder_channels();
        let schedule = make_noise_schedule(config.timesteps, config.schedule)?;
        let model = Self {
            embedder: TokenHashEmbedder::new(config.vocab, config.text_len, config.text_dim, vb.pp("text.embedder"))?,
            base_encoder: Encoder::new(&config, vb.pp("unet.enc"))?,
            decoder: Decoder::new(&config, vb.pp("unet.dec"))?,
            control: ControlBranch::new(&config, image_channels.layers[3], vb.pp("control"))?,
            text_list_encoder: TextListEncoder::new(config.list_len, vb.pp("control.text_list"))?,
            image_list_encoder: ImageListEncoder::new(image_channels, vb.pp("control.image_list"))?,
            store,
            config,
            schedule,
        };
        model.reset_control_from_base()?;
        Ok(model)
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn embedder(&self) -> &dyn TextEmbedder {
        &self.embedder
    }

    /// Copies the base encoder weights into the control branch encoder.
    pub fn reset_control_from_base(&self) -> Result<usize> {
        self.store.copy_prefix("unet.enc.", "control.enc.")
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Variables optimized during control training.
    pub fn control_vars(&self, freeze_base: bool) -> Vec<candle_core::Var> {
        self.store
            .vars_with_prefix("")
            .into_iter()
            .filter(|(name, _)| !freeze_base || name.starts_with(CONTROL_PREFIX))
            .map(|(_, v)| v)
            .collect()
    }

    /// Variables optimized during fine-tuning: everything outside the
    /// control branch.
    pub fn base_vars(&self) -> Vec<candle_core::Var> {
        self.store
            .vars_with_prefix("")
            .into_iter()
            .filter(|(name, _)| !name.starts_with(CONTROL_PREFIX))
            .map(|(_, v)| v)
            .collect()
    }

    /// Errors unless `schedule` is the one the model was built for.
    pub fn check_schedule(&self, schedule: &NoiseSchedule) -> Result<()> {
        if schedule != &self.schedule {
            return Err(Error::Config(format!(
                "model expects a {}-step {:?} schedule",
                self.config.timesteps, self.config.schedule
            )));
        }
        Ok(())
    }

    /// Per-item `(c_in, c_skip, c_out)`, each `(B,1,1,1)`. The prediction is
    /// `c_skip * x_t + c_out * F(c_in * x_t)`: `c_skip * x_t` is the best
    /// linear estimate of the noise, and `c_in`, `c_out` keep the network's
    /// input and regression target at unit variance for every `t`.
    fn scalings(&self, t: &[usize], dtype: DType) -> Result<(Tensor, Tensor, Tensor)> {
        let sd2 = self.config.sigma_data * self.config.sigma_data;
        let mut c = [Vec::new(), Vec::new(), Vec::new()];
        for &ti in t {
            let ab = *self.schedule.alpha_bar.get(ti).ok_or_else(|| {
                Error::ShapeMismatch(format!("timestep {ti} outside a {}-step schedule", self.schedule.len()))
            })?;
            let var = ab * sd2 + 1.0 - ab;
            c[0].push(1.0 / var.sqrt());
            c[1].push((1.0 - ab).sqrt() / var);
            c[2].push((ab * sd2 / var).sqrt());
        }
        let b = t.len();
        let col = |v: Vec<f64>| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, (b, 1, 1, 1), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
        };
        let [a, s, o] = c;
        Ok((col(a)?, col(s)?, col(o)?))
    }

    pub fn embed_prompts(&self, prompts: &[String]) -> Result<Tensor> {
        let texts: Vec<&str> = prompts.iter().map(String::as_str).collect();
        Ok(self.embedder.embed(&texts)?.to_dtype(self.store.dtype())?)
    }

    /// Output of the control branch before it is added to the base decoder.
    fn control_features(&self, x_t: &Tensor, t: &[usize], prompt_ctx: &Tensor, input: &ControlInput) -> Result<([Tensor; 3], Tensor)> {
        let dtype = self.store.dtype();
        let spatial = self.image_list_encoder.forward(&input.canvases.to_dtype(dtype)?)?;
        let stacked = stack_text_lists(&input.text_lists, &self.embedder)?.to_dtype(dtype)?;
        let fused = self.text_list_encoder.forward(&stacked)?;
        let ctx = Tensor::cat(&[prompt_ctx, &fused], 1)?;
        let inject = self.control.cond_in.forward(&spatial)?;
        let f = self.control.encoder.forward(x_t, t, &ctx, Some(&inject))?;
        let skips = [
            self.control.zero_skips[0].forward(&f.skips[0])?,
            self.control.zero_skips[1].forward(&f.skips[1])?,
            self.control.zero_skips[2].forward(&f.skips[2])?,
        ];
        Ok((skips, self.control.zero_mid.forward(&f.mid)?))
    }

    pub fn forward(&self, x_t: &Tensor, t: &[usize], cond: &ModelCond) -> Result<Tensor> {
        let b = x_t.dim(0)?;
        if cond.prompts.len() != b || t.len() != b {
            return Err(Error::ShapeMismatch(format!(
                "batch of {b} with {} prompts and {} timesteps",
                cond.prompts.len(),
                t.len()
            )));
        }
        let (c_in, c_skip, c_out) = self.scalings(t, x_t.dtype())?;
        let x_in = x_t.broadcast_mul(&c_in)?;
        let ctx = self.embed_prompts(&cond.prompts)?;
        let mut f = self.base_encoder.forward(&x_in, t, &ctx, None)?;
        if let Some(input) = &cond.control {
            let (skips, mid) = self.control_features(&x_in, t, &ctx, input)?;
            for (s, c) in f.skips.iter_mut().zip(skips) {
                *s = (&*s + c)?;
            }
            f.mid = (&f.mid + mid)?;
        }
        let out = self.decoder.forward(&f, &ctx, &x_in)?;
        Ok((x_t.broadcast_mul(&c_skip)? + out.broadcast_mul(&c_out)?)?)
    }

    pub fn save(&self, path: &std::path::Path, config_hash: &str) -> Result<()> {
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("config_hash".to_string(), config_hash.to_string());
        meta.insert("model_config".to_string(), serde_json::to_string(&self.config)?);
        self.store.save(path, meta)
    }

    /// Loads weights saved by [`DenoiserModel::save`]; returns the stored
    /// config hash.
    pub fn load(&self, path: &std::path::Path) -> Result<String> {
        let meta = self.store.load(path)?;
        if let Some(cfg) = meta.get("model_config") {
            let stored: DenoiserConfig = serde_json::from_str(cfg)?;
            if stored != self.config {
                return Err(Error::Checkpoint(format!("{} was saved for a different model config", path.display())));
            }
        }
        Ok(meta.get("config_hash").cloned().unwrap_or_default())
    }

    /// Builds a model from a checkpoint's stored config.
    pub fn from_checkpoint(path: &std::path::Path, dtype: DType) -> Result<(Self, String)> {
        let bytes = std::fs::read(path)?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let cfg = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get("model_config"))
            .ok_or_else(|| Error::Checkpoint(format!("{} has no model config", path.display())))?;
        let config: DenoiserConfig = serde_json::from_str(cfg)?;
        let model = Self::new(config, 0, dtype)?;
        let hash = model.load(path)?;
        Ok((model, hash))
    }
}

impl NoisePredictor for DenoiserModel {
    type Cond = ModelCond;

    fn predict_noise(&self, x_t: &Tensor, t: &[usize], cond: &ModelCond) -> Result<Tensor> {
        self.forward(x_t, t, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{Canvas, ImageList};
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            image_size: 16,
            channels: [4, 4, 4],
            time_dim: 4,
            attn_dim: 4,
            vocab: 8,
            text_len: 2,
            text_dim: 4,
            list_len: 2,
            image_encoder_layers: Some([4, 4, 4, 8]),
            ..DenoiserConfig::default()
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn default_model_shapes() {
        let cfg = DenoiserConfig::default();
        let model = DenoiserModel::new(cfg, 0, DType::F32).unwrap();
        let x = randn(&[2, 3, 64, 64], 1);
        let cond = ModelCond::prompts_only(vec!["a circle in a tabletop".into(), String::new()]);
        let y = model.forward(&x, &[10, 900], &cond).unwrap();
        assert_eq!(y.dims(), &[2, 3, 64, 64]);
    }

    #[test]
    fn zero_init_contract() {
        let model = DenoiserModel::new(tiny_config(), 3, DType::F32).unwrap();
        let x = randn(&[1, 3, 16, 16], 2);
        let mut canvas = Canvas::zeros(16, 16);
        canvas.data.iter_mut().step_by(7).for_each(|v| *v = 0.8);
        let control = ControlInput {
            canvases: ImageList {
                canvases: vec![canvas, Canvas::zeros(16, 16)],
            }
            .to_tensor()
            .unwrap()
            .unsqueeze(0)
            .unwrap(),
            text_lists: vec![TextList {
                entries: vec!["a circle".into(), String::new()],
            }],
        };
        let prompts = vec!["a circle in a tabletop".to_string()];
        let plain = model.forward(&x, &[500], &ModelCond::prompts_only(prompts.clone())).unwrap();
        let cond = model
            .forward(&x, &[500], &ModelCond { prompts, control: Some(control) })
            .unwrap();
        let diff: f32 = (plain - cond).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn control_copy_matches_base() {
        let model = DenoiserModel::new(tiny_config(), 5, DType::F32).unwrap();
        let a = model.params().get("unet.enc.res1.conv1.weight").unwrap();
        let b = model.params().get("control.enc.res1.conv1.weight").unwrap();
        let d: f32 = (a.as_tensor() - b.as_tensor()).unwrap().abs().unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert_eq!(d, 0.0);
        assert!(model.num_parameters() < 10_000, "{}", model.num_parameters());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let model = DenoiserModel::new(tiny_config(), 5, DType::F32).unwrap();
        model.save(&path, "hash123").unwrap();
        let (back, hash) = DenoiserModel::from_checkpoint(&path, DType::F32).unwrap();
        assert_eq!(hash, "hash123");
        let x = randn(&[1, 3, 16, 16], 9);
        let cond = ModelCond::prompts_only(vec!["a b".into()]);
        let ya = model.forward(&x, &[3], &cond).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let yb = back.forward(&x, &[3], &cond).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(ya, yb);
    }
}
