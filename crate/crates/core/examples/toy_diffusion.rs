//! Fine-tune a small denoiser on the shapes corpus for a few hundred steps
//! and sample from object and scene prompts.

use candle_core::DType;
use odgen::diffusion::{
    make_noise_schedule, sample_batch, train_finetune, DenoiserConfig, DenoiserModel, ModelCond, OptimizerConfig,
    ScheduleKind, TrainOptions,
};
use odgen::seed::derive_rng;
use odgen::toy::{shapes_corpus, ShapesConfig};

fn main() -> odgen::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let ds = shapes_corpus(&ShapesConfig { images: 60, ..Default::default() }, 0)?;
    let cfg = DenoiserConfig {
        channels: [16, 16, 16],
        time_dim: 16,
        attn_dim: 16,
        vocab: 64,
        text_dim: 16,
        ..Default::default()
    };
    let model = DenoiserModel::new(cfg, 0, DType::F32)?;
    let schedule = make_noise_schedule(1000, ScheduleKind::Linear)?;
    let opts = TrainOptions {
        steps,
        optimizer: OptimizerConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            ..Default::default()
        },
        log_every: 50,
        ..Default::default()
    };
    let report = train_finetune(&model, &ds, 1.0, &schedule, &opts, None)?;
    println!("probe loss {:.4} -> {:.4}", report.probe_loss_start, report.probe_loss_end);

    let prompts = vec!["a circle".to_string(), "a square".to_string(), "a tabletop".to_string()];
    let mut rngs: Vec<_> = (0..prompts.len()).map(|i| derive_rng(0, "example", i as u64)).collect();
    let images = sample_batch(&model, &ModelCond::prompts_only(prompts.clone()), &schedule, 25, &mut rngs)?;
    for (p, img) in prompts.iter().zip(images) {
        let path = std::env::temp_dir().join(format!("odgen-{}.png", p.replace(' ', "_")));
        img.save(&path)?;
        println!("{p:>12} -> {}", path.display());
    }
    Ok(())
}
