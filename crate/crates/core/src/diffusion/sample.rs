use candle_core::{DType, Tensor};
use image::RgbImage;
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{ConditionTriplet, ForegroundPool};
use crate::error::{Error, Result};
use crate::seed::derive_rng;

use super::data::{chw_to_image, gaussian};
use super::model::{DenoiserModel, ModelCond};
use super::schedule::NoiseSchedule;
use super::train::triplets_to_cond;

/// Noise for one step, drawn item by item so each image's stream does not
/// depend on how images are batched.
fn batch_noise(rngs: &mut [ChaCha8Rng], size: usize, dtype: DType) -> Result<Tensor> {
    let items = rngs
        .iter_mut()
        .map(|rng| gaussian(&[3, size, size], dtype, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&items, 0)?)
}

/// Ancestral sampling over `steps` strided timesteps. Item `i` of the batch
/// uses `rngs[i]` for all of its noise.
pub fn sample_batch(
    model: &DenoiserModel,
    cond: &ModelCond,
    schedule: &NoiseSchedule,
    steps: usize,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<RgbImage>> {
    model.check_schedule(schedule)?;
    let b = cond.prompts.len();
    if rngs.len() != b {
        return Err(Error::ShapeMismatch(format!("{} rngs for a batch of {b}", rngs.len())));
    }
    if b == 0 {
        return Ok(Vec::new());
    }
    let size = model.config.image_size;
    let dtype = model.params().dtype();
    let ts = schedule.sampling_timesteps(steps);
    let mut x = batch_noise(rngs, size, dtype)?;
    for (k, &t) in ts.iter().enumerate() {
        let eps = model.forward(&x, &vec![t; b], cond)?.detach();
        let ab_t = schedule.alpha_bar[t];
        let ab_prev = ts.get(k + 1).map(|&s| schedule.alpha_bar[s]).unwrap_or(1.0);
        let x0 = ((&x - (eps * (1.0 - ab_t).sqrt())?)? / ab_t.sqrt())?.clamp(-1.0, 1.0)?;
        if k + 1 == ts.len() {
            x = x0;
            break;
        }
        let alpha = ab_t / ab_prev;
        let beta = 1.0 - alpha;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
        let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab_t);
        let mean = ((x0 * c0)? + (&x * ct)?)?;
        let z = batch_noise(rngs, size, dtype)?;
        x = (mean + (z * var.sqrt())?)?;
    }
    let data: Vec<f32> = x.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let per = 3 * size * size;
    Ok(data.chunks(per).map(|c| chw_to_image(c, size)).collect())
}

/// Samples one image conditioned on `triplet`.
pub fn sample_image(
    model: &DenoiserModel,
    triplet: &ConditionTriplet,
    schedule: &NoiseSchedule,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RgbImage> {
    let cond = triplets_to_cond(std::slice::from_ref(triplet))?;
    let mut rngs = [rng.clone()];
    let out = sample_batch(model, &cond, schedule, steps, &mut rngs)?;
    *rng = rngs[0].clone();
    Ok(out.into_iter().next().expect("one image"))
}

/// `per_class` object images per category from the prompt "a <class>",
/// without layout control. Image `i` of class `k` is seeded from
/// `(seed, k, i)`.
pub fn generate_foreground_pool(
    model: &DenoiserModel,
    categories: &[String],
    per_class: usize,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
    batch_size: usize,
) -> Result<ForegroundPool> {
    let mut pool = ForegroundPool::new(categories.to_vec());
    let batch_size = batch_size.max(1);
    for (k, name) in categories.iter().enumerate() {
        let tag = format!("pool/{name}");
        for start in (0..per_class).step_by(batch_size) {
            let end = (start + batch_size).min(per_class);
            let mut rngs: Vec<ChaCha8Rng> = (start..end).map(|i| derive_rng(seed, &tag, i as u64)).collect();
            let cond = ModelCond::prompts_only(vec![format!("a {name}"); end - start]);
            for img in sample_batch(model, &cond, schedule, steps, &mut rngs)? {
                pool.push(k, img);
            }
        }
    }
    Ok(pool)
}
