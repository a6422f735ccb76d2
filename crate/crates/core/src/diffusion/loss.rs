use candle_core::Tensor;

use crate::error::{Error, Result};

use super::model::NoisePredictor;
use super::schedule::{forward_noise, NoiseSchedule};

/// One noised training batch: clean images, timesteps, noise and condition.
#[derive(Debug, Clone)]
pub struct LossBatch<C> {
    pub x0: Tensor,
    pub t: Vec<usize>,
    pub eps: Tensor,
    pub cond: C,
}

/// Per-element squared error between `eps` and the model's prediction.
pub fn squared_error<M: NoisePredictor>(
    model: &M,
    batch: &LossBatch<M::Cond>,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let x_t = forward_noise(&batch.x0, &batch.t, &batch.eps, schedule)?;
    let pred = model.predict_noise(&x_t, &batch.t, &batch.cond)?;
    Ok((pred - &batch.eps)?.sqr()?)
}

pub fn reconstruction_loss<M: NoisePredictor>(
    model: &M,
    batch: &LossBatch<M::Cond>,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    Ok(squared_error(model, batch, schedule)?.mean_all()?)
}

/// `L_obj + lambda * L_scene`
pub fn dual_finetune_loss<M: NoisePredictor>(
    model: &M,
    objects: &LossBatch<M::Cond>,
    scenes: &LossBatch<M::Cond>,
    lambda: f64,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let obj = reconstruction_loss(model, objects, schedule)?;
    let scene = reconstruction_loss(model, scenes, schedule)?;
    Ok((obj + (scene * lambda)?)?)
}

/// `mean(e) + gamma * mean(e * mask)` with `e` the squared error map. The
/// mask is `(B, 1, H, W)`, broadcast over channels, and the masked term is
/// averaged over all elements.
pub fn control_loss<M: NoisePredictor>(
    model: &M,
    batch: &LossBatch<M::Cond>,
    mask: &Tensor,
    gamma: f64,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let e = squared_error(model, batch, schedule)?;
    let (b, _, h, w) = e.dims4()?;
    if mask.dims() != [b, 1, h, w] {
        return Err(Error::ShapeMismatch(format!(
            "mask is {:?}, error map needs ({b}, 1, {h}, {w})",
            mask.dims()
        )));
    }
    let masked = e.broadcast_mul(&mask.to_dtype(e.dtype())?)?.mean_all()?;
    Ok((e.mean_all()? + (masked * gamma)?)?)
}
