use std::str::FromStr;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 2e-2;
pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::BadSchedule(format!("unknown schedule kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// `f(t) = cos^2(((t / T) + s) / (1 + s) * pi / 2)`
pub fn cosine_alpha_bar_fn(t: f64, total: f64) -> f64 {
    let v = ((t / total + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos();
    v * v
}

pub fn make_noise_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::BadSchedule(format!("need at least 2 steps, got {steps}")));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / (steps - 1) as f64)
            .collect(),
        ScheduleKind::Cosine => {
            let total = steps as f64;
            (0..steps)
                .map(|i| {
                    let ratio = cosine_alpha_bar_fn(i as f64 + 1.0, total) / cosine_alpha_bar_fn(i as f64, total);
                    (1.0 - ratio).min(MAX_BETA)
                })
                .collect()
        }
    };
    let alpha_bar = betas
        .iter()
        .scan(1.0, |acc, b| {
            *acc *= 1.0 - b;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { kind, betas, alpha_bar })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// Descending timesteps visited by a sampler taking `steps` steps.
    pub fn sampling_timesteps(&self, steps: usize) -> Vec<usize> {
        let total = self.len();
        let steps = steps.clamp(1, total);
        if steps == total {
            return (0..total).rev().collect();
        }
        let mut ts: Vec<usize> = (0..steps)
            .map(|i| ((i as f64) * (total - 1) as f64 / (steps - 1).max(1) as f64).round() as usize)
            .collect();
        ts.dedup();
        ts.reverse();
        ts
    }

    /// `(sqrt(alpha_bar[t]), sqrt(1 - alpha_bar[t]))`
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }
}

/// `x_t = sqrt(alpha_bar[t]) x0 + sqrt(1 - alpha_bar[t]) eps`, one `t` per
/// batch item.
pub fn forward_noise(x0: &Tensor, t: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let b = x0.dim(0)?;
    if t.len() != b {
        return Err(Error::ShapeMismatch(format!("{} timesteps for batch of {b}", t.len())));
    }
    if x0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch(format!(
            "x0 is {:?}, eps is {:?}",
            x0.dims(),
            eps.dims()
        )));
    }
    let mut bshape = vec![1usize; x0.rank()];
    bshape[0] = b;
    let (a, s): (Vec<f64>, Vec<f64>) = t.iter().map(|&t| schedule.coefficients(t)).unzip();
    let a = Tensor::from_vec(a, bshape.as_slice(), &Device::Cpu)?.to_dtype(x0.dtype())?;
    let s = Tensor::from_vec(s, bshape.as_slice(), &Device::Cpu)?.to_dtype(x0.dtype())?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_schedule() {
        let s = make_noise_schedule(1000, ScheduleKind::Linear).unwrap();
        assert!((s.alpha_bar[0] - 0.9999).abs() < 1e-12);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas.iter().all(|&b| b > 0.0 && b < 1.0));
        assert!((s.betas[999] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn two_step_schedule() {
        let s = make_noise_schedule(2, ScheduleKind::Linear).unwrap();
        assert_eq!(s.betas, vec![1e-4, 2e-2]);
        assert_eq!(s.alpha_bar, vec![1.0 - 1e-4, (1.0 - 1e-4) * (1.0 - 2e-2)]);
        assert!(matches!(make_noise_schedule(1, ScheduleKind::Linear), Err(Error::BadSchedule(_))));
        assert!(matches!(make_noise_schedule(0, ScheduleKind::Cosine), Err(Error::BadSchedule(_))));
    }

    #[test]
    fn cosine_matches_closed_form() {
        let total = 1000;
        let s = make_noise_schedule(total, ScheduleKind::Cosine).unwrap();
        let f0 = cosine_alpha_bar_fn(0.0, total as f64);
        // the final step is clipped at MAX_BETA
        for t in 0..total - 1 {
            let want = cosine_alpha_bar_fn(t as f64 + 1.0, total as f64) / f0;
            assert!((s.alpha_bar[t] - want).abs() < 1e-12, "t = {t}");
        }
        assert_eq!(s.betas[total - 1], MAX_BETA);
    }

    #[test]
    fn strided_timesteps() {
        let s = make_noise_schedule(1000, ScheduleKind::Linear).unwrap();
        let ts = s.sampling_timesteps(50);
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (999, 0));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.sampling_timesteps(1000).len(), 1000);
    }

    #[test]
    fn forward_noise_endpoints() {
        let sched = NoiseSchedule {
            kind: ScheduleKind::Linear,
            betas: vec![0.0, 1.0],
            alpha_bar: vec![1.0, 0.0],
        };
        let x0 = Tensor::new(&[[1.5f64, -2.0], [0.25, 3.0]], &Device::Cpu).unwrap();
        let eps = Tensor::new(&[[0.3f64, 0.7], [-1.1, 0.2]], &Device::Cpu).unwrap();
        let a = forward_noise(&x0, &[0, 1], &eps, &sched).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(a[0], vec![1.5, -2.0]);
        assert_eq!(a[1], vec![-1.1, 0.2]);
    }
}
