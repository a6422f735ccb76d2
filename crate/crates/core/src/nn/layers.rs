use candle_core::{DType, Module, Result, Tensor, D};
use candle_nn::{GroupNorm, Linear, VarBuilder};

use super::conv::conv2d;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let weight = vb.get_with_hints((c_out, c_in, k, k), "weight", candle_nn::init::DEFAULT_KAIMING_NORMAL)?;
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let bias = vb.get_with_hints(c_out, "bias", candle_nn::Init::Uniform { lo: -bound, up: bound })?;
        Ok(Self { weight, bias, stride, pad: k / 2 })
    }

    /// Convolution whose weights and bias start at zero.
    pub fn zeroed(c_in: usize, c_out: usize, k: usize, vb: VarBuilder) -> Result<Self> {
        let weight = vb.get_with_hints((c_out, c_in, k, k), "weight", candle_nn::init::ZERO)?;
        let bias = vb.get_with_hints(c_out, "bias", candle_nn::init::ZERO)?;
        Ok(Self { weight, bias, stride: 1, pad: k / 2 })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn dtype(&self) -> DType {
        self.weight.dtype()
    }
}

impl Module for Conv2d {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let y = conv2d(xs, &self.weight, self.stride, self.pad)?;
        y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

pub fn group_count(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

pub fn group_norm(channels: usize, vb: VarBuilder) -> Result<GroupNorm> {
    candle_nn::group_norm(group_count(channels), channels, 1e-5, vb)
}

pub fn linear(d_in: usize, d_out: usize, vb: VarBuilder) -> Result<Linear> {
    candle_nn::linear(d_in, d_out, vb)
}

/// Residual block with a time-embedding shift.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(c_in: usize, c_out: usize, time_dim: usize, vb: VarBuilder) -> Result<Self> {
        let skip = if c_in != c_out {
            Some(Conv2d::new(c_in, c_out, 1, 1, vb.pp("skip"))?)
        } else {
            None
        };
        Ok(Self {
            norm1: group_norm(c_in, vb.pp("norm1"))?,
            conv1: Conv2d::new(c_in, c_out, 3, 1, vb.pp("conv1"))?,
            time_proj: linear(time_dim, c_out, vb.pp("time_proj"))?,
            norm2: group_norm(c_out, vb.pp("norm2"))?,
            conv2: Conv2d::new(c_out, c_out, 3, 1, vb.pp("conv2"))?,
            skip,
        })
    }

    pub fn forward(&self, xs: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(xs)?.silu()?)?;
        let t = self.time_proj.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(xs)?,
            None => xs.clone(),
        };
        h + skip
    }
}

/// Single-head cross-attention from spatial features to a token context.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    norm: GroupNorm,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    scale: f64,
}

impl CrossAttention {
    pub fn new(channels: usize, context_dim: usize, inner: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm: group_norm(channels, vb.pp("norm"))?,
            to_q: candle_nn::linear_no_bias(channels, inner, vb.pp("to_q"))?,
            to_k: candle_nn::linear_no_bias(context_dim, inner, vb.pp("to_k"))?,
            to_v: candle_nn::linear_no_bias(context_dim, inner, vb.pp("to_v"))?,
            to_out: linear(inner, channels, vb.pp("to_out"))?,
            scale: 1.0 / (inner as f64).sqrt(),
        })
    }

    /// `xs: (B, C, H, W)`, `context: (B, L, D)`.
    pub fn forward(&self, xs: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = xs.dims4()?;
        let tokens = self.norm.forward(xs)?.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let q = self.to_q.forward(&tokens)?;
        let k = self.to_k.forward(context)?;
        let v = self.to_v.forward(context)?;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? * self.scale)?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = self.to_out.forward(&attn.matmul(&v)?)?;
        let out = out.transpose(1, 2)?.reshape((b, c, h, w))?;
        xs + out
    }
}

/// Sinusoidal embedding of (possibly fractional) timesteps, `(B, dim)`.
pub fn timestep_embedding(timesteps: &[f64], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t * freq).cos());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t * freq).sin());
        }
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Tensor::from_vec(data, (timesteps.len(), dim), &candle_core::Device::Cpu)?.to_dtype(dtype)
}

/// `(B, C, H, W) -> (B, C*f*f, H/f, W/f)`
pub fn pixel_unshuffle(xs: &Tensor, f: usize) -> Result<Tensor> {
    let (b, c, h, w) = xs.dims4()?;
    xs.reshape((b, c, h / f, f, w / f, f))?
        .permute((0, 1, 3, 5, 2, 4))?
        .reshape((b, c * f * f, h / f, w / f))
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(xs: &Tensor, f: usize) -> Result<Tensor> {
    let (b, cff, h, w) = xs.dims4()?;
    let c = cff / (f * f);
    xs.reshape((b, c, f, f, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, c, h * f, w * f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn shuffle_roundtrip() {
        let x = Tensor::arange(0f32, 2.0 * 3.0 * 4.0 * 6.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 3, 4, 6))
            .unwrap();
        let y = pixel_unshuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), &[2, 12, 2, 3]);
        let z = pixel_shuffle(&y, 2).unwrap();
        assert_eq!(x.to_vec3::<f32>().is_err(), true);
        let a: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = z.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unshuffle_groups_neighbours() {
        let x = Tensor::arange(0f32, 16.0, &Device::Cpu).unwrap().reshape((1, 1, 4, 4)).unwrap();
        let y = pixel_unshuffle(&x, 2).unwrap();
        // channel 0 holds the top-left pixel of every 2x2 cell
        let c0: Vec<f32> = y.get(0).unwrap().get(0).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(c0, vec![0.0, 2.0, 8.0, 10.0]);
    }
}
