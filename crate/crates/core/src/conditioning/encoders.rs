use candle_core::{Device, Module, Tensor};
use candle_nn::{Embedding, VarBuilder};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::nn::Conv2d;

use super::canvas::{stack_image_lists, ImageList};
use super::text::TextList;

/// Maps strings to fixed-size `L x D` token embeddings.
pub trait TextEmbedder {
    fn seq_len(&self) -> usize;
    fn dim(&self) -> usize;
    /// `(texts.len(), L, D)`
    fn embed(&self, texts: &[&str]) -> Result<Tensor>;
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Learned embedding table indexed by hashed lowercase words, plus a learned
/// positional embedding. Id 0 is padding.
#[derive(Debug, Clone)]
pub struct TokenHashEmbedder {
    table: Embedding,
    pos: Tensor,
    vocab: usize,
    seq_len: usize,
    dim: usize,
}

impl TokenHashEmbedder {
    pub fn new(vocab: usize, seq_len: usize, dim: usize, vb: VarBuilder) -> Result<Self> {
        let table = candle_nn::embedding(vocab, dim, vb.pp("table"))?;
        let pos = vb.get_with_hints((seq_len, dim), "pos", candle_nn::Init::Randn { mean: 0.0, stdev: 0.1 })?;
        Ok(Self {
            table,
            pos,
            vocab,
            seq_len,
            dim,
        })
    }

    pub fn token_ids(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = text
            .split_whitespace()
            .take(self.seq_len)
            .map(|w| 1 + (fnv1a(&w.to_lowercase()) % (self.vocab as u64 - 1)) as u32)
            .collect();
        ids.resize(self.seq_len, 0);
        ids
    }
}

impl TextEmbedder for TokenHashEmbedder {
    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Tensor> {
        let ids: Vec<u32> = texts.iter().flat_map(|t| self.token_ids(t)).collect();
        let ids = Tensor::from_vec(ids, (texts.len(), self.seq_len), &Device::Cpu)?;
        Ok(self.table.forward(&ids)?.broadcast_add(&self.pos)?)
    }
}

/// Embeds every entry separately and stacks them, `(B, N, L, D)`.
pub fn stack_text_lists(lists: &[TextList], embedder: &dyn TextEmbedder) -> Result<Tensor> {
    let n = lists.first().map(TextList::len).unwrap_or(0);
    if lists.iter().any(|l| l.len() != n) {
        return Err(Error::ShapeMismatch("text lists differ in length".into()));
    }
    let texts: Vec<&str> = lists.iter().flat_map(|l| l.entries.iter().map(String::as_str)).collect();
    let (l, d) = (embedder.seq_len(), embedder.dim());
    let emb = embedder.embed(&texts)?;
    if emb.dims() != [texts.len(), l, d] {
        return Err(Error::BadEmbedderShape {
            expected: vec![texts.len(), l, d],
            got: emb.dims().to_vec(),
        });
    }
    Ok(emb.reshape((lists.len(), n, l, d))?)
}

/// Fuses `N` stacked text embeddings into one with four 3x3 convolutions
/// over the `(L, D)` plane.
#[derive(Debug, Clone)]
pub struct TextListEncoder {
    convs: Vec<Conv2d>,
    n: usize,
}

impl TextListEncoder {
    /// Channels `N -> N/2 -> N/4 -> N/8 -> 1`, each at least 1.
    pub fn channels(n: usize) -> [usize; 5] {
        [n, (n / 2).max(1), (n / 4).max(1), (n / 8).max(1), 1]
    }

    pub fn new(n: usize, vb: VarBuilder) -> Result<Self> {
        let ch = Self::channels(n);
        let convs = (0..4)
            .map(|i| Conv2d::new(ch[i], ch[i + 1], 3, 1, vb.pp(format!("conv{i}"))))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { convs, n })
    }

    pub fn list_len(&self) -> usize {
        self.n
    }

    /// `(B, N, L, D) -> (B, L, D)`
    pub fn forward(&self, stacked: &Tensor) -> Result<Tensor> {
        let (b, n, l, d) = stacked.dims4()?;
        if n != self.n {
            return Err(Error::ShapeMismatch(format!("expected {} text entries, got {n}", self.n)));
        }
        let mut h = stacked.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if i + 1 < self.convs.len() {
                h = h.silu()?;
            }
        }
        Ok(h.reshape((b, l, d))?)
    }

    pub fn encode(&self, lists: &[TextList], embedder: &dyn TextEmbedder) -> Result<Tensor> {
        self.forward(&stack_text_lists(lists, embedder)?)
    }
}

const CHANNEL_LADDER: [usize; 11] = [16, 32, 64, 96, 128, 168, 192, 224, 237, 256, 297];
const PRESETS_TOML: &str = include_str!("../../config/channel_presets.toml");

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct ChannelPreset {
    pub name: String,
    pub n: usize,
    pub layers: [usize; 4],
}

#[derive(Deserialize)]
struct PresetFile {
    preset: Vec<ChannelPreset>,
}

/// Presets shipped in `config/channel_presets.toml`.
pub fn channel_presets() -> Vec<ChannelPreset> {
    toml::from_str::<PresetFile>(PRESETS_TOML)
        .expect("bundled channel presets parse")
        .preset
}

/// Output channels of the four image-list encoder layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageEncoderChannels {
    pub n: usize,
    pub layers: [usize; 4],
}

impl ImageEncoderChannels {
    pub fn for_n(n: usize) -> Self {
        match channel_presets().into_iter().find(|p| p.n == n) {
            Some(p) => Self { n, layers: p.layers },
            None => Self::from_rule(n),
        }
    }

    /// First layer: smallest ladder value >= max(16, 3N). The next two step
    /// up the ladder, capped at 256. The last is always 256.
    pub fn from_rule(n: usize) -> Self {
        let at_least = |v: usize| CHANNEL_LADDER.iter().copied().find(|&c| c >= v).unwrap_or(v);
        let above = |v: usize| CHANNEL_LADDER.iter().copied().find(|&c| c > v).unwrap_or(v).min(256);
        let c1 = at_least((3 * n).max(16));
        let c2 = above(c1);
        let c3 = above(c2);
        Self {
            n,
            layers: [c1, c2, c3, 256],
        }
    }

    pub fn input(&self) -> usize {
        3 * self.n
    }
}

/// Strided convolutional encoder from `3N x H x W` canvases to
/// `256 x H/8 x W/8` features.
#[derive(Debug, Clone)]
pub struct ImageListEncoder {
    convs: Vec<Conv2d>,
    channels: ImageEncoderChannels,
}

impl ImageListEncoder {
    pub fn new(channels: ImageEncoderChannels, vb: VarBuilder) -> Result<Self> {
        let ins = [channels.input(), channels.layers[0], channels.layers[1], channels.layers[2]];
        let strides = [2, 2, 2, 1];
        let convs = (0..4)
            .map(|i| Conv2d::new(ins[i], channels.layers[i], 3, strides[i], vb.pp(format!("conv{i}"))))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { convs, channels })
    }

    pub fn channels(&self) -> ImageEncoderChannels {
        self.channels
    }

    /// `(B, 3N, H, W) -> (B, 256, H/8, W/8)`
    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = xs.dims4()?;
        if c != self.channels.input() {
            return Err(Error::ShapeMismatch(format!(
                "image encoder expects {} channels, got {c}",
                self.channels.input()
            )));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::ShapeMismatch(format!("canvas size {h}x{w} is not divisible by 8")));
        }
        let mut h = xs.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if i + 1 < self.convs.len() {
                h = h.silu()?;
            }
        }
        Ok(h)
    }

    pub fn encode(&self, lists: &[ImageList]) -> Result<Tensor> {
        let xs = stack_image_lists(lists)?.to_dtype(self.convs[0].dtype())?;
        self.forward(&xs)
    }
}
