use std::path::Path;

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::RgbImage;
use rand::Rng;

use crate::error::{Error, Result};
use crate::stats::PseudoLabel;
use crate::types::BBox;

use super::text::{build_global_prompt, build_text_list, TextList};

/// `H x W x 3` float image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Canvas {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Pixel positions with at least one nonzero channel.
    pub fn nonzero_pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if (0..3).any(|c| self.get(y, x, c) != 0.0) {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

/// Pixel rectangle `(left, top, width, height)` a box is pasted into.
pub fn paste_rect(bbox: &BBox, height: usize, width: usize) -> Result<(usize, usize, usize, usize)> {
    let left = (bbox.x.round().max(0.0) as usize).min(width);
    let top = (bbox.y.round().max(0.0) as usize).min(height);
    let w = (bbox.w.round().max(0.0) as usize).min(width - left);
    let h = (bbox.h.round().max(0.0) as usize).min(height - top);
    if w == 0 || h == 0 {
        return Err(Error::EmptyBox);
    }
    Ok((left, top, w, h))
}

/// Resize `patch` bilinearly into `bbox` on an otherwise empty canvas.
pub fn paste_on_canvas(patch: &RgbImage, bbox: &BBox, height: usize, width: usize) -> Result<Canvas> {
    if patch.width() == 0 || patch.height() == 0 {
        return Err(Error::InvalidBox("empty patch".into()));
    }
    let (left, top, w, h) = paste_rect(bbox, height, width)?;
    let resized = image::imageops::resize(patch, w as u32, h as u32, FilterType::Triangle);
    let mut canvas = Canvas::zeros(height, width);
    for (px, py, p) in resized.enumerate_pixels() {
        let base = ((top + py as usize) * width + left + px as usize) * 3;
        for c in 0..3 {
            canvas.data[base + c] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(canvas)
}

/// One canvas per object, padded with empty canvases.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageList {
    pub canvases: Vec<Canvas>,
}

impl ImageList {
    pub fn len(&self) -> usize {
        self.canvases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.canvases.is_empty()
    }

    pub fn size(&self) -> Result<(usize, usize)> {
        let first = self
            .canvases
            .first()
            .ok_or_else(|| Error::ShapeMismatch("image list is empty".into()))?;
        for (i, c) in self.canvases.iter().enumerate() {
            if (c.height, c.width) != (first.height, first.width) || c.data.len() != c.height * c.width * 3 {
                return Err(Error::ShapeMismatch(format!(
                    "canvas {i} is {}x{}, canvas 0 is {}x{}",
                    c.height, c.width, first.height, first.width
                )));
            }
        }
        Ok((first.height, first.width))
    }

    /// Channel-wise concatenation, `(3N, H, W)`.
    pub fn to_chw(&self) -> Result<Vec<f32>> {
        let (h, w) = self.size()?;
        let mut out = Vec::with_capacity(self.len() * 3 * h * w);
        for canvas in &self.canvases {
            for c in 0..3 {
                out.extend(canvas.data.iter().skip(c).step_by(3));
            }
        }
        Ok(out)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let (h, w) = self.size()?;
        Ok(Tensor::from_vec(self.to_chw()?, (self.len() * 3, h, w), &Device::Cpu)?)
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut canvases: Vec<Canvas> = order.iter().map(|&i| self.canvases[i].clone()).collect();
        canvases.extend(self.canvases[order.len()..].iter().cloned());
        Self { canvases }
    }
}

/// Batch of image lists as `(B, 3N, H, W)`.
pub fn stack_image_lists(lists: &[ImageList]) -> Result<Tensor> {
    let tensors = lists.iter().map(ImageList::to_tensor).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&tensors, 0)?)
}

/// Generated object images per category.
#[derive(Debug, Clone, Default)]
pub struct ForegroundPool {
    pub categories: Vec<String>,
    pub images: Vec<Vec<RgbImage>>,
}

impl ForegroundPool {
    pub fn new(categories: Vec<String>) -> Self {
        let images = vec![Vec::new(); categories.len()];
        Self { categories, images }
    }

    pub fn push(&mut self, category: usize, img: RgbImage) {
        self.images[category].push(img);
    }

    pub fn get(&self, category: usize) -> &[RgbImage] {
        self.images.get(category).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn uncovered(&self) -> Vec<&str> {
        self.categories
            .iter()
            .zip(&self.images)
            .filter(|(_, imgs)| imgs.is_empty())
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn total(&self) -> usize {
        self.images.iter().map(Vec::len).sum()
    }

    /// Writes `<dir>/<class>/<idx>.png`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (name, imgs) in self.categories.iter().zip(&self.images) {
            let sub = dir.join(name);
            std::fs::create_dir_all(&sub)?;
            for (i, img) in imgs.iter().enumerate() {
                img.save(sub.join(format!("{i}.png")))?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path, categories: Vec<String>) -> Result<Self> {
        let mut pool = Self::new(categories);
        for (k, name) in pool.categories.clone().iter().enumerate() {
            let sub = dir.join(name);
            if !sub.is_dir() {
                continue;
            }
            let mut files: Vec<(usize, std::path::PathBuf)> = std::fs::read_dir(&sub)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter_map(|p| {
                    let idx = p.file_stem()?.to_str()?.parse().ok()?;
                    (p.extension()? == "png").then_some((idx, p))
                })
                .collect();
            files.sort();
            for (_, p) in files {
                pool.push(k, image::open(&p)?.to_rgb8());
            }
        }
        Ok(pool)
    }
}

pub fn build_image_list<R: Rng + ?Sized>(
    pseudo: &PseudoLabel,
    pool: &ForegroundPool,
    n: usize,
    rng: &mut R,
) -> Result<ImageList> {
    if pseudo.len() > n {
        return Err(Error::Overflow {
            len: pseudo.len(),
            capacity: n,
        });
    }
    let (h, w) = pseudo.image_size;
    let mut canvases = Vec::with_capacity(n);
    for a in &pseudo.annotations {
        let candidates = pool.get(a.category_id);
        if candidates.is_empty() {
            let name = pool
                .categories
                .get(a.category_id)
                .cloned()
                .unwrap_or_else(|| a.category_id.to_string());
            return Err(Error::PoolMiss(name));
        }
        let patch = &candidates[rng.random_range(0..candidates.len())];
        canvases.push(paste_on_canvas(patch, &a.bbox, h, w)?);
    }
    canvases.resize(n, Canvas::zeros(h, w));
    Ok(ImageList { canvases })
}

/// Everything the control branch is conditioned on for one image.
#[derive(Debug, Clone)]
pub struct ConditionTriplet {
    pub image_list: ImageList,
    pub text_list: TextList,
    pub global_prompt: String,
}

impl ConditionTriplet {
    /// Same permutation applied to both lists.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            image_list: self.image_list.permuted(order),
            text_list: self.text_list.permuted(order),
            global_prompt: self.global_prompt.clone(),
        }
    }
}

pub fn build_condition_triplet<R: Rng + ?Sized>(
    pseudo: &PseudoLabel,
    categories: &[String],
    scene_name: &str,
    pool: &ForegroundPool,
    n: usize,
    rng: &mut R,
) -> Result<ConditionTriplet> {
    Ok(ConditionTriplet {
        text_list: build_text_list(pseudo, categories, n)?,
        image_list: build_image_list(pseudo, pool, n, rng)?,
        global_prompt: build_global_prompt(pseudo, categories, scene_name),
    })
}
