//! Conversions between dataset images and model tensors.

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::RgbImage;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::types::{Annotation, BBox, DetectionDataset};

/// Resize to `size x size` and map to `[-1, 1]`, channel-major.
pub fn image_to_chw(img: &RgbImage, size: usize) -> Vec<f32> {
    let resized;
    let img = if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        resized = image::imageops::resize(img, size as u32, size as u32, FilterType::Triangle);
        &resized
    };
    let mut out = vec![0f32; 3 * size * size];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * size + x as usize;
        for c in 0..3 {
            out[c * size * size + i] = p.0[c] as f32 / 127.5 - 1.0;
        }
    }
    out
}

/// Inverse of [`image_to_chw`] after clamping to `[-1, 1]`.
pub fn chw_to_image(data: &[f32], size: usize) -> RgbImage {
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let i = y as usize * size + x as usize;
        let px = |c: usize| (((data[c * size * size + i].clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Tight crop of `bbox`, rounded to whole pixels.
pub fn crop_box(img: &RgbImage, bbox: &BBox) -> Option<RgbImage> {
    let (l, t, r, b) = bbox.rounded_edges(img.width() as usize, img.height() as usize);
    (r > l && b > t).then(|| image::imageops::crop_imm(img, l as u32, t as u32, (r - l) as u32, (b - t) as u32).to_image())
}

/// A training image at model resolution with boxes in model pixels.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub pixels: Vec<f32>,
    pub annotations: Vec<Annotation>,
}

pub fn scene_samples(dataset: &DetectionDataset, size: usize) -> Vec<SceneSample> {
    dataset
        .items
        .iter()
        .map(|item| {
            let sx = size as f64 / item.width() as f64;
            let sy = size as f64 / item.height() as f64;
            let annotations = item
                .annotations
                .iter()
                .filter_map(|a| {
                    let b = &a.bbox;
                    BBox::new(b.x * sx, b.y * sy, b.w * sx, b.h * sy)
                        .and_then(|b| b.clip(size as f64, size as f64))
                        .ok()
                        .map(|bbox| Annotation::new(a.category_id, bbox))
                })
                .collect();
            SceneSample {
                pixels: image_to_chw(&item.pixels, size),
                annotations,
            }
        })
        .collect()
}

/// Every annotation cropped and resized to `size x size`, with its class.
pub fn object_crops(dataset: &DetectionDataset, size: usize) -> Vec<(Vec<f32>, usize)> {
    dataset
        .items
        .iter()
        .flat_map(|item| {
            item.annotations
                .iter()
                .filter_map(|a| crop_box(&item.pixels, &a.bbox).map(|c| (image_to_chw(&c, size), a.category_id)))
        })
        .collect()
}

pub fn stack_chw(items: &[&[f32]], size: usize, dtype: DType) -> Result<Tensor> {
    let data: Vec<f32> = items.iter().flat_map(|v| v.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (items.len(), 3, size, size), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn gaussian<R: Rng + ?Sized>(shape: &[usize], dtype: DType, rng: &mut R) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}
