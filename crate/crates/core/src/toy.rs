//! Procedural "shapes on a tabletop" detection corpus for tests and demos.

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::seed::derive_rng;
use crate::types::{Annotation, BBox, DetectionDataset, LabeledImage, Split};

pub const SHAPE_CLASSES: [&str; 3] = ["circle", "square", "triangle"];
pub const SHAPE_SCENE: &str = "tabletop";

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesConfig {
    pub images: usize,
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_side: f64,
    pub max_side: f64,
    /// Largest IoU allowed between two objects of one image.
    pub max_iou: f64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            images: 200,
            size: 64,
            min_objects: 1,
            max_objects: 3,
            min_side: 14.0,
            max_side: 26.0,
            max_iou: 0.1,
        }
    }
}

fn base_color(class: usize) -> [f64; 3] {
    match class {
        0 => [215.0, 45.0, 40.0],
        1 => [40.0, 175.0, 60.0],
        _ => [45.0, 80.0, 215.0],
    }
}

/// Light, low-saturation gradient with mild pixel noise.
pub fn background(size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let base: f64 = rng.random_range(170.0..215.0);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-10.0..10.0));
    let (gx, gy): (f64, f64) = (rng.random_range(-25.0..25.0), rng.random_range(-25.0..25.0));
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let u = x as f64 / size as f64 - 0.5;
        let v = y as f64 / size as f64 - 0.5;
        let shade = base + gx * u + gy * v;
        Rgb(std::array::from_fn(|c| {
            (shade + tint[c] + rng.random_range(-6.0..6.0)).clamp(0.0, 255.0) as u8
        }))
    })
}

fn inside(class: usize, b: &BBox, px: f64, py: f64) -> bool {
    match class {
        0 => {
            let (cx, cy) = (b.x + b.w / 2.0, b.y + b.h / 2.0);
            let r = b.w / 2.0;
            (px - cx).powi(2) + (py - cy).powi(2) <= r * r
        }
        1 => px >= b.x && px <= b.right() && py >= b.y && py <= b.bottom(),
        _ => {
            // apex at the top centre, base along the bottom edge
            if py < b.y || py > b.bottom() {
                return false;
            }
            let half = (py - b.y) / b.h * b.w / 2.0;
            let cx = b.x + b.w / 2.0;
            px >= cx - half && px <= cx + half
        }
    }
}

/// Draws a filled shape of `class` into `bbox` with a little shading.
pub fn draw_shape(img: &mut RgbImage, class: usize, bbox: &BBox, rng: &mut ChaCha8Rng) {
    let color = base_color(class);
    let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-20.0..20.0));
    let (l, t, r, b) = bbox.rounded_edges(img.width() as usize, img.height() as usize);
    for y in t..b {
        for x in l..r {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if inside(class, bbox, px, py) {
                let light = 1.0 - 0.25 * (py - bbox.y) / bbox.h;
                let p = std::array::from_fn(|c| ((color[c] + jitter[c]) * light).clamp(0.0, 255.0) as u8);
                img.put_pixel(x as u32, y as u32, Rgb(p));
            }
        }
    }
}

fn place(cfg: &ShapesConfig, placed: &[Annotation], rng: &mut ChaCha8Rng) -> Option<BBox> {
    let size = cfg.size as f64;
    for _ in 0..50 {
        let side: f64 = rng.random_range(cfg.min_side..=cfg.max_side);
        let x: f64 = rng.random_range(0.0..=size - side);
        let y: f64 = rng.random_range(0.0..=size - side);
        let b = BBox::new(x, y, side, side).ok()?;
        if placed.iter().all(|a| a.bbox.iou(&b) <= cfg.max_iou) {
            return Some(b);
        }
    }
    None
}

/// One scene: a background with `min..=max` shapes of random classes.
pub fn shapes_image(cfg: &ShapesConfig, name: String, rng: &mut ChaCha8Rng) -> LabeledImage {
    let mut pixels = background(cfg.size, rng);
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut annotations: Vec<Annotation> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(0..SHAPE_CLASSES.len());
        if let Some(bbox) = place(cfg, &annotations, rng) {
            draw_shape(&mut pixels, class, &bbox, rng);
            annotations.push(Annotation::new(class, bbox));
        }
    }
    LabeledImage {
        name,
        pixels,
        annotations,
    }
}

/// Corpus of `cfg.images` scenes. Image `i` only depends on `(seed, i)`.
pub fn shapes_corpus(cfg: &ShapesConfig, seed: u64) -> Result<DetectionDataset> {
    let mut ds = DetectionDataset::new(
        SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
        SHAPE_SCENE,
        Split::Train,
    )?;
    for i in 0..cfg.images {
        let mut rng = derive_rng(seed, "shapes", i as u64);
        ds.items.push(shapes_image(cfg, format!("shapes_{i:05}"), &mut rng));
    }
    ds.validate()?;
    Ok(ds)
}
