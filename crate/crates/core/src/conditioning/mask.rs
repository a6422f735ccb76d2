use candle_core::{Device, Tensor};

use crate::error::Result;
use crate::types::Annotation;

/// Per-class box counts, `H x W x K` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMask {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub data: Vec<u32>,
}

impl CountMask {
    pub fn get(&self, y: usize, x: usize, k: usize) -> u32 {
        self.data[(y * self.width + x) * self.classes + k]
    }
}

/// Box-count mask used to condition the layout-only baseline.
pub fn boxes_to_mask(annotations: &[Annotation], height: usize, width: usize, classes: usize) -> CountMask {
    let mut data = vec![0u32; height * width * classes];
    for a in annotations {
        let (left, top, right, bottom) = a.bbox.rounded_edges(width, height);
        for y in top..bottom {
            for x in left..right {
                data[(y * width + x) * classes + a.category_id] += 1;
            }
        }
    }
    CountMask {
        height,
        width,
        classes,
        data,
    }
}

/// Binary foreground mask, `H x W`, values 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ForegroundMask {
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn coverage(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// `(1, H, W)`
    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (1, self.height, self.width), &Device::Cpu)?)
    }
}

/// Marks every pixel of a `target` grid covered by a box given in `image`
/// coordinates. Box edges are scaled and rounded outward.
pub fn rasterize_foreground_mask(
    annotations: &[Annotation],
    image: (usize, usize),
    target: (usize, usize),
) -> ForegroundMask {
    let (height, width) = target;
    let mut data = vec![0f32; height * width];
    for a in annotations {
        let (left, top, right, bottom) = a.bbox.scaled_outward_edges(image, target);
        for y in top..bottom {
            data[y * width + left..y * width + right].fill(1.0);
        }
    }
    ForegroundMask { height, width, data }
}
