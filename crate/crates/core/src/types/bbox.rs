use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel units: top-left corner plus size.
///
/// Coordinates are real-valued; rounding happens only when a box is
/// rasterized. Aspect ratio is always `w / h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite box ({x}, {y}, {w}, {h})")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!("non-positive size {w}x{h}")));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn contained_in(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= width && self.bottom() <= height
    }

    /// Intersection with the image rectangle `[0, width) x [0, height)`.
    ///
    /// The result always satisfies [`BBox::contained_in`] exactly, which
    /// makes clipping idempotent.
    pub fn clip(&self, width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0) {
            return Err(Error::InvalidBox(format!("image size {width}x{height}")));
        }
        if self.contained_in(width, height) {
            return Ok(*self);
        }
        let (x, w) = clip_span(self.x, self.right(), width).ok_or(Error::EmptyBox)?;
        let (y, h) = clip_span(self.y, self.bottom(), height).ok_or(Error::EmptyBox)?;
        Ok(Self { x, y, w, h })
    }

    /// Area and aspect ratio (`w / h`).
    pub fn geometry(&self) -> (f64, f64) {
        (self.w * self.h, self.w / self.h)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let iy = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Integer pixel ranges `[left, right) x [top, bottom)` obtained by
    /// rounding each edge to the nearest pixel boundary, clamped to the image.
    pub fn rounded_edges(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let clamp = |v: f64, hi: usize| v.round().clamp(0.0, hi as f64) as usize;
        (
            clamp(self.x, width),
            clamp(self.y, height),
            clamp(self.right(), width),
            clamp(self.bottom(), height),
        )
    }

    /// Like [`BBox::rounded_edges`] but rounding outward, after scaling the
    /// box from an image of `src` size to a grid of `dst` size.
    pub fn scaled_outward_edges(
        &self,
        src: (usize, usize),
        dst: (usize, usize),
    ) -> (usize, usize, usize, usize) {
        let (src_h, src_w) = src;
        let (dst_h, dst_w) = dst;
        let sx = dst_w as f64 / src_w as f64;
        let sy = dst_h as f64 / src_h as f64;
        let lo = |v: f64, hi: usize| v.floor().clamp(0.0, hi as f64) as usize;
        let up = |v: f64, hi: usize| v.ceil().clamp(0.0, hi as f64) as usize;
        (
            lo(self.x * sx, dst_w),
            lo(self.y * sy, dst_h),
            up(self.right() * sx, dst_w),
            up(self.bottom() * sy, dst_h),
        )
    }
}

fn clip_span(lo: f64, hi: f64, limit: f64) -> Option<(f64, f64)> {
    let start = lo.max(0.0);
    let end = hi.min(limit);
    if end <= start {
        return None;
    }
    let mut len = end - start;
    // start + (end - start) can round above `limit`
    while start + len > limit {
        len = len.next_down();
    }
    (len > 0.0).then_some((start, len))
}

/// Box area and aspect ratio (`w / h`).
pub fn derive_geometry(bbox: &BBox) -> (f64, f64) {
    bbox.geometry()
}

/// Clip `bbox` to a `width x height` image.
pub fn clip_bbox(bbox: &BBox, width: f64, height: f64) -> Result<BBox> {
    bbox.clip(width, height)
}
