//! Binary masks, bounding boxes, and small grid helpers shared across modules.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

/// Row-major binary mask over the scene grid.
pub type Mask = Array2<bool>;

/// Integer box, x/y top-left, w/h ≥ 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    /// Clip to an image of side `size`, erroring when nothing remains.
    pub fn clipped(&self, size: usize) -> Result<BBox> {
        let x = self.x.min(size.saturating_sub(1));
        let y = self.y.min(size.saturating_sub(1));
        let w = self.w.min(size - x);
        let h = self.h.min(size - y);
        if w < 1 || h < 1 {
            return Err(CoreError::DegenerateBox(format!(
                "box {:?} clipped to image size {size} is empty",
                self
            )));
        }
        Ok(BBox { x, y, w, h })
    }
}

pub fn mask_area(m: &Mask) -> usize {
    m.iter().filter(|&&v| v).count()
}

pub fn mask_is_subset(inner: &Mask, outer: &Mask) -> bool {
    inner.iter().zip(outer.iter()).all(|(&a, &b)| !a || b)
}

pub fn mask_intersection_empty(a: &Mask, b: &Mask) -> bool {
    a.iter().zip(b.iter()).all(|(&x, &y)| !(x && y))
}

pub fn mask_intersection_area(a: &Mask, b: &Mask) -> usize {
    a.iter().zip(b.iter()).filter(|(&x, &y)| x && y).count()
}

pub fn mask_union_area(a: &Mask, b: &Mask) -> usize {
    a.iter().zip(b.iter()).filter(|(&x, &y)| x || y).count()
}

/// Tight bounding box of the set pixels, None when empty.
pub fn tight_bbox(m: &Mask) -> Option<BBox> {
    let (h, w) = m.dim();
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if m[[y, x]] {
                any = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    any.then(|| BBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
}

/// Nearest-neighbor index mapping out-pixel `i` of `out_n` onto `in_n` source
/// pixels (half-pixel centers).
pub fn nearest_index(i: usize, out_n: usize, in_n: usize) -> usize {
    (((2 * i + 1) * in_n) / (2 * out_n)).min(in_n - 1)
}

/// Crop a mask to a box and resize to `out` × `out` with nearest-neighbor.
pub fn crop_resize_nearest(m: &Mask, bbox: &BBox, out: usize) -> Array2<bool> {
    Array2::from_shape_fn((out, out), |(i, j)| {
        let sy = bbox.y + nearest_index(i, out, bbox.h);
        let sx = bbox.x + nearest_index(j, out, bbox.w);
        m[[sy, sx]]
    })
}

/// Nearest-neighbor upsample of a small binary mask into a box region of a
/// full-size canvas (the inverse of [`crop_resize_nearest`] for evaluation).
pub fn paste_mask_into_canvas(small: &Array2<bool>, bbox: &BBox, size: usize) -> Mask {
    let (sh, sw) = small.dim();
    let mut out = Array2::from_elem((size, size), false);
    for y in 0..bbox.h {
        for x in 0..bbox.w {
            let sy = nearest_index(y, bbox.h, sh);
            let sx = nearest_index(x, bbox.w, sw);
            if small[[sy, sx]] {
                out[[bbox.y + y, bbox.x + x]] = true;
            }
        }
    }
    out
}

/// RGB scene image (3, S, S), values in [0,1] quantized to 1/255 steps.
pub type RgbGrid = Array3<f32>;
