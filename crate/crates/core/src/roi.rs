//! Per-ROI features from a small trainable backbone, bilinear crop-resize
//! pooling, and the masked pixel crops that condition the diffusion model.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use aisdiff_nn::{all_finite, Conv2d, Elem, Module, Param, Tape, Var};

use crate::mask::{BBox, Mask};
use crate::scenes::Scene;
use crate::{CoreError, Result};

/// Backbone output stride: two 2× downsamples.
pub const FEATURE_STRIDE: usize = 4;

/// Pooled feature tensor for one region of interest.
#[derive(Clone, Debug)]
pub struct RoiFeature<F: Elem> {
    pub tensor: Array3<F>,
    pub source_bbox: BBox,
    pub scene_id: usize,
    pub instance_id: usize,
}

impl<F: Elem> RoiFeature<F> {
    /// Validate the shape/finiteness contract.
    pub fn validate(&self, channels: usize, hw: (usize, usize)) -> Result<()> {
        let dim = self.tensor.dim();
        if dim != (channels, hw.0, hw.1) {
            return Err(CoreError::ShapeMismatch(format!(
                "roi feature shape {:?}, expected ({channels}, {}, {})",
                dim, hw.0, hw.1
            )));
        }
        if !self.tensor.iter().all(|v| v.is_finite()) {
            return Err(CoreError::Numeric("roi feature has non-finite entries".into()));
        }
        Ok(())
    }
}

/// ROI image crop conditioning the diffusion model: visible pixels on neutral
/// gray (centered so gray is exactly 0), occluding mask, category.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiCrop {
    /// (3, R, R), centered to [-1, 1]; exactly 0 where not visible.
    pub visible_pixels_image: Array3<f32>,
    /// (R, R) in {0.0, 1.0}.
    pub occluding_mask_crop: Array2<f32>,
    pub category_id: usize,
    /// Set when the visible mask was empty (crop is all background).
    pub empty_visible: bool,
}

impl RoiCrop {
    pub fn size(&self) -> usize {
        self.occluding_mask_crop.dim().0
    }

    /// Stable byte digest for prior-cache keys.
    pub fn digest_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(self.category_id as u64).to_le_bytes());
        bytes.push(self.empty_visible as u8);
        for v in self.visible_pixels_image.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.occluding_mask_crop.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes
    }
}

/// Three conv blocks (3×3 conv + ReLU), the last two at stride 2.
pub struct Backbone<F: Elem> {
    pub conv1: Conv2d<F>,
    pub conv2: Conv2d<F>,
    pub conv3: Conv2d<F>,
}

impl<F: Elem> Backbone<F> {
    pub fn new(feature_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mid = feature_channels / 2;
        Backbone {
            conv1: Conv2d::new(3, mid, 3, 1, 1, rng),
            conv2: Conv2d::new(mid, feature_channels, 3, 2, 1, rng),
            conv3: Conv2d::new(feature_channels, feature_channels, 3, 2, 1, rng),
        }
    }

    /// (1,3,S,S) -> (1,C,S/4,S/4). S must be a multiple of 4.
    pub fn forward(&self, t: &Tape<F>, image: Var) -> Result<Var> {
        let shape = t.value(image).shape().to_vec();
        let s = *shape.last().unwrap();
        if s % FEATURE_STRIDE != 0 {
            return Err(CoreError::ShapeMismatch(format!(
                "backbone input side {s} not a multiple of {FEATURE_STRIDE}"
            )));
        }
        let x = t.relu(self.conv1.forward(t, image));
        let x = t.relu(self.conv2.forward(t, x));
        let x = t.relu(self.conv3.forward(t, x));
        if !all_finite(&t.value(x)) {
            return Err(CoreError::Numeric("backbone produced non-finite activations".into()));
        }
        Ok(x)
    }
}

impl<F: Elem> Module<F> for Backbone<F> {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.conv1.visit(&format!("{p}conv1"), f);
        self.conv2.visit(&format!("{p}conv2"), f);
        self.conv3.visit(&format!("{p}conv3"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.conv1.visit_mut(&format!("{p}conv1"), f);
        self.conv2.visit_mut(&format!("{p}conv2"), f);
        self.conv3.visit_mut(&format!("{p}conv3"), f);
    }
}

/// Sample coordinates (feature space) for pooling `bbox` to `out_hw`.
/// Image coordinates scale by 1/FEATURE_STRIDE; pixel centers at integers.
fn pool_coords(bbox: &BBox, out_hw: (usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let scale = FEATURE_STRIDE as f64;
    let ys = (0..out_hw.0)
        .map(|i| (bbox.y as f64 + (i as f64 + 0.5) * bbox.h as f64 / out_hw.0 as f64) / scale - 0.5)
        .collect();
    let xs = (0..out_hw.1)
        .map(|j| (bbox.x as f64 + (j as f64 + 0.5) * bbox.w as f64 / out_hw.1 as f64) / scale - 0.5)
        .collect();
    (ys, xs)
}

/// Bilinear crop-resize of the box region of a (1,C,H,W) feature map to
/// `out_hw`. Differentiable w.r.t. the feature map.
pub fn roi_pool<F: Elem>(
    t: &Tape<F>,
    feature_map: Var,
    bbox: &BBox,
    image_size: usize,
    out_hw: (usize, usize),
) -> Result<Var> {
    if bbox.w < 1 || bbox.h < 1 {
        return Err(CoreError::DegenerateBox(format!("{bbox:?}")));
    }
    let bbox = bbox.clipped(image_size)?;
    let (ys, xs) = pool_coords(&bbox, out_hw);
    Ok(t.bilinear_sample(feature_map, ys, xs))
}

/// Materialize a pooled ROI into an owned tensor.
pub fn roi_feature_from_var<F: Elem>(
    t: &Tape<F>,
    pooled: Var,
    bbox: BBox,
    scene_id: usize,
    instance_id: usize,
) -> RoiFeature<F> {
    let v = t.value(pooled);
    let a = v
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("pooled NCHW")
        .index_axis(ndarray::Axis(0), 0)
        .to_owned();
    RoiFeature {
        tensor: a,
        source_bbox: bbox,
        scene_id,
        instance_id,
    }
}

fn bilinear_resize_channel(src: &Array2<f32>, out: usize) -> Array2<f32> {
    let src64 = src.mapv(|v| v as f64);
    aisdiff_nn::bilinear_resize_array(&src64, out, out).mapv(|v| v as f32)
}

/// Build the diffusion condition crop for one ROI from whatever visible /
/// occluding masks the caller provides (ground truth during training,
/// predictions at evaluation time).
pub fn make_roi_crop(
    scene: &Scene,
    bbox: &BBox,
    visible: &Mask,
    occluding: &Mask,
    category_id: usize,
    r_img: usize,
) -> Result<RoiCrop> {
    let size = scene.image.dim().1;
    let bbox = bbox.clipped(size)?;
    let empty_visible = !visible.iter().any(|&v| v);

    // Centered, masked image at box resolution: gray background is exactly 0.
    let mut channels: Vec<Array2<f32>> = Vec::with_capacity(3);
    for c in 0..3 {
        let mut plane = Array2::<f32>::zeros((bbox.h, bbox.w));
        for y in 0..bbox.h {
            for x in 0..bbox.w {
                let (sy, sx) = (bbox.y + y, bbox.x + x);
                if visible[[sy, sx]] {
                    plane[[y, x]] = 2.0 * scene.image[[c, sy, sx]] - 1.0;
                }
            }
        }
        channels.push(bilinear_resize_channel(&plane, r_img));
    }
    // Nearest-resized visible mask gates the resized image so the invariant
    // "zero wherever visible is absent" holds exactly at crop resolution.
    let vis_crop = crate::mask::crop_resize_nearest(visible, &bbox, r_img);
    let mut visible_pixels_image = Array3::<f32>::zeros((3, r_img, r_img));
    for c in 0..3 {
        for y in 0..r_img {
            for x in 0..r_img {
                if vis_crop[[y, x]] {
                    visible_pixels_image[[c, y, x]] = channels[c][[y, x]];
                }
            }
        }
    }
    let occ_crop = crate::mask::crop_resize_nearest(occluding, &bbox, r_img);
    let occluding_mask_crop =
        Array2::from_shape_fn((r_img, r_img), |(y, x)| f32::from(occ_crop[[y, x]]));
    Ok(RoiCrop {
        visible_pixels_image,
        occluding_mask_crop,
        category_id,
        empty_visible,
    })
}

/// Independently jitter each box edge by uniform(±max_shift_frac)×side,
/// clipped to the image. Deterministic in `seed`.
pub fn jitter_box(bbox: &BBox, image_size: usize, seed: u64, max_shift_frac: f64) -> BBox {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shift = |side: usize| -> f64 {
        if max_shift_frac == 0.0 {
            // Keep rng consumption identical across jitter fractions.
            let _ = rng.gen_range(-1.0..1.0f64);
            0.0
        } else {
            rng.gen_range(-max_shift_frac..max_shift_frac) * side as f64
        }
    };
    let left = bbox.x as f64 + shift(bbox.w);
    let right = (bbox.x + bbox.w) as f64 + shift(bbox.w);
    let top = bbox.y as f64 + shift(bbox.h);
    let bottom = (bbox.y + bbox.h) as f64 + shift(bbox.h);
    let x0 = left.round().clamp(0.0, (image_size - 1) as f64) as usize;
    let y0 = top.round().clamp(0.0, (image_size - 1) as f64) as usize;
    let x1 = right.round().clamp((x0 + 1) as f64, image_size as f64) as usize;
    let y1 = bottom.round().clamp((y0 + 1) as f64, image_size as f64) as usize;
    BBox::new(x0, y0, x1 - x0, y1 - y0)
}

/// Scene image as a (1,3,S,S) tape constant.
pub fn image_to_input<F: Elem>(t: &Tape<F>, scene: &Scene) -> Var {
    let (c, h, w) = scene.image.dim();
    let data: Vec<F> = scene.image.iter().map(|&v| F::c(v as f64)).collect();
    t.constant(ArrayD::from_shape_vec(IxDyn(&[1, c, h, w]), data).expect("image shape"))
}
