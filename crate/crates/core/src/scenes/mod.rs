//! Deterministic synthetic occlusion scenes with exact amodal, visible, and
//! occluding ground-truth masks.

mod dataset;
mod rle;
mod shapes;

pub use dataset::{read_dataset, write_dataset, DatasetMeta, ManifestSummary, SplitRanges};
pub use rle::{mask_from_rle, rle_decode, rle_encode};
pub use shapes::{base_color, shape_for_category, Shape, DEFAULT_CATEGORIES};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mask::{mask_area, tight_bbox, BBox, Mask, RgbGrid};
use crate::{CoreError, Result};

pub const BACKGROUND: [f32; 3] = [0.15, 0.15, 0.17];
const GENERATION_ATTEMPTS: usize = 1000;
/// Every instance keeps at least this visible fraction so the task stays posed.
const MIN_VISIBLE_FRACTION: f64 = 0.25;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SceneConfig {
    pub image_size: usize,
    /// Inclusive range of instances per scene.
    pub instances_per_scene: (usize, usize),
    pub categories: Vec<String>,
    /// Fraction of instances that must be occluded by at least 10%.
    pub min_occlusion_fraction: f64,
    /// Shape radius range as a fraction of image_size.
    pub size_range: (f64, f64),
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 128,
            instances_per_scene: (2, 6),
            categories: DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            min_occlusion_fraction: 0.5,
            size_range: (0.2, 0.5),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 || self.image_size % 4 != 0 {
            return Err(CoreError::Config(format!(
                "image_size must be ≥ 32 and a multiple of 4, got {}",
                self.image_size
            )));
        }
        if self.categories.is_empty() {
            return Err(CoreError::Config("categories must be nonempty".into()));
        }
        let mut names = self.categories.clone();
        names.sort();
        names.dedup();
        if names.len() != self.categories.len() {
            return Err(CoreError::Config("category names must be unique".into()));
        }
        if self.instances_per_scene.0 < 1 || self.instances_per_scene.0 > self.instances_per_scene.1
        {
            return Err(CoreError::Config(format!(
                "bad instances_per_scene range {:?}",
                self.instances_per_scene
            )));
        }
        if !(0.0..1.0).contains(&self.min_occlusion_fraction) {
            return Err(CoreError::Config(
                "min_occlusion_fraction must be in [0,1)".into(),
            ));
        }
        if self.size_range.0 <= 0.0 || self.size_range.0 > self.size_range.1 {
            return Err(CoreError::Config(format!(
                "bad size_range {:?}",
                self.size_range
            )));
        }
        Ok(())
    }
}

/// One object with its exact ground-truth masks. `depth_rank` 0 is frontmost.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRecord {
    pub instance_id: usize,
    pub category_id: usize,
    pub amodal_mask: Mask,
    pub visible_mask: Mask,
    pub occluding_mask: Mask,
    pub bbox: BBox,
    pub depth_rank: usize,
}

impl InstanceRecord {
    pub fn occluded_fraction(&self) -> f64 {
        let amodal = mask_area(&self.amodal_mask);
        if amodal == 0 {
            return 0.0;
        }
        let visible = mask_area(&self.visible_mask);
        (amodal - visible) as f64 / amodal as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: usize,
    /// (3, S, S) in [0,1], quantized to 1/255 steps so PNG round-trips exactly.
    pub image: RgbGrid,
    pub instances: Vec<InstanceRecord>,
    pub seed_used: u64,
}

/// One placed object before mask derivation.
#[derive(Clone, Debug)]
pub struct PlacedInstance {
    pub category_id: usize,
    pub shape: Shape,
    /// Per-channel color in [0,1]; quantized during rendering.
    pub color: [f32; 3],
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Derive masks and render the composite for an ordered list of instances
/// (index 0 = frontmost) placed on a `size`-pixel canvas.
pub fn compose_scene(
    scene_id: usize,
    size: usize,
    placed: &[PlacedInstance],
    seed_used: u64,
) -> Result<Scene> {
    let amodals: Vec<Mask> = placed.iter().map(|p| p.shape.rasterize(size)).collect();
    let mut instances = Vec::with_capacity(placed.len());
    for (i, p) in placed.iter().enumerate() {
        let amodal = amodals[i].clone();
        let bbox = tight_bbox(&amodal).ok_or_else(|| {
            CoreError::InvariantViolation {
                scene_id,
                instance_id: i,
                what: "amodal mask is empty".into(),
            }
        })?;
        // Union of strictly front-ranked amodal masks.
        let mut front = Mask::from_elem((size, size), false);
        for a in amodals.iter().take(i) {
            front.zip_mut_with(a, |f, &v| *f = *f || v);
        }
        let visible = ndarray::Zip::from(&amodal)
            .and(&front)
            .map_collect(|&a, &f| a && !f);
        // Occluding mask: front union clipped to this instance's amodal box.
        let mut occluding = Mask::from_elem((size, size), false);
        for y in bbox.y..bbox.y + bbox.h {
            for x in bbox.x..bbox.x + bbox.w {
                occluding[[y, x]] = front[[y, x]];
            }
        }
        instances.push(InstanceRecord {
            instance_id: i,
            category_id: p.category_id,
            amodal_mask: amodal,
            visible_mask: visible,
            occluding_mask: occluding,
            bbox,
            depth_rank: i,
        });
    }

    // Painter's algorithm, back to front.
    let mut image = Array3::<f32>::zeros((3, size, size));
    for c in 0..3 {
        image
            .index_axis_mut(ndarray::Axis(0), c)
            .fill(quantize(BACKGROUND[c]));
    }
    for i in (0..placed.len()).rev() {
        let color = placed[i].color.map(quantize);
        for y in 0..size {
            for x in 0..size {
                if instances[i].amodal_mask[[y, x]] {
                    for c in 0..3 {
                        image[[c, y, x]] = color[c];
                    }
                }
            }
        }
    }

    Ok(Scene {
        scene_id,
        image,
        instances,
        seed_used,
    })
}

fn scene_seed(config_seed: u64, scene_index: usize) -> u64 {
    // splitmix64 of (seed ⊕ golden-ratio-scrambled index)
    let mut z = config_seed ^ (scene_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic scene generation: a pure function of (config.seed, scene_index).
pub fn generate_scene(config: &SceneConfig, scene_index: usize) -> Result<Scene> {
    config.validate()?;
    let size = config.image_size;
    let seed = scene_seed(config.seed, scene_index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for _attempt in 0..GENERATION_ATTEMPTS {
        let n = rng.gen_range(config.instances_per_scene.0..=config.instances_per_scene.1);
        let mut placed = Vec::with_capacity(n);
        for _ in 0..n {
            let category_id = rng.gen_range(0..config.categories.len());
            let scale =
                rng.gen_range(config.size_range.0..=config.size_range.1) * size as f64 / 2.0;
            let margin = scale + 2.0;
            let cx = rng.gen_range(margin..size as f64 - margin);
            let cy = rng.gen_range(margin..size as f64 - margin);
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let shape =
                shape_for_category(&config.categories[category_id], cx, cy, scale, theta);
            let brightness: f32 = rng.gen_range(0.75..1.1);
            let base = base_color(&config.categories[category_id]);
            let color = [
                base[0] * brightness,
                base[1] * brightness,
                base[2] * brightness,
            ];
            placed.push(PlacedInstance {
                category_id,
                shape,
                color,
            });
        }
        let scene = compose_scene(scene_index, size, &placed, seed)?;
        if scene_meets_quota(&scene, config) {
            return Ok(scene);
        }
    }
    Err(CoreError::Generation {
        scene_index,
        attempts: GENERATION_ATTEMPTS,
    })
}

fn scene_meets_quota(scene: &Scene, config: &SceneConfig) -> bool {
    let n = scene.instances.len();
    let occluded = scene
        .instances
        .iter()
        .filter(|i| i.occluded_fraction() >= 0.10)
        .count();
    let quota_ok = occluded as f64 + 1e-9 >= config.min_occlusion_fraction * n as f64;
    let visible_ok = scene.instances.iter().all(|i| {
        n == 1 || 1.0 - i.occluded_fraction() >= MIN_VISIBLE_FRACTION
    });
    quota_ok && visible_ok
}

/// Generate a contiguous block of scenes.
pub fn generate_scenes(config: &SceneConfig, start: usize, count: usize) -> Result<Vec<Scene>> {
    (start..start + count)
        .map(|i| generate_scene(config, i))
        .collect()
}


/// Render one instance as if unoccluded: its amodal extent filled with its
/// observed color on neutral gray, cropped to the box. The color is the mean
/// of the instance's visible pixels (category base color when fully hidden).
pub fn render_unoccluded_crop(
    scene: &Scene,
    instance: &InstanceRecord,
    categories: &[String],
) -> Array3<f32> {
    let bbox = instance.bbox;
    let mut color = [0f64; 3];
    let visible_count = mask_area(&instance.visible_mask);
    if visible_count > 0 {
        for y in 0..scene.image.dim().1 {
            for x in 0..scene.image.dim().2 {
                if instance.visible_mask[[y, x]] {
                    for c in 0..3 {
                        color[c] += scene.image[[c, y, x]] as f64;
                    }
                }
            }
        }
        for c in color.iter_mut() {
            *c /= visible_count as f64;
        }
    } else {
        let name = categories
            .get(instance.category_id)
            .map(|s| s.as_str())
            .unwrap_or("");
        let base = base_color(name);
        color = [base[0] as f64, base[1] as f64, base[2] as f64];
    }
    let mut out = Array3::<f32>::from_elem((3, bbox.h, bbox.w), 0.5);
    for y in 0..bbox.h {
        for x in 0..bbox.w {
            if instance.amodal_mask[[bbox.y + y, bbox.x + x]] {
                for c in 0..3 {
                    out[[c, y, x]] = color[c] as f32;
                }
            }
        }
    }
    out
}
