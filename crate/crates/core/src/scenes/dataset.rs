//! Dataset directory layout: `images/scene_{id:06}.png` plus `annotations.json`
//! (schema "aisdiff-synth/1", uncompressed counted RLE masks).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::rle::{mask_from_rle, rle_encode};
use super::{InstanceRecord, Scene};
use crate::mask::{mask_is_subset, tight_bbox, BBox, Mask};
use crate::{CoreError, Result};

pub const SCHEMA_VERSION: &str = "aisdiff-synth/1";

pub type SplitRanges = BTreeMap<String, (usize, usize)>;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema_version: String,
    pub image_size: usize,
    pub categories: Vec<String>,
    pub seed: u64,
    /// Half-open scene_id ranges per split name.
    pub splits: SplitRanges,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct InstanceEntry {
    scene_id: usize,
    instance_id: usize,
    category_id: usize,
    bbox: [usize; 4],
    depth_rank: usize,
    amodal_rle: Vec<u32>,
    visible_rle: Vec<u32>,
    occluding_rle: Vec<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SceneEntry {
    scene_id: usize,
    seed_used: u64,
    image: String,
    instances: Vec<InstanceEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Annotations {
    schema_version: String,
    image_size: usize,
    categories: Vec<String>,
    seed: u64,
    splits: SplitRanges,
    scenes: Vec<SceneEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub dir: PathBuf,
    pub scene_count: usize,
    pub instance_count: usize,
}

fn image_file_name(scene_id: usize) -> String {
    format!("images/scene_{scene_id:06}.png")
}

fn write_png(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (_, h, w) = image.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (image[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| CoreError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn read_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| CoreError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Write scenes plus annotations; returns counts.
pub fn write_dataset(
    scenes: &[Scene],
    dir: &Path,
    image_size: usize,
    categories: &[String],
    seed: u64,
    splits: SplitRanges,
) -> Result<ManifestSummary> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| CoreError::io(&images_dir, e))?;

    let mut entries = Vec::with_capacity(scenes.len());
    let mut instance_count = 0;
    for scene in scenes {
        let rel = image_file_name(scene.scene_id);
        write_png(&dir.join(&rel), &scene.image)?;
        let instances = scene
            .instances
            .iter()
            .map(|inst| {
                instance_count += 1;
                InstanceEntry {
                    scene_id: scene.scene_id,
                    instance_id: inst.instance_id,
                    category_id: inst.category_id,
                    bbox: [inst.bbox.x, inst.bbox.y, inst.bbox.w, inst.bbox.h],
                    depth_rank: inst.depth_rank,
                    amodal_rle: rle_encode(&inst.amodal_mask),
                    visible_rle: rle_encode(&inst.visible_mask),
                    occluding_rle: rle_encode(&inst.occluding_mask),
                }
            })
            .collect();
        entries.push(SceneEntry {
            scene_id: scene.scene_id,
            seed_used: scene.seed_used,
            image: rel,
            instances,
        });
    }

    let ann = Annotations {
        schema_version: SCHEMA_VERSION.to_string(),
        image_size,
        categories: categories.to_vec(),
        seed,
        splits,
        scenes: entries,
    };
    let ann_path = dir.join("annotations.json");
    let file = fs::File::create(&ann_path).map_err(|e| CoreError::io(&ann_path, e))?;
    serde_json::to_writer(std::io::BufWriter::new(file), &ann).map_err(|e| CoreError::Json {
        path: ann_path.clone(),
        message: e.to_string(),
    })?;
    Ok(ManifestSummary {
        dir: dir.to_path_buf(),
        scene_count: scenes.len(),
        instance_count,
    })
}

fn validate_instance(scene_id: usize, inst: &InstanceRecord, front_union: &Mask) -> Result<()> {
    let fail = |what: &str| {
        Err(CoreError::InvariantViolation {
            scene_id,
            instance_id: inst.instance_id,
            what: what.into(),
        })
    };
    if !mask_is_subset(&inst.visible_mask, &inst.amodal_mask) {
        return fail("visible mask is not a subset of the amodal mask");
    }
    if !crate::mask::mask_intersection_empty(&inst.visible_mask, &inst.occluding_mask) {
        return fail("visible and occluding masks overlap");
    }
    match tight_bbox(&inst.amodal_mask) {
        Some(b) if b == inst.bbox => {}
        _ => return fail("bbox is not the tight box of the amodal mask"),
    }
    let (h, w) = inst.amodal_mask.dim();
    for y in 0..h {
        for x in 0..w {
            let in_box = y >= inst.bbox.y
                && y < inst.bbox.y + inst.bbox.h
                && x >= inst.bbox.x
                && x < inst.bbox.x + inst.bbox.w;
            let expected = in_box && front_union[[y, x]];
            if inst.occluding_mask[[y, x]] != expected {
                return fail("occluding mask is not the front union clipped to the box");
            }
            if inst.amodal_mask[[y, x]] && !inst.visible_mask[[y, x]] && !inst.occluding_mask[[y, x]]
            {
                return fail("amodal \\ visible escapes the occluding mask");
            }
        }
    }
    Ok(())
}

/// Read a dataset directory, re-validating every instance invariant.
pub fn read_dataset(dir: &Path) -> Result<(Vec<Scene>, DatasetMeta)> {
    let ann_path = dir.join("annotations.json");
    let text = fs::read_to_string(&ann_path).map_err(|e| CoreError::io(&ann_path, e))?;
    let ann: Annotations = serde_json::from_str(&text).map_err(|e| CoreError::Json {
        path: ann_path.clone(),
        message: e.to_string(),
    })?;
    if ann.schema_version != SCHEMA_VERSION {
        return Err(CoreError::SchemaVersion {
            expected: SCHEMA_VERSION.into(),
            found: ann.schema_version,
        });
    }
    let size = ann.image_size;
    let mut scenes = Vec::with_capacity(ann.scenes.len());
    for entry in &ann.scenes {
        let image = read_png(&dir.join(&entry.image))?;
        let mut instances = Vec::with_capacity(entry.instances.len());
        for ie in &entry.instances {
            instances.push(InstanceRecord {
                instance_id: ie.instance_id,
                category_id: ie.category_id,
                amodal_mask: mask_from_rle(&ie.amodal_rle, size)?,
                visible_mask: mask_from_rle(&ie.visible_rle, size)?,
                occluding_mask: mask_from_rle(&ie.occluding_rle, size)?,
                bbox: BBox::new(ie.bbox[0], ie.bbox[1], ie.bbox[2], ie.bbox[3]),
                depth_rank: ie.depth_rank,
            });
        }
        // Re-derive the front unions from depth ranks for invariant checks.
        for inst in &instances {
            let mut front = Mask::from_elem((size, size), false);
            for other in &instances {
                if other.depth_rank < inst.depth_rank {
                    front.zip_mut_with(&other.amodal_mask, |f, &v| *f = *f || v);
                }
            }
            validate_instance(entry.scene_id, inst, &front)?;
        }
        scenes.push(Scene {
            scene_id: entry.scene_id,
            image,
            instances,
            seed_used: entry.seed_used,
        });
    }
    let meta = DatasetMeta {
        schema_version: ann.schema_version,
        image_size: ann.image_size,
        categories: ann.categories,
        seed: ann.seed,
        splits: ann.splits,
    };
    Ok((scenes, meta))
}
