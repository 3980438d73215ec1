//! Dataset write/read round-trips and load-time invariant enforcement.

use std::collections::BTreeMap;
use std::fs;

use aisdiff_core::scenes::{
    generate_scenes, read_dataset, write_dataset, SceneConfig, SplitRanges,
};
use aisdiff_core::CoreError;

fn cfg(seed: u64) -> SceneConfig {
    SceneConfig {
        image_size: 64,
        instances_per_scene: (3, 3),
        min_occlusion_fraction: 0.4,
        seed,
        ..SceneConfig::default()
    }
}

fn default_splits(n: usize) -> SplitRanges {
    let mut s = BTreeMap::new();
    s.insert("train".to_string(), (0, n));
    s
}

#[test]
fn write_then_read_round_trips_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let config = cfg(5);
    let scenes = generate_scenes(&config, 0, 4).unwrap();
    let summary = write_dataset(
        &scenes,
        dir.path(),
        config.image_size,
        &config.categories,
        config.seed,
        default_splits(4),
    )
    .unwrap();
    assert_eq!(summary.scene_count, 4);
    let (loaded, meta) = read_dataset(dir.path()).unwrap();
    assert_eq!(meta.image_size, 64);
    assert_eq!(meta.categories, config.categories);
    assert_eq!(loaded, scenes);
}

#[test]
fn empty_scene_list_writes_valid_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = cfg(1);
    let summary = write_dataset(
        &[],
        dir.path(),
        config.image_size,
        &config.categories,
        config.seed,
        default_splits(0),
    )
    .unwrap();
    assert_eq!(summary.scene_count, 0);
    assert_eq!(summary.instance_count, 0);
    let (loaded, _) = read_dataset(dir.path()).unwrap();
    assert!(loaded.is_empty());
}

#[test]
fn instance_count_matches_scenes_times_instances() {
    let dir = tempfile::tempdir().unwrap();
    let config = cfg(9);
    let scenes = generate_scenes(&config, 0, 8).unwrap();
    assert!(scenes.iter().all(|s| s.instances.len() == 3));
    let summary = write_dataset(
        &scenes,
        dir.path(),
        config.image_size,
        &config.categories,
        config.seed,
        default_splits(8),
    )
    .unwrap();
    assert_eq!(summary.instance_count, 24);
    // The annotations file itself reports 24 instance entries.
    let text = fs::read_to_string(dir.path().join("annotations.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let total: usize = v["scenes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["instances"].as_array().unwrap().len())
        .sum();
    assert_eq!(total, 24);
}

fn write_and_tamper(
    tamper: impl FnOnce(&mut serde_json::Value),
) -> Result<(), CoreError> {
    let dir = tempfile::tempdir().unwrap();
    let config = cfg(2);
    let scenes = generate_scenes(&config, 0, 1).unwrap();
    write_dataset(
        &scenes,
        dir.path(),
        config.image_size,
        &config.categories,
        config.seed,
        default_splits(1),
    )
    .unwrap();
    let ann_path = dir.path().join("annotations.json");
    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&ann_path).unwrap()).unwrap();
    tamper(&mut v);
    fs::write(&ann_path, serde_json::to_string(&v).unwrap()).unwrap();
    read_dataset(dir.path()).map(|_| ())
}

#[test]
fn visible_outside_amodal_is_rejected_naming_instance() {
    let err = write_and_tamper(|v| {
        // Make the visible mask the full grid: certainly not ⊆ amodal.
        v["scenes"][0]["instances"][0]["visible_rle"] = serde_json::json!([1, 64 * 64]);
        v["scenes"][0]["instances"][0]["occluding_rle"] = serde_json::json!([0, 64 * 64]);
    })
    .unwrap_err();
    match err {
        CoreError::InvariantViolation { instance_id, .. } => assert_eq!(instance_id, 0),
        other => panic!("expected invariant violation, got {other}"),
    }
}

#[test]
fn truncated_rle_stream_is_a_decode_error() {
    let err = write_and_tamper(|v| {
        v["scenes"][0]["instances"][0]["amodal_rle"] = serde_json::json!([0, 10]);
    })
    .unwrap_err();
    assert!(matches!(err, CoreError::RleDecode(_)), "got {err}");
}

#[test]
fn schema_version_mismatch_is_rejected() {
    let err = write_and_tamper(|v| {
        v["schema_version"] = serde_json::json!("aisdiff-synth/999");
    })
    .unwrap_err();
    assert!(matches!(err, CoreError::SchemaVersion { .. }), "got {err}");
}
