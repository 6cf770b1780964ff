//! Procedural multi-object sprite scenes and their on-disk format.

mod dataset;
mod generate;

pub use dataset::{
    decode_record, encode_record, read_dataset, read_manifest, write_dataset, Manifest,
    RecordEntry, FORMAT_VERSION, MANIFEST_FILE,
};
pub(crate) use dataset::sha256_hex;
pub use generate::{
    generate_scene, tight_bbox, BackgroundMode, ObjectInfo, SceneConfig, SceneSample, Shape,
};

/// Generates `count` scenes with seeds `base_seed..base_seed + count`.
pub fn generate_many(
    config: &SceneConfig,
    base_seed: u64,
    count: usize,
) -> crate::Result<Vec<SceneSample>> {
    (0..count as u64)
        .map(|i| generate_scene(config, base_seed + i))
        .collect()
}
