//! On-disk dataset: `manifest.json` plus one little-endian binary record per
//! sample.
//!
//! Record layout:
//!
//! ```text
//! magic   b"DSCN"
//! u32     format version
//! u32     height, u32 width, u32 channels, u32 object count
//! u64     seed
//! f32     image, H * W * C values, row-major HWC
//! u8      label map, H * W values
//! per object: u32 class id, 4 x f32 bbox (x_min, y_min, x_max, y_max)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generate::{ObjectInfo, SceneConfig, SceneSample};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const MAGIC: &[u8; 4] = b"DSCN";
const HEADER_LEN: usize = 4 + 4 * 5 + 8;
const OBJECT_LEN: usize = 4 + 4 * 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub count: usize,
    pub config: SceneConfig,
    pub records: Vec<RecordEntry>,
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Serializes one sample into the record layout.
pub fn encode_record(sample: &SceneSample) -> Vec<u8> {
    let n = sample.num_pixels();
    let mut out =
        Vec::with_capacity(HEADER_LEN + 4 * n * 3 + n + OBJECT_LEN * sample.objects.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(sample.height as u32).to_le_bytes());
    out.extend_from_slice(&(sample.width as u32).to_le_bytes());
    out.extend_from_slice(&3u32.to_le_bytes());
    out.extend_from_slice(&(sample.objects.len() as u32).to_le_bytes());
    out.extend_from_slice(&sample.seed.to_le_bytes());
    for v in &sample.image {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&sample.gt_masks);
    for obj in &sample.objects {
        out.extend_from_slice(&obj.class_id.to_le_bytes());
        for v in obj.bbox {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> &[u8] {
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().unwrap())
    }

    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take(4).try_into().unwrap())
    }
}

/// Parses a record; `index` is reported in errors.
pub fn decode_record(bytes: &[u8], index: usize) -> Result<SceneSample> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            index,
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4) != MAGIC {
        return Err(Error::Malformed {
            index,
            reason: "bad magic".to_string(),
        });
    }
    let version = r.u32();
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let height = r.u32() as usize;
    let width = r.u32() as usize;
    let channels = r.u32() as usize;
    let n_objects = r.u32() as usize;
    let seed = r.u64();
    if channels != 3 {
        return Err(Error::Malformed {
            index,
            reason: format!("expected 3 channels, found {channels}"),
        });
    }
    let n = height
        .checked_mul(width)
        .ok_or_else(|| Error::Malformed {
            index,
            reason: "dimension overflow".to_string(),
        })?;
    let expected = HEADER_LEN + 4 * n * channels + n + OBJECT_LEN * n_objects;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            index,
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Malformed {
            index,
            reason: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    let image = (0..n * channels).map(|_| r.f32()).collect();
    let gt_masks = r.take(n).to_vec();
    let objects = (0..n_objects)
        .map(|_| {
            let class_id = r.u32();
            let bbox = [r.f32(), r.f32(), r.f32(), r.f32()];
            ObjectInfo { class_id, bbox }
        })
        .collect();
    Ok(SceneSample {
        height,
        width,
        image,
        gt_masks,
        objects,
        seed,
    })
}

fn record_name(i: usize) -> String {
    format!("sample_{i:06}.bin")
}

/// Writes `samples` under `dir` (created if missing) and returns the manifest.
pub fn write_dataset(samples: &[SceneSample], config: &SceneConfig, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let bytes = encode_record(sample);
        let file = record_name(i);
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        records.push(RecordEntry {
            file,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        count: samples.len(),
        config: config.clone(),
        records,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: manifest.format_version,
        });
    }
    if manifest.records.len() != manifest.count {
        return Err(Error::Malformed {
            index: manifest.records.len(),
            reason: format!(
                "manifest lists {} records but count is {}",
                manifest.records.len(),
                manifest.count
            ),
        });
    }
    Ok(manifest)
}

/// Reads and verifies every record listed in the manifest.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<SceneSample>)> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.count);
    for (index, entry) in manifest.records.iter().enumerate() {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let sample = decode_record(&bytes, index)?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Checksum { index });
        }
        samples.push(sample);
    }
    Ok((manifest, samples))
}
