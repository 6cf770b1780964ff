//! Checkpoints: a JSON manifest next to a little-endian f32 parameter blob.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnum::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{Ablation, DiasModel, ModelConfig};
use crate::scene::sha256_hex;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f32 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub tensors: Vec<TensorEntry>,
    pub sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: DiasModel,
    pub store: ParamStore<f32>,
}

pub fn save_checkpoint(
    dir: &Path,
    model: &DiasModel,
    store: &ParamStore<f32>,
    ablation: Ablation,
    step: usize,
    seed: u64,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(store.num_scalars() * 4);
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (name, t) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        step,
        seed,
        model: model.config.clone(),
        ablation,
        tensors,
        sha256: sha256_hex(&blob),
    };
    let params = dir.join(PARAMS_FILE);
    fs::write(&params, &blob).map_err(|e| Error::io(&params, e))?;
    let path = dir.join(CHECKPOINT_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: manifest.format_version,
        });
    }
    let params = dir.join(PARAMS_FILE);
    let blob = fs::read(&params).map_err(|e| Error::io(&params, e))?;
    if sha256_hex(&blob) != manifest.sha256 {
        return Err(Error::Checkpoint(format!("{} checksum mismatch", params.display())));
    }
    let mut store = ParamStore::<f32>::new();
    let model = DiasModel::new(&mut store, &manifest.model, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| Error::Checkpoint(format!("invalid model config: {e}")))?;
    if store.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, checkpoint has {}",
            store.len(),
            manifest.tensors.len()
        )));
    }
    for entry in &manifest.tensors {
        let id = store
            .id(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", entry.name)))?;
        let expected = store.get(id).shape().to_vec();
        if expected != entry.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                entry.name, entry.shape, expected
            )));
        }
        let numel: usize = expected.iter().product();
        let bytes = blob
            .get(entry.offset * 4..(entry.offset + numel) * 4)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the blob", entry.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        *store.get_mut(id) = Tensor::new(expected, data)?;
    }
    Ok(Checkpoint {
        manifest,
        model,
        store,
    })
}
