//! Checkpoint directories: `manifest.json` describing every tensor plus
//! `weights.bin` holding their little-endian `f32` values back to back.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use magread_numerics::Tensor;
use serde::{Deserialize, Serialize};

use super::{HeadKind, InputMode, ModelConfig, ModelParams};
use crate::dataio::NormStats;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT: &str = "magread-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `weights.bin`.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub input_mode: InputMode,
    pub head: HeadKind,
    pub tensors: Vec<TensorEntry>,
    pub stats: Option<NormStats>,
}

pub fn save_checkpoint(dir: impl AsRef<Path>, params: &ModelParams<f32>, stats: Option<&NormStats>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(params.len());
    let mut payload = Vec::with_capacity(params.param_count() * 4);
    for (name, t) in params.iter() {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32le".into(),
            offset: payload.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION,
        config: params.config.clone(),
        input_mode: params.input_mode,
        head: params.head,
        tensors: entries,
        stats: stats.cloned(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))?;
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, payload).map_err(|e| Error::io(&wpath, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ModelParams<f32>, Option<NormStats>)> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format {} v{}",
            mpath.display(),
            manifest.format,
            manifest.version
        )));
    }
    let wpath = dir.join(WEIGHTS_FILE);
    let payload = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;

    let mut tensors = BTreeMap::new();
    let mut cursor = 0usize;
    for e in &manifest.tensors {
        if e.dtype != "f32le" {
            return Err(Error::Checkpoint(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
        }
        if e.offset != cursor {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` starts at byte {}, expected {cursor}",
                e.name, e.offset
            )));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        let bytes = payload.get(e.offset..end).ok_or_else(|| {
            Error::Checkpoint(format!(
                "tensor `{}` needs bytes {}..{end} but {} holds {} bytes",
                e.name,
                e.offset,
                WEIGHTS_FILE,
                payload.len()
            ))
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(e.name.clone(), Tensor::from_vec(e.shape.clone(), data)?).is_some() {
            return Err(Error::Checkpoint(format!("tensor `{}` listed twice", e.name)));
        }
        cursor = end;
    }
    if cursor != payload.len() {
        let last = manifest.tensors.last().map_or("<none>", |e| e.name.as_str());
        return Err(Error::Checkpoint(format!(
            "{} has {} trailing bytes after tensor `{last}`",
            WEIGHTS_FILE,
            payload.len() - cursor
        )));
    }
    let params = ModelParams::from_parts(manifest.config, manifest.input_mode, manifest.head, tensors)?;
    Ok((params, manifest.stats))
}

/// Loads a checkpoint as the starting point of another stage. The backbone
/// must match `config` and `input_mode` exactly; a head of a different kind
/// is replaced by a freshly initialized one.
pub fn load_for_finetune(
    dir: impl AsRef<Path>,
    config: &ModelConfig,
    input_mode: InputMode,
    head: HeadKind,
    seed: u64,
) -> Result<(ModelParams<f32>, Option<NormStats>)> {
    let (mut params, stats) = load_checkpoint(dir)?;
    if &params.config != config {
        return Err(Error::Checkpoint(format!(
            "backbone config mismatch: checkpoint {:?}, requested {config:?}",
            params.config
        )));
    }
    if params.input_mode != input_mode {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained with input mode {}, requested {}",
            params.input_mode.as_str(),
            input_mode.as_str()
        )));
    }
    if params.head != head {
        log::info!("replacing {:?} head with a fresh {:?} head", params.head, head);
        params.swap_head(head, seed);
    }
    Ok((params, stats))
}
