//! Checkpoints: `manifest.json` (configuration, vocabulary, parameter names
//! and shapes) plus one little-endian f64 blob per parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{AsrModel, ModelConfig};
use crate::numerics::params::ParamStore;
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub vocabulary: Vec<String>,
    /// Optimiser updates applied so far.
    pub step: u64,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: AsrModel,
    pub store: ParamStore,
    pub vocabulary: Vec<String>,
    pub step: u64,
}

pub fn save_checkpoint(dir: &Path, model: &AsrModel, store: &ParamStore, vocabulary: &[String], step: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut params = Vec::with_capacity(store.len());
    for (id, p) in store.iter() {
        let file = format!("{:04}.f64", id.0);
        let bytes: Vec<u8> = p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(&file), bytes)?;
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            file,
            trainable: p.trainable,
        });
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        vocabulary: vocabulary.to_vec(),
        step,
        params,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let m: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("checkpoint format {} (expected {FORMAT_VERSION})", m.format_version)));
    }
    if m.vocabulary.len() != m.model.vocab() {
        return Err(Error::Format("vocabulary size differs from the model's".into()));
    }
    let mut store = ParamStore::new();
    let model = AsrModel::new(&mut store, m.model.clone(), RngStream::new(0))?;
    if store.len() != m.params.len() {
        return Err(Error::Format(format!("{} stored parameters, model has {}", m.params.len(), store.len())));
    }
    for e in &m.params {
        let id = store
            .id(&e.name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {}", e.name)))?;
        let bytes = fs::read(dir.join(&e.file))?;
        let n: usize = e.shape.iter().product();
        if bytes.len() != 8 * n {
            return Err(Error::Format(format!("{}: {} bytes for shape {:?}", e.file, bytes.len(), e.shape)));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        store.set_value(id, Tensor::new(e.shape.clone(), data)?)?;
    }
    Ok(Checkpoint {
        model,
        store,
        vocabulary: m.vocabulary,
        step: m.step,
    })
}
