//! Single-file checkpoints: magic, format version, a JSON header describing
//! every parameter tensor, then the raw little-endian `f64` data.

use std::fs;
use std::io::Write;
use std::path::Path;

use facemark_tensor::{Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::registry::{ModelRegistry, TargetInfo};
use crate::training::config::TrainConfig;

const MAGIC: &[u8; 8] = b"FACEMARK";
pub const FORMAT_VERSION: u32 = 1;

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

/// Training progress stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub step: usize,
    pub rng: Option<RngState>,
    pub train_config: Option<TrainConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SectionEntry {
    name: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    targets: Vec<TargetInfo>,
    state: TrainingState,
    sections: Vec<SectionEntry>,
}

/// Serializes `registry` and `state` into bytes.
pub fn encode(registry: &ModelRegistry, state: &TrainingState) -> Result<Vec<u8>> {
    let mut sections = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, module) in registry.sections() {
        let mut tensors = Vec::new();
        module.visit(&mut |pname, p| {
            tensors.push(TensorEntry {
                name: pname.to_string(),
                shape: p.value().shape().to_vec(),
            });
            for v in p.value().data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        });
        sections.push(SectionEntry { name, tensors });
    }
    let header = Header {
        version: FORMAT_VERSION,
        model: registry.config.clone(),
        targets: registry.targets().cloned().collect(),
        state: state.clone(),
        sections,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint("file is truncated".into()));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

pub fn decode(mut bytes: &[u8]) -> Result<(ModelRegistry, TrainingState)> {
    let cur = &mut bytes;
    if take(cur, 8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(cur, 4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(take(cur, 8)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(cur, len)?)?;

    let mut registry = ModelRegistry::new(header.model, header.targets, 0)?;
    let mut tensors = Vec::new();
    for s in &header.sections {
        for t in &s.tensors {
            let n: usize = t.shape.iter().product();
            let raw = take(cur, n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((
                format!("{}.{}", s.name, t.name),
                Tensor::new(&t.shape, data),
            ));
        }
    }
    if !cur.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", cur.len())));
    }

    let mut expected = 0;
    let mut mismatch = None;
    registry.visit_mut(&mut |name, p| {
        let found = tensors.get(expected);
        match found {
            Some((n, t)) if n == name && t.shape() == p.value().shape() => p.set(t.clone()),
            _ if mismatch.is_none() => mismatch = Some(name.to_string()),
            _ => {}
        }
        expected += 1;
    });
    if let Some(name) = mismatch {
        return Err(Error::Checkpoint(format!(
            "parameter `{name}` missing or misshapen"
        )));
    }
    if expected != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {expected}",
            tensors.len()
        )));
    }
    Ok((registry, header.state))
}

/// Writes to a temporary sibling and renames it into place.
pub fn save(path: &Path, registry: &ModelRegistry, state: &TrainingState) -> Result<()> {
    let bytes = encode(registry, state)?;
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelRegistry, TrainingState)> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Missing(format!("checkpoint {}: {e}", path.display())))?;
    decode(&bytes)
}
