//! Checkpoint archive: an 8-byte magic, a little-endian u64 manifest length,
//! the JSON manifest, then every parameter as raw little-endian f64.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec, ParamRole, Parameters};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NCCKPT\0\x01";
const FORMAT: &str = "ncc-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    role: ParamRole,
    /// Offset in f64 elements from the start of the data block.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    seed: u64,
    spec: ModelSpec,
    layers: Vec<String>,
    params: Vec<ParamEntry>,
}

/// A loaded archive.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
}

pub fn write_checkpoint(model: &Model, seed: u64) -> Result<Vec<u8>> {
    let mut params = Vec::new();
    let mut offset = 0;
    for p in model.params.entries() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            role: p.role,
            offset,
        });
        offset += p.tensor.numel();
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        seed,
        spec: model.spec.clone(),
        layers: model.layers().iter().map(|l| l.name.clone()).collect(),
        params,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params.entries() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint archive (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| Error::Format("checkpoint manifest truncated".into()))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    let data = &bytes[16 + len..];
    let mut params = Parameters::default();
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        let raw = data
            .get(e.offset * 8..(e.offset + n) * 8)
            .ok_or_else(|| Error::Format(format!("checkpoint data truncated at {}", e.name)))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(e.shape.clone(), values).map_err(|_| Error::Format(format!("bad shape for {}", e.name)))?;
        params.push(e.name.clone(), t, e.role);
    }
    let model = Model::from_parts(manifest.spec, params)?;
    let names: Vec<String> = model.layers().iter().map(|l| l.name.clone()).collect();
    if names != manifest.layers {
        return Err(Error::Format("checkpoint layer list does not match its spec".into()));
    }
    Ok(Checkpoint {
        model,
        seed: manifest.seed,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, seed: u64) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_checkpoint(model, seed)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    read_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
