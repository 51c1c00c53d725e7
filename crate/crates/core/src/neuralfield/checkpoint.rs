//! Checkpoint container: magic, format version, a JSON header, then named
//! little-endian f64 blobs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::model::{Architecture, FieldModel, LayoutEntry};
use crate::domain::RefractiveIndex;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PIONIXCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    /// Offset into the blob area, in f64 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// `generator`, `critic` or `training`.
    pub kind: String,
    pub architecture: Value,
    pub layout: Vec<LayoutEntry>,
    pub seed: u64,
    pub epoch: usize,
    #[serde(default)]
    pub optics: Option<[RefractiveIndex; 2]>,
    pub blobs: Vec<BlobEntry>,
    /// Kind-specific extras.
    #[serde(default)]
    pub meta: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    data: Vec<f64>,
}

impl Checkpoint {
    pub fn new(kind: &str, architecture: Value, layout: Vec<LayoutEntry>, seed: u64, epoch: usize) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                kind: kind.into(),
                architecture,
                layout,
                seed,
                epoch,
                optics: None,
                blobs: Vec::new(),
                meta: Value::Null,
            },
            data: Vec::new(),
        }
    }

    pub fn push_blob(&mut self, name: &str, values: &[f64]) {
        self.header.blobs.push(BlobEntry {
            name: name.into(),
            offset: self.data.len(),
            len: values.len(),
        });
        self.data.extend_from_slice(values);
    }

    pub fn blob(&self, name: &str) -> Result<&[f64]> {
        let e = self
            .header
            .blobs
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::State(format!("checkpoint has no blob {name:?}")))?;
        Ok(&self.data[e.offset..e.offset + e.len])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("serializable header");
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let bad = |m: &str| Error::format(path, m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let rest = &bytes[16 + hlen..];
        if rest.len() % 8 != 0 {
            return Err(bad("blob area is not a whole number of f64 values"));
        }
        let data: Vec<f64> = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if header.blobs.iter().any(|b| b.offset + b.len > data.len()) {
            return Err(bad("blob table points past the end of the file"));
        }
        Ok(Checkpoint { header, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

impl FieldModel {
    /// Standalone generator checkpoint.
    pub fn to_checkpoint(&self, epoch: usize) -> Checkpoint {
        let mut c = Checkpoint::new(
            "generator",
            serde_json::to_value(self.architecture()).expect("serializable architecture"),
            self.layout(),
            self.seed(),
            epoch,
        );
        c.header.optics = Some(self.optics());
        c.push_blob("generator", self.params());
        c
    }

    /// Reads the generator out of a generator or training checkpoint.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<FieldModel> {
        let arch: Architecture = serde_json::from_value(c.header.architecture.clone())
            .map_err(|e| Error::State(format!("checkpoint architecture: {e}")))?;
        if arch.layout() != c.header.layout {
            return Err(Error::State("checkpoint layout does not match its architecture".into()));
        }
        let model = FieldModel::from_params(&arch, c.blob("generator")?.to_vec(), c.header.seed)?;
        Ok(match c.header.optics {
            Some([l, g]) => model.with_optics(l, g),
            None => model,
        })
    }
}
