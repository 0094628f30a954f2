use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array_io::{ArrayData, PortableArray};
use crate::error::{KmtrError, Result};
use crate::nn::{Mat, ParameterStore};

const MAGIC: &[u8; 8] = b"KMTRCKPT";

/// Everything in a checkpoint except the parameter arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    /// ChaCha word position of the training RNG when the stage finished.
    pub rng_word_pos: String,
    pub steps: usize,
    pub names: Vec<String>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParameterStore,
}

impl Checkpoint {
    pub fn new(stage: &str, config_hash: &str, seed: u64, rng_word_pos: u128, steps: usize, params: ParameterStore, meta: serde_json::Value) -> Self {
        let header = CheckpointHeader { stage: stage.into(), config_hash: config_hash.into(), seed, rng_word_pos: rng_word_pos.to_string(), steps, names: params.names(), meta };
        Self { header, params }
    }

    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.header.meta.get(key).ok_or_else(|| KmtrError::Checkpoint(format!("{} checkpoint lacks {key:?}", self.header.stage)))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for name in &self.header.names {
            let m = self.params.get(name).ok_or_else(|| KmtrError::MissingParameter(name.clone()))?;
            let data = m.as_standard_layout().iter().copied().collect();
            PortableArray::new(vec![m.nrows(), m.ncols()], ArrayData::F64(data))?.write_to(&mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(KmtrError::Checkpoint("bad checkpoint magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > r.len() {
            return Err(KmtrError::Checkpoint("truncated checkpoint header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let mut params = ParameterStore::new();
        for name in &header.names {
            let a = PortableArray::read_from(&mut r)?;
            let ArrayData::F64(v) = a.data else {
                return Err(KmtrError::Checkpoint(format!("{name}: expected f64 data")));
            };
            if a.shape.len() != 2 {
                return Err(KmtrError::Checkpoint(format!("{name}: expected rank 2, got {:?}", a.shape)));
            }
            params.insert(name.clone(), Mat::from_shape_vec((a.shape[0], a.shape[1]), v).map_err(|e| KmtrError::Checkpoint(e.to_string()))?)?;
        }
        if !r.is_empty() {
            return Err(KmtrError::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(KmtrError::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}
