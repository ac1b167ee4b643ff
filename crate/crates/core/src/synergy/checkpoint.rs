//! Binary model container: magic, format version, JSON header, then every
//! parameter as name, shape and little-endian f64 values.

use std::io::{Read, Write};
use std::path::Path;

use rand::rngs::mock::StepRng;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::{Model, ModelDims, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HGSYNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: TrainConfig,
    pub dims: ModelDims,
    pub drugs: Vec<String>,
    pub cells: Vec<String>,
    pub diseases: Vec<String>,
    pub fold: usize,
    pub data_digest: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Integrity("checkpoint truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Integrity("checkpoint string is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn new(data: &Dataset, model: &Model, fold: usize) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                config: model.config.clone(),
                dims: model.dims,
                drugs: data.drugs.ids().to_vec(),
                cells: data.cells.ids().to_vec(),
                diseases: data.diseases.ids().to_vec(),
                fold,
                data_digest: data.digest.clone(),
            },
            model: model.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let header = serde_json::to_vec(&self.header)?;
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(&header);
        put_u32(&mut out, self.model.store.len() as u32);
        for (name, tensor) in self.model.store.iter() {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            let (r, c) = tensor.shape();
            put_u64(&mut out, r as u64);
            put_u64(&mut out, c as u64);
            for v in tensor.value().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut cur = Cursor { bytes, at: 0 };
        if cur.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Integrity("not a checkpoint file".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Integrity(format!(
                "checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let n = cur.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(cur.take(n)?)?;
        let mut model = Model::new(&header.config, header.dims, &mut StepRng::new(0, 0))?;
        let count = cur.u32()? as usize;
        if count != model.store.len() {
            return Err(Error::Integrity(format!(
                "checkpoint has {count} tensors, model expects {}",
                model.store.len()
            )));
        }
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = cur.string()?;
            if name != model.store.name(id) {
                return Err(Error::Integrity(format!(
                    "checkpoint tensor `{name}` where `{}` was expected",
                    model.store.name(id)
                )));
            }
            let shape = (cur.u64()? as usize, cur.u64()? as usize);
            let tensor = model.store.get_mut(id);
            if shape != tensor.shape() {
                return Err(Error::Integrity(format!("tensor `{name}` has shape {shape:?}")));
            }
            let raw = cur.take(shape.0 * shape.1 * 8)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensor
                .value_mut()
                .assign(&Matrix::from_shape_vec(shape, values).unwrap());
        }
        if cur.at != bytes.len() {
            return Err(Error::Integrity("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { header, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
