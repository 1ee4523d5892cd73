//! Binary checkpoint: magic, format version, a JSON header describing the
//! model and tensor layout, then every tensor as little-endian f64.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

use super::model::FusionModel;
use super::ModelConfig;

const MAGIC: &[u8; 8] = b"MMRECKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_size: usize,
    vocab_hash: String,
    provenance: BTreeMap<String, String>,
    tensors: Vec<(String, Vec<usize>)>,
}

impl FusionModel {
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            vocab_hash: self.vocab_hash.clone(),
            provenance: self
                .provenance
                .iter()
                .map(|(k, v)| (k.clone(), v.to_string()))
                .collect(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::new();
        for (_, t) in self.params.iter() {
            buf.clear();
            buf.reserve(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint; with `expected_vocab` set, a different vocabulary
    /// hash is refused.
    pub fn load<R: Read>(mut r: R, expected_vocab: Option<&str>) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", version)));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 30 {
            return Err(Error::Format("checkpoint header too large".into()));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)
            .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if let Some(expected) = expected_vocab {
            if header.vocab_hash != expected {
                return Err(Error::VocabMismatch {
                    expected: expected.to_string(),
                    found: header.vocab_hash,
                });
            }
        }
        let mut params = ParamStore::new();
        for (name, shape) in &header.tensors {
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)
                .map_err(|_| Error::Format(format!("truncated tensor `{}`", name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            params.insert(name.clone(), Tensor::from_vec(shape, data)?);
        }
        let provenance = header
            .provenance
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.parse()?)))
            .collect::<Result<_>>()?;
        let model = FusionModel {
            config: header.config,
            vocab_size: header.vocab_size,
            vocab_hash: header.vocab_hash,
            provenance,
            params,
        };
        model.net()?;
        Ok(model)
    }
}
