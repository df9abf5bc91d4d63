//! Versioned binary checkpoints: a JSON metadata header (structural config,
//! taxonomy hash, CDC theta, frozen flags) followed by named parameter
//! blocks with shape headers. Loads are rejected when the taxonomy hash or
//! the parameter name set does not match the model being rebuilt.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::math::Tensor;
use crate::model::{Model, ModelConfig};
use crate::taxonomy::AttackTaxonomy;

const MAGIC: &[u8; 4] = b"HPTC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub taxonomy_hash: u64,
    pub theta: f64,
    pub encoder: EncoderConfig,
    pub prompt_length: usize,
    pub fadc_low: f64,
    pub fadc_high: f64,
    pub dpi_attention: bool,
    pub depth_insertion: bool,
    pub baseline_context_length: usize,
    pub encoder_frozen: bool,
    pub tree_frozen: bool,
}

impl CheckpointMeta {
    fn from_model(model: &Model) -> CheckpointMeta {
        CheckpointMeta {
            version: VERSION,
            taxonomy_hash: model.taxonomy.hash(),
            theta: model.gates.theta,
            encoder: model.cfg.encoder.clone(),
            prompt_length: model.cfg.prompt_length,
            fadc_low: model.cfg.fadc_thresholds.0,
            fadc_high: model.cfg.fadc_thresholds.1,
            dpi_attention: model.dpi.attention_enabled,
            depth_insertion: model.cfg.depth_insertion,
            baseline_context_length: model.cfg.baseline_context_length,
            encoder_frozen: model.encoder.frozen,
            tree_frozen: model.tree.frozen,
        }
    }

    fn to_model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            prompt_length: self.prompt_length,
            theta: self.theta,
            fadc_thresholds: (self.fadc_low, self.fadc_high),
            dpi_attention: self.dpi_attention,
            depth_insertion: self.depth_insertion,
            baseline_context_length: self.baseline_context_length,
        }
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let meta = serde_json::to_vec(&CheckpointMeta::from_model(model))
        .map_err(|e| Error::Checkpoint(format!("metadata serialization: {e}")))?;
    let params = model.params();

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Rebuild a model from a checkpoint. The taxonomy must hash to the value
/// recorded at save time.
pub fn load_checkpoint(taxonomy: AttackTaxonomy, path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = cur.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| Error::Checkpoint(format!("metadata parse: {e}")))?;
    if meta.taxonomy_hash != taxonomy.hash() {
        return Err(Error::Checkpoint(
            "checkpoint was built against a different taxonomy".into(),
        ));
    }

    let n_params = cur.u32()? as usize;
    let mut blocks: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..n_params {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid parameter name".into()))?;
        let ndims = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        blocks.insert(name, Tensor::from_vec(&shape, data));
    }

    let mut model = Model::new(taxonomy, meta.to_model_config(), 0)?;
    let expected: Vec<String> = model.params().keys().cloned().collect();
    for name in &expected {
        let block = blocks.remove(name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint is missing parameter {name}"))
        })?;
        let param = model.param_mut(name).expect("known parameter");
        if param.shape() != block.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {:?}, checkpoint holds {:?}",
                param.shape(),
                block.shape()
            )));
        }
        *param = block;
    }
    if let Some((name, _)) = blocks.into_iter().next() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds unknown parameter {name}"
        )));
    }
    if meta.encoder_frozen {
        model.encoder.freeze();
    }
    model.tree.frozen = meta.tree_frozen;
    Ok(model)
}
