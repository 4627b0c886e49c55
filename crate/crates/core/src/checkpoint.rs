//! Binary checkpoint container.
//!
//! Layout: a little-endian u64 header length, a UTF-8 JSON header
//! `{tensors: [{name, shape, dtype, offset, length}], metadata}`, then the
//! raw little-endian f32 blobs. Offsets are relative to the first byte
//! after the header. Encoding is canonical, so save → load → save is
//! byte-identical.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::lora::LoraConfig;
use crate::tensor::Tensor;
use crate::vlm::{ModelConfig, ToyTokenizer, ToyVlm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Resolved run configuration.
    pub config: BTreeMap<String, String>,
    pub model: ModelConfig,
    pub lora: Option<LoraConfig>,
    pub vocab: Vec<String>,
    pub step: u64,
    pub rng_state: SplitMix64,
    /// Names of trainable tensors.
    pub trainable: Vec<String>,
}

impl CheckpointMeta {
    pub fn new(
        config: BTreeMap<String, String>,
        model: &ToyVlm<f32>,
        tokenizer: &ToyTokenizer,
        step: u64,
        rng_state: SplitMix64,
    ) -> Self {
        CheckpointMeta {
            config,
            model: model.config.clone(),
            lora: model.lora.clone(),
            vocab: tokenizer.vocab().to_vec(),
            step,
            rng_state,
            trainable: model
                .store
                .trainable_ids()
                .into_iter()
                .map(|id| model.store.name(id).to_string())
                .collect(),
        }
    }

    pub fn tokenizer(&self) -> Result<ToyTokenizer> {
        ToyTokenizer::from_vocab(self.vocab.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    metadata: CheckpointMeta,
}

pub fn encode(model: &ToyVlm<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut offset = 0u64;
    for (name, t) in model.store.iter() {
        let length = (t.numel() * 4) as u64;
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            length,
        });
        offset += length;
    }
    let header = serde_json::to_vec(&Header {
        tensors,
        metadata: meta.clone(),
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in model.store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(path: &Path, model: &ToyVlm<f32>, meta: &CheckpointMeta) -> Result<()> {
    atomic_write(path, &encode(model, meta)?)
}

/// Header-only view of a checkpoint.
pub fn read_header(bytes: &[u8]) -> Result<(Vec<TensorEntry>, CheckpointMeta, usize)> {
    let corrupt = |m: String| Error::Corrupt(m);
    if bytes.len() < 8 {
        return Err(corrupt(format!("file is {} bytes, shorter than the length prefix", bytes.len())));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let end = 8u64
        .checked_add(len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| corrupt(format!("header length {len} exceeds file size {}", bytes.len())))?
        as usize;
    let header: Header =
        serde_json::from_slice(&bytes[8..end]).map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    Ok((header.tensors, header.metadata, end))
}

pub fn decode(bytes: &[u8]) -> Result<(ToyVlm<f32>, CheckpointMeta)> {
    let (entries, meta, body_start) = read_header(bytes)?;
    let body = &bytes[body_start..];
    let corrupt = |m: String| Error::Corrupt(m);

    let mut model = ToyVlm::<f32>::init(meta.model.clone(), 0).map_err(|e| corrupt(format!("model config: {e}")))?;
    if let Some(l) = &meta.lora {
        model.attach_lora(l, 0).map_err(|e| corrupt(format!("adapter config: {e}")))?;
    }
    if entries.len() != model.store.len() {
        return Err(corrupt(format!(
            "checkpoint has {} tensors, configuration implies {}",
            entries.len(),
            model.store.len()
        )));
    }
    let mut expected_offset = 0u64;
    for e in &entries {
        let id = model
            .store
            .id(&e.name)
            .ok_or_else(|| corrupt(format!("unexpected tensor `{}`", e.name)))?;
        if e.dtype != "f32" {
            return Err(corrupt(format!("`{}` has dtype {}", e.name, e.dtype)));
        }
        if model.store.get(id).shape() != e.shape.as_slice() {
            return Err(corrupt(format!(
                "`{}` has shape {:?}, expected {:?}",
                e.name,
                e.shape,
                model.store.get(id).shape()
            )));
        }
        let numel: usize = e.shape.iter().product();
        let end = e.offset.checked_add(e.length);
        if e.offset != expected_offset || e.length != (numel * 4) as u64 || end.is_none_or(|x| x > body.len() as u64) {
            return Err(corrupt(format!("`{}` has an invalid byte range", e.name)));
        }
        expected_offset += e.length;
        let raw = &body[e.offset as usize..(e.offset + e.length) as usize];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        *model.store.get_mut(id) = Tensor::new(&e.shape, data)?;
    }
    if expected_offset != body.len() as u64 {
        return Err(corrupt(format!("{} trailing bytes after the last tensor", body.len() as u64 - expected_offset)));
    }
    let trainable: HashSet<&str> = meta.trainable.iter().map(String::as_str).collect();
    for name in &trainable {
        if model.store.id(name).is_none() {
            return Err(corrupt(format!("trainable list names unknown tensor `{name}`")));
        }
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let t = trainable.contains(model.store.name(id));
        model.store.set_trainable(id, t);
    }
    meta.tokenizer()?;
    Ok((model, meta))
}

pub fn load(path: &Path) -> Result<(ToyVlm<f32>, CheckpointMeta)> {
    if !path.exists() {
        return Err(Error::config(format!("checkpoint `{}` does not exist", path.display())));
    }
    decode(&fs::read(path)?)
}
