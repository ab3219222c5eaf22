//! Training snapshots: a JSON manifest plus one little-endian f64 blob.
//!
//! The blob holds, in order, every parameter tensor, the optimizer's first
//! and second moments, and the speaker bank rows. The manifest records where
//! each piece starts, so every number is stored exactly once and in binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::csc::{BankHistory, BankRow, GlobalSpeakerBank};
use crate::error::{CscError, Result};
use crate::model::ModelConfig;
use crate::train::{Adam, RngState, TrainConfig, Trainer};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "checkpoint.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerEntry {
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Moments follow the parameter layout, starting at these offsets.
    pub m_offset: usize,
    pub v_offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankEntry {
    pub offset: usize,
    /// Offset of `[e_prev; z_last]` when the row has been updated.
    pub history_offset: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub dtype: String,
    pub blob_len: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: OptimizerEntry,
    pub bank_dim: usize,
    pub bank: Vec<BankEntry>,
    pub rng: RngState,
    pub epoch: usize,
    pub step: usize,
    pub last_perm: BTreeMap<usize, Vec<usize>>,
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

/// Serializes the trainer into manifest text and blob bytes.
pub fn encode(t: &Trainer) -> Result<(String, Vec<u8>)> {
    let mut blob: Vec<f64> = Vec::new();
    let mut tensors = Vec::new();
    for (name, x) in t.store.iter() {
        tensors.push(TensorEntry { name: name.to_string(), shape: x.shape().to_vec(), offset: blob.len(), len: x.len() });
        blob.extend_from_slice(x.data());
    }
    let m_offset = blob.len();
    t.opt.m.iter().for_each(|m| blob.extend_from_slice(m));
    let v_offset = blob.len();
    t.opt.v.iter().for_each(|v| blob.extend_from_slice(v));
    let mut bank = Vec::new();
    for row in &t.bank.rows {
        let offset = blob.len();
        blob.extend_from_slice(&row.e);
        let history_offset = row.history.as_ref().map(|h| {
            let o = blob.len();
            blob.extend_from_slice(&h.e_prev);
            blob.extend_from_slice(&h.z_last);
            o
        });
        bank.push(BankEntry { offset, history_offset });
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        dtype: "f64-le".into(),
        blob_len: blob.len(),
        model: t.model.cfg.clone(),
        train: t.cfg.clone(),
        tensors,
        optimizer: OptimizerEntry { t: t.opt.t, lr: t.opt.lr, beta1: t.opt.beta1, beta2: t.opt.beta2, eps: t.opt.eps, m_offset, v_offset },
        bank_dim: t.model.cfg.encoder.feature_dim,
        bank,
        rng: t.rng_state(),
        epoch: t.epoch,
        step: t.step,
        last_perm: t.last_perm.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    let bytes = blob.iter().flat_map(|v| v.to_le_bytes()).collect();
    Ok((text, bytes))
}

/// Rebuilds a trainer from manifest text and blob bytes.
pub fn decode(text: &str, bytes: &[u8]) -> Result<Trainer> {
    let m: CheckpointManifest = serde_json::from_str(text)?;
    if m.format_version != FORMAT_VERSION {
        return Err(CscError::Checkpoint(format!("format version {} is not supported (expected {FORMAT_VERSION})", m.format_version)));
    }
    if m.dtype != "f64-le" {
        return Err(CscError::Checkpoint(format!("unsupported dtype {:?}", m.dtype)));
    }
    if bytes.len() != m.blob_len * 8 {
        return Err(CscError::Checkpoint(format!("blob holds {} bytes, manifest expects {}", bytes.len(), m.blob_len * 8)));
    }
    let blob: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    let slice = |o: usize, n: usize| -> Result<&[f64]> {
        blob.get(o..o + n).ok_or_else(|| CscError::Checkpoint(format!("range {o}+{n} outside the blob")))
    };

    let mut t = Trainer::new(&m.model, &m.train, m.bank.len())?;
    let names: Vec<String> = t.store.iter().map(|(n, _)| n.to_string()).collect();
    if names.len() != m.tensors.len() {
        return Err(CscError::Checkpoint("parameter count differs from the model layout".into()));
    }
    let mut m_state = Vec::with_capacity(names.len());
    let mut v_state = Vec::with_capacity(names.len());
    let mut moment = 0;
    for (i, (entry, name)) in m.tensors.iter().zip(&names).enumerate() {
        let x = &mut t.store.tensors_mut()[i];
        if &entry.name != name || entry.shape != x.shape() || entry.len != x.len() {
            return Err(CscError::Checkpoint(format!("tensor {} does not match model parameter {name}", entry.name)));
        }
        x.data_mut().copy_from_slice(slice(entry.offset, entry.len)?);
        m_state.push(slice(m.optimizer.m_offset + moment, entry.len)?.to_vec());
        v_state.push(slice(m.optimizer.v_offset + moment, entry.len)?.to_vec());
        moment += entry.len;
    }
    let o = &m.optimizer;
    t.opt = Adam { lr: o.lr, beta1: o.beta1, beta2: o.beta2, eps: o.eps, t: o.t, m: m_state, v: v_state };

    let d = m.bank_dim;
    let rows = m
        .bank
        .iter()
        .map(|b| {
            let history = match b.history_offset {
                Some(h) => Some(BankHistory { e_prev: slice(h, d)?.to_vec(), z_last: slice(h + d, d)?.to_vec() }),
                None => None,
            };
            Ok(BankRow { e: slice(b.offset, d)?.to_vec(), history })
        })
        .collect::<Result<Vec<_>>>()?;
    t.bank = GlobalSpeakerBank { rows };
    t.set_rng_state(&m.rng)?;
    t.epoch = m.epoch;
    t.step = m.step;
    t.last_perm = m.last_perm;
    Ok(t)
}

pub fn save(t: &Trainer, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (text, bytes) = encode(t)?;
    // blob first, so a manifest on disk never points at a stale blob
    write_atomic(&dir.join(BLOB_FILE), &bytes)?;
    write_atomic(&manifest_path(dir), text.as_bytes())
}

pub fn load(dir: &Path) -> Result<Trainer> {
    let mp = manifest_path(dir);
    let text = fs::read_to_string(&mp).map_err(|e| CscError::Checkpoint(format!("cannot read {}: {e}", mp.display())))?;
    let bytes = fs::read(dir.join(BLOB_FILE))?;
    decode(&text, &bytes)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
