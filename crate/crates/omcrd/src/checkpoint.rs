//! Training checkpoints: every peer's parameters and moment estimates plus
//! the schedule and epoch cursor, bound to the configuration that produced
//! them by a hash.

use std::path::Path;

use omcrd_core::optim::{AdamWState, CosineSchedule};
use omcrd_core::trainer::TrainState;
use omcrd_core::{PeerConfig, PeerEnsemble, PeerNet, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::bytes::{put_f32s, read_file, sha256_hex, write_file, Reader};
use crate::error::{Error, Result};
use crate::framed;
use crate::model_file::{read_tensors, tensor_infos, TensorInfo};

const MAGIC: &[u8; 8] = b"OMCRDCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Configuration a checkpoint belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunIdentity {
    pub peer: PeerConfig,
    pub train: TrainConfig,
    pub fold: usize,
}

impl RunIdentity {
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("identity serializes"))
    }

    fn differences(&self, other: &RunIdentity) -> Vec<String> {
        let a = serde_json::to_value(self).expect("identity serializes");
        let b = serde_json::to_value(other).expect("identity serializes");
        let mut out = Vec::new();
        diff("", &a, &b, &mut out);
        out
    }
}

fn diff(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
            for (k, va) in x {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{}.{}", prefix, k)
                };
                match y.get(k) {
                    Some(vb) => diff(&key, va, vb, out),
                    None => out.push(format!("{} missing", key)),
                }
            }
        }
        _ if a != b => out.push(format!("{}: saved {} vs requested {}", prefix, a, b)),
        _ => {}
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PeerEntry {
    init_seed: u64,
    adam_step: u64,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    config_hash: String,
    identity: RunIdentity,
    dtype: String,
    epoch: usize,
    step: u64,
    schedule: CosineSchedule,
    peers: Vec<PeerEntry>,
}

pub fn encode_checkpoint(state: &TrainState<f32>, identity: &RunIdentity) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut peers = Vec::with_capacity(state.ensemble.len());
    for (peer, opt) in state.ensemble.peers.iter().zip(&state.optim) {
        for p in peer.params() {
            put_f32s(&mut payload, p.data());
        }
        for m in opt.m.iter().chain(&opt.v) {
            put_f32s(&mut payload, m);
        }
        peers.push(PeerEntry {
            init_seed: peer.config().init_seed,
            adam_step: opt.step,
            tensors: tensor_infos(peer),
        });
    }
    let header = CheckpointHeader {
        config_hash: identity.hash(),
        identity: identity.clone(),
        dtype: "f32".into(),
        epoch: state.epoch,
        step: state.step,
        schedule: state.schedule,
        peers,
    };
    Ok(framed::encode(MAGIC, CHECKPOINT_VERSION, &header, &payload))
}

/// Decodes a checkpoint, refusing it unless it was written for `expected`.
pub fn decode_checkpoint(bytes: &[u8], path: &Path, expected: &RunIdentity) -> Result<TrainState<f32>> {
    let (h, payload): (CheckpointHeader, _) = framed::decode(bytes, path, MAGIC, CHECKPOINT_VERSION)?;
    if h.dtype != "f32" {
        return Err(Error::format(path, format!("unsupported dtype {}", h.dtype)));
    }
    if h.config_hash != expected.hash() {
        let diffs = h.identity.differences(expected);
        return Err(omcrd_core::Error::ConfigMismatch(format!(
            "{}: checkpoint was written for a different run ({})",
            path.display(),
            diffs.join("; ")
        ))
        .into());
    }
    let mut rd = Reader::new(payload, path);
    let mut peers = Vec::with_capacity(h.peers.len());
    let mut optim = Vec::with_capacity(h.peers.len());
    for entry in &h.peers {
        let params = read_tensors(&mut rd, &entry.tensors)?;
        let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        let m = sizes.iter().map(|&n| rd.f32s(n)).collect::<Result<Vec<_>>>()?;
        let v = sizes.iter().map(|&n| rd.f32s(n)).collect::<Result<Vec<_>>>()?;
        peers.push(PeerNet::from_parts(&h.identity.peer.with_seed(entry.init_seed), params)?);
        optim.push(AdamWState {
            step: entry.adam_step,
            m,
            v,
        });
    }
    rd.finish()?;
    Ok(TrainState {
        ensemble: PeerEnsemble { peers },
        optim,
        epoch: h.epoch,
        step: h.step,
        schedule: h.schedule,
    })
}

pub fn save_checkpoint(path: &Path, state: &TrainState<f32>, identity: &RunIdentity) -> Result<()> {
    write_file(path, &encode_checkpoint(state, identity)?)
}

pub fn load_checkpoint(path: &Path, expected: &RunIdentity) -> Result<TrainState<f32>> {
    decode_checkpoint(&read_file(path)?, path, expected)
}
